"""Adaptive random-walk Metropolis over the full joint posterior.

This is a slow but assumption-free reference for the Laplace fit. All
hyperparameters and latent effects are sampled jointly. During warmup the
proposal covariance follows the empirical covariance of the chain (scaled by
2.38^2 / d) and a global scale is tuned towards 23.4% acceptance; both are
frozen afterwards.

By default the latent effects are sampled in non-centered form,
``u = z_u / sqrt(tau_u)`` and ``w = L^-T z_w`` with ``Q = L L^T``, which
removes the funnel between the field and its hyperparameters. The target
density is the joint posterior transformed exactly (the Jacobian cancels
the Gaussian normalizers), and stored samples are mapped back to the
natural ``(theta, u, w)`` coordinates.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import lapack

from .errors import NODATA, DataError, NumericError, ValidationError
from .laplace import FitResult
from .model import LOG_2PI, DisaggModel, ModelSpec, apply_link_inverse, family_nll
from .prepare import PreparedData
from .spde import SparseCholesky

TARGET_ACCEPTANCE = 0.234
ADAPT_BATCH = 50
DENSE_FIELD_LIMIT = 400
MIN_WARMUP_ACCEPTANCE = 1e-3


@dataclass
class ChainSet:
    """Draws from several chains; ``samples`` has shape chains x iterations x parameters.

    Warmup iterations are included; ``post_warmup()`` drops them.
    """

    n_chains: int
    n_iterations: int
    n_warmup: int
    samples: np.ndarray
    seeds: list
    acceptance_rates: np.ndarray
    labels: list[str]
    adaptation_log: list[tuple[int, int, str, float]] = field(default_factory=list)
    prep_digest: str = ""
    spec: dict | None = None
    init_scale: float = 0.1
    proposal_cov: np.ndarray | None = None

    def post_warmup(self) -> np.ndarray:
        return self.samples[:, self.n_warmup:, :]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["chain", "iteration", *self.labels])
        for c in range(self.n_chains):
            for t in range(self.n_iterations):
                w.writerow([c, t, *(repr(float(v)) for v in self.samples[c, t])])
        return buf.getvalue()

    def meta(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "n_iterations": self.n_iterations,
            "n_warmup": self.n_warmup,
            "seeds": self.seeds,
            "acceptance_rates": [float(a) for a in self.acceptance_rates],
            "labels": list(self.labels),
            "prep_digest": self.prep_digest,
            "spec": self.spec,
            "init_scale": self.init_scale,
            "adaptation_events": len(self.adaptation_log),
        }

    def save(self, directory) -> None:
        """Write ``chains.csv`` and ``chains.json`` (run metadata)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "chains.csv").write_text(self.to_csv())
        (directory / "chains.json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "ChainSet":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "chains.json").read_text())
            with open(directory / "chains.csv", newline="") as fh:
                rows = list(csv.reader(fh))[1:]
        except FileNotFoundError as exc:
            raise DataError(f"missing chain artifact: {exc.filename}") from None
        d = len(meta["labels"])
        values = np.array([[float(v) for v in r[2:]] for r in rows], dtype=float)
        samples = values.reshape(meta["n_chains"], meta["n_iterations"], d)
        return cls(meta["n_chains"], meta["n_iterations"], meta["n_warmup"], samples, meta["seeds"],
                   np.array(meta["acceptance_rates"]), meta["labels"], [], meta["prep_digest"], meta["spec"],
                   meta.get("init_scale", 0.1))


@dataclass
class Diagnostics:
    labels: list[str]
    rhat: np.ndarray
    ess: np.ndarray

    def max_rhat(self) -> float:
        finite = self.rhat[self.rhat != NODATA]
        return float(finite.max()) if finite.size else NODATA

    def converged(self, target: float = 1.05) -> bool:
        return bool(np.all((self.rhat != NODATA) & (self.rhat < target)))

    def to_json(self) -> str:
        doc = {
            "parameters": {n: {"rhat": float(r), "ess": float(e)} for n, r, e in zip(self.labels, self.rhat, self.ess)},
            "max_rhat": self.max_rhat(),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- #
# Generic sampler
# --------------------------------------------------------------------------- #


def _chain(nll: Callable[[np.ndarray], float], x0: np.ndarray, n_iterations: int, n_warmup: int,
           rng: np.random.Generator, init_cov: np.ndarray, chain_id: int):
    d = x0.size
    x = np.array(x0, dtype=float)
    f = float(nll(x))
    if not math.isfinite(f):
        raise NumericError(f"chain {chain_id}: target is not finite at the initial state")
    base = 2.38 ** 2 / d
    cov = np.array(init_cov, dtype=float)
    root = np.linalg.cholesky(base * cov)
    log_scale = 0.0
    mean = np.zeros(d)
    m2 = np.zeros((d, d))
    n_seen = 0
    out = np.empty((n_iterations, d))
    accepted_warm = accepted_post = 0
    batch_accepts = 0
    batches = 0
    log = []

    for t in range(n_iterations):
        prop = x + math.exp(log_scale) * (root @ rng.standard_normal(d))
        f_new = float(nll(prop))
        # exact Metropolis ratio on the negative log target
        if math.isfinite(f_new) and math.log(rng.random()) < f - f_new:
            x, f = prop, f_new
            if t < n_warmup:
                accepted_warm += 1
                batch_accepts += 1
            else:
                accepted_post += 1
        out[t] = x

        if t < n_warmup:
            n_seen += 1
            delta = x - mean
            mean += delta / n_seen
            m2 += np.outer(delta, x - mean)
            if (t + 1) % ADAPT_BATCH == 0:
                batches += 1
                rate = batch_accepts / ADAPT_BATCH
                batch_accepts = 0
                log_scale += (rate - TARGET_ACCEPTANCE) * 3.0 / math.sqrt(batches)
                log.append((chain_id, t, "scale", log_scale))
                if n_seen >= max(2 * d, 200) and (t + 1) % (4 * ADAPT_BATCH) == 0:
                    emp = m2 / (n_seen - 1)
                    jitter = 1e-10 * max(float(np.mean(np.diag(emp))), 1e-300)
                    try:
                        root = np.linalg.cholesky(base * (emp + jitter * np.eye(d)))
                        log.append((chain_id, t, "covariance", log_scale))
                    except np.linalg.LinAlgError:
                        pass

    if n_warmup >= 100 and accepted_warm / n_warmup < MIN_WARMUP_ACCEPTANCE:
        raise NumericError(
            f"chain {chain_id} rejected almost every warmup proposal "
            f"(acceptance {accepted_warm / n_warmup:.2g}); retry with a smaller initial scale"
        )
    n_post = n_iterations - n_warmup
    acc = accepted_post / n_post if n_post else accepted_warm / max(n_warmup, 1)
    return out, acc, log, math.exp(2.0 * log_scale) * (root @ root.T) / base


def run_target_chains(nll: Callable[[np.ndarray], float], x0s, n_iterations: int, n_warmup: int,
                      seed: int = 0, init_cov: np.ndarray | None = None, ncores: int = 1):
    """Adaptive Metropolis chains on an arbitrary negative log density.

    Args:
        nll: Negative log target; may return ``inf`` outside the support.
        x0s: One initial state per chain.
        n_iterations: Iterations per chain, warmup included.
        n_warmup: Adaptive iterations at the start of each chain.
        seed: Chain ``c`` draws from the stream ``(seed, c)``.
        init_cov: Initial proposal covariance before scaling by 2.38^2/d.

    Returns:
        ``(samples, acceptance_rates, adaptation_log, proposal_cov)``; the last
        is the adapted proposal covariance averaged over chains, in the same
        units as ``init_cov``.
    """
    if not 0 <= n_warmup < n_iterations:
        raise ValidationError("need 0 <= n_warmup < n_iterations")
    x0s = [np.asarray(x, dtype=float) for x in x0s]
    d = x0s[0].size
    init_cov = np.eye(d) * 0.01 if init_cov is None else np.asarray(init_cov, dtype=float)

    def one(c):
        rng = np.random.default_rng([seed, c])
        return _chain(nll, x0s[c], n_iterations, n_warmup, rng, init_cov, c)

    idx = range(len(x0s))
    if ncores > 1:
        with ThreadPoolExecutor(max_workers=ncores) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(c) for c in idx]
    samples = np.stack([r[0] for r in results])
    acc = np.array([r[1] for r in results])
    log = [e for r in results for e in r[2]]
    return samples, acc, log, np.mean([r[3] for r in results], axis=0)


# --------------------------------------------------------------------------- #
# Disaggregation target
# --------------------------------------------------------------------------- #


class JointTarget:
    """Joint negative log posterior in sampling coordinates ``(theta, z)``."""

    def __init__(self, prep: PreparedData, spec: ModelSpec, noncentered: bool = True):
        self.model = DisaggModel(prep, spec)
        self.spec = spec
        self.noncentered = noncentered
        L = self.model.layout
        self.n_theta = L.n_theta
        self.layout = L
        self.free = np.array([k for k, n in enumerate(L.labels) if n not in spec.fixed], dtype=np.int64)
        self.fixed_theta = np.zeros(L.n_theta)
        for name, value in spec.fixed.items():
            self.fixed_theta[L.position[name]] = value
        self.dim = self.free.size + L.n_latent
        m = self.model
        self._dense = spec.use_field and L.n_nodes <= DENSE_FIELD_LIMIT
        if self._dense:
            self._mass = m.spde.mass.toarray()
            self._stiff = m.spde.stiff.toarray()
            self._biharm = m.spde.biharm.toarray()
        self._safe_totals = np.where(m.totals > 0, m.totals, 1.0)
        self._B = m.B.toarray() if m.B.shape[0] * m.B.shape[1] <= 1_000_000 else m.B

    def split(self, x: np.ndarray):
        theta = self.fixed_theta.copy()
        theta[self.free] = x[:self.free.size]
        return theta, x[self.free.size:]

    def _factor(self, theta):
        return SparseCholesky(self.model.spde.precision(self.model.field_hyper(theta)))

    def _field(self, theta, z):
        """Field values ``L^-T z`` for the precision at ``theta``."""
        if not self._dense:
            return self._factor(theta).sample(z)
        h = self.model.field_hyper(theta)
        k2 = h.kappa ** 2
        Q = h.tau2 * (k2 * k2 * self._mass + 2.0 * k2 * self._stiff + self._biharm)
        chol, info = lapack.dpotrf(Q, lower=1, clean=0)
        if info != 0:
            raise NumericError("field precision is not positive definite")
        w, _ = lapack.dtrtrs(chol, z, lower=1, trans=1)
        return w

    def to_natural(self, x: np.ndarray) -> np.ndarray:
        """``(theta, u, w)`` for a sampling-coordinate state."""
        theta, z = self.split(x)
        if not self.noncentered:
            return np.concatenate([theta, z])
        return np.concatenate([theta, self._latent(theta, z)])

    def from_natural(self, theta: np.ndarray, latent: np.ndarray) -> np.ndarray:
        z = np.array(latent, dtype=float)
        if self.noncentered:
            L = self.layout
            if self.spec.use_iid:
                z[L.u] = latent[L.u] * math.exp(0.5 * L.get(theta, "iideffect_log_tau"))
            if self.spec.use_field:
                z[L.w] = self._factor(theta).whiten(latent[L.w])
        return np.concatenate([np.asarray(theta)[self.free], z])

    def _latent(self, theta, z):
        L = self.layout
        latent = np.array(z, dtype=float)
        if self.spec.use_iid:
            latent[L.u] = z[L.u] * math.exp(-0.5 * L.get(theta, "iideffect_log_tau"))
        if self.spec.use_field:
            latent[L.w] = self._field(theta, z[L.w])
        return latent

    def __call__(self, x: np.ndarray) -> float:
        theta, z = self.split(x)
        if not np.all(np.isfinite(x)):
            return math.inf
        m = self.model
        if not self.noncentered:
            try:
                hs = m.hyper_state(theta)
            except NumericError:
                return math.inf
            return m.evaluate(hs, z, order=0)[0]
        try:
            latent = self._latent(theta, z)
        except NumericError:
            return math.inf
        eta = theta[0] + m.X @ theta[self.layout.slopes]
        if m.B.shape[1]:
            eta = eta + self._B @ latent
        cases = np.add.reduceat(m.a * apply_link_inverse(eta, self.spec.link), m.starts)
        prate = cases / self._safe_totals if self.spec.family == "binomial" else None
        nll = family_nll(self.spec.family, m.y, cases, prate, sd=m.gaussian_sd(theta), sizes=m.sizes)
        value = nll + m.hyper_nlp(theta) + 0.5 * float(z @ z) + 0.5 * z.size * LOG_2PI
        return value if math.isfinite(value) else math.inf


def _chain_labels(target: JointTarget) -> list[str]:
    L = target.layout
    labels = list(L.labels)
    labels += [f"u[{i}]" for i in range(L.u.stop - L.u.start)]
    labels += [f"w[{j}]" for j in range(L.w.stop - L.w.start)]
    return labels


def _natural_samples(target: JointTarget, samples: np.ndarray) -> np.ndarray:
    out = np.empty((samples.shape[0], samples.shape[1], target.n_theta + target.layout.n_latent))
    for c in range(samples.shape[0]):
        prev = None
        for t in range(samples.shape[1]):
            row = samples[c, t]
            if prev is None or not np.array_equal(row, samples[c, t - 1]):
                prev = target.to_natural(row)
            out[c, t] = prev
    return out


def run_chains(prep: PreparedData, spec: ModelSpec, fit: FitResult | None = None, n_chains: int = 4,
               n_iterations: int = 8000, n_warmup: int = 2000, seed: int = 0, init_scale: float = 0.1,
               noncentered: bool = True, ncores: int = 1, init_cov: np.ndarray | None = None) -> ChainSet:
    """Sample the joint posterior with ``n_chains`` adaptive Metropolis chains.

    Chains start at the Laplace mode (from ``fit``, or a fresh fit) jittered by
    ``init_scale`` standard normals in sampling coordinates. The initial
    proposal covariance is ``init_cov`` when given (sampling coordinates, for
    instance the ``proposal_cov`` of an earlier run), otherwise the Laplace
    covariance for theta and ``init_scale^2`` for the latent coordinates.
    """
    if n_chains < 1:
        raise ValidationError("n_chains must be at least 1")
    if not 0 <= n_warmup < n_iterations:
        raise ValidationError("need 0 <= n_warmup < n_iterations")
    if fit is None:
        from .laplace import fit as laplace_fit
        fit = laplace_fit(prep, spec)
    if fit.prep_digest != prep.digest():
        raise ValidationError("fit was produced from different prepared data (provenance hash mismatch)")
    target = JointTarget(prep, spec, noncentered=noncentered)
    center = target.from_natural(fit.theta_hat, fit.latent_mode)
    rng = np.random.default_rng([seed, n_chains, 7919])
    x0s = [center + init_scale * rng.standard_normal(center.size) for _ in range(n_chains)]

    if init_cov is None:
        k = target.free.size
        init_cov = np.eye(target.dim) * init_scale ** 2
        theta_cov = fit.theta_cov[np.ix_(target.free, target.free)]
        lam, V = np.linalg.eigh(0.5 * (theta_cov + theta_cov.T))
        init_cov[:k, :k] = (V * np.maximum(lam, 1e-6)) @ V.T
    elif np.shape(init_cov) != (target.dim, target.dim):
        raise ValidationError(f"init_cov must be {target.dim} x {target.dim}")

    raw, acc, log, proposal_cov = run_target_chains(target, x0s, n_iterations, n_warmup, seed=seed, init_cov=init_cov,
                                      ncores=ncores)
    return ChainSet(
        n_chains=n_chains,
        n_iterations=n_iterations,
        n_warmup=n_warmup,
        samples=_natural_samples(target, raw),
        seeds=[[seed, c] for c in range(n_chains)],
        acceptance_rates=acc,
        labels=_chain_labels(target),
        adaptation_log=log,
        prep_digest=prep.digest(),
        spec=spec.to_dict(),
        init_scale=init_scale,
        proposal_cov=proposal_cov,
    )


# --------------------------------------------------------------------------- #
# Diagnostics
# --------------------------------------------------------------------------- #


def _split(draws: np.ndarray) -> np.ndarray:
    """Chains x draws x params -> (2 chains) x (half draws) x params."""
    n = draws.shape[1] // 2
    return np.concatenate([draws[:, :n], draws[:, draws.shape[1] - n:]], axis=0)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each column over lags 0..n-1 (biased estimator)."""
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=0)
    return np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n] / n


def _check_draws(draws: np.ndarray) -> None:
    if draws.ndim != 3:
        raise ValidationError("draws must be shaped chains x iterations x parameters")
    if draws.shape[0] < 2:
        raise ValidationError("split R-hat needs at least two chains")
    if draws.shape[1] < 4:
        raise ValidationError("split R-hat needs at least four post-warmup draws per chain")


def split_rhat(draws: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction per parameter.

    Parameters with zero within-chain variance get the nodata sentinel.
    """
    _check_draws(draws)
    s = _split(draws)
    n = s.shape[1]
    W = s.var(axis=1, ddof=1).mean(axis=0)
    B = n * s.mean(axis=1).var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    return np.where(W > 0, r, NODATA)


def effective_sample_size(draws: np.ndarray) -> np.ndarray:
    """Multi-chain ESS with Geyer's initial positive sequence truncation."""
    _check_draws(draws)
    s = _split(draws)
    m, n, d = s.shape
    W = s.var(axis=1, ddof=1).mean(axis=0)
    B = n * s.mean(axis=1).var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    acov = np.mean([_autocov(s[c]) for c in range(m)], axis=0)  # lags x params
    ess = np.full(d, NODATA)
    for j in range(d):
        if not W[j] > 0:
            continue
        rho = 1.0 - (W[j] - acov[:, j]) / var_plus[j]
        rho[0] = 1.0
        total = 0.0
        prev = math.inf
        for k in range(0, n - 1, 2):
            pair = rho[k] + rho[k + 1]
            if pair <= 0:
                break
            pair = min(pair, prev)  # initial monotone sequence
            total += pair
            prev = pair
        tau = max(-1.0 + 2.0 * total, 1.0 / math.log10(max(m * n, 10)))
        ess[j] = m * n / tau
    return ess


def rhat(chains: ChainSet) -> Diagnostics:
    draws = chains.post_warmup()
    return Diagnostics(list(chains.labels), split_rhat(draws), effective_sample_size(draws))


def run_until_converged(prep: PreparedData, spec: ModelSpec, fit: FitResult | None = None, n_chains: int = 4,
                        start_iterations: int = 1000, warmup_fraction: float = 0.25, rhat_target: float = 1.05,
                        max_iterations: int = 256_000, seed: int = 0, init_scale: float = 0.1,
                        ncores: int = 1, callback: Callable[[int, float], None] | None = None):
    """Rerun the chains, doubling the iterations until every R-hat is below the target.

    Each attempt restarts the chains from the Laplace mode but begins with the
    proposal covariance adapted in the previous attempt. Returns ``(chains,
    diagnostics, history)`` where ``history`` lists ``(iterations, max_rhat)``
    per attempt. The last attempt is returned even if it did not reach the
    target.
    """
    if fit is None:
        from .laplace import fit as laplace_fit
        fit = laplace_fit(prep, spec)
    n = start_iterations
    history = []
    cov = None
    while True:
        warm = int(round(warmup_fraction * n))
        chains = run_chains(prep, spec, fit, n_chains, n, warm, seed, init_scale, ncores=ncores, init_cov=cov)
        cov = chains.proposal_cov
        diag = rhat(chains)
        history.append((n, diag.max_rhat()))
        if callback is not None:
            callback(n, diag.max_rhat())
        if diag.converged(rhat_target) or 2 * n > max_iterations:
            return chains, diag, history
        n *= 2


# --------------------------------------------------------------------------- #
# Comparison with the Laplace fit
# --------------------------------------------------------------------------- #


@dataclass
class Comparison:
    labels: list[str]
    laplace_mean: np.ndarray
    laplace_sd: np.ndarray
    mcmc_mean: np.ndarray
    mcmc_sd: np.ndarray

    @property
    def standardized_difference(self) -> np.ndarray:
        """``|laplace mean - mcmc mean| / mcmc sd`` (nodata where the sd is 0)."""
        diff = np.abs(self.laplace_mean - self.mcmc_mean)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.mcmc_sd > 0, diff / self.mcmc_sd, np.where(diff == 0, 0.0, NODATA))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "mcmc_mean", "mcmc_sd", "laplace_mean", "laplace_sd", "abs_diff_over_mcmc_sd"])
        for row in zip(self.labels, self.mcmc_mean, self.mcmc_sd, self.laplace_mean, self.laplace_sd,
                       self.standardized_difference):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
        return buf.getvalue()

    def to_text(self) -> str:
        names = ["slope" if n.startswith("slope[") else n for n in self.labels]
        lines = [f"{'':<18s}{'MCMC':>16s}{'Laplace':>16s}{'|diff|/sd':>11s}"]
        for name, mm, ms, lm, ls, r in zip(names, self.mcmc_mean, self.mcmc_sd, self.laplace_mean,
                                           self.laplace_sd, self.standardized_difference):
            lines.append(f"{name:<18s}{f'{mm:.2f} ({ms:.2f})':>16s}{f'{lm:.2f} ({ls:.2f})':>16s}{r:>11.2f}")
        lines.append("")
        lines.append("MCMC chains were started at the Laplace mode plus Gaussian jitter.")
        return "\n".join(lines)


def compare(fit: FitResult, chains: ChainSet) -> Comparison:
    """Laplace and MCMC posterior summaries of every hyperparameter.

    Raises:
        ValidationError: the chains were run on other data or another model.
    """
    if chains.prep_digest != fit.prep_digest:
        raise ValidationError("fit and chains come from different prepared data (provenance hash mismatch)")
    if chains.spec is not None and chains.spec != fit.spec.to_dict():
        raise ValidationError("fit and chains use different model specifications")
    k = len(fit.labels)
    if list(chains.labels[:k]) != list(fit.labels):
        raise ValidationError("fit and chains have different hyperparameters")
    draws = chains.post_warmup()[:, :, :k].reshape(-1, k)
    return Comparison(
        labels=list(fit.labels),
        laplace_mean=np.asarray(fit.theta_hat, dtype=float),
        laplace_sd=fit.std_errors,
        mcmc_mean=draws.mean(axis=0),
        mcmc_sd=draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(k),
    )
