"""Nested Laplace fitting.

The inner problem finds the mode of the latent effects for fixed
hyperparameters by damped Newton iterations. The outer problem minimizes the
Laplace approximation of the negative log marginal posterior,

    L(theta) = f(theta, mode) + 1/2 log det H(mode) - n_latent/2 log(2 pi),

with BFGS on central finite-difference gradients. The hyperparameter
covariance is the inverse of a finite-difference Hessian of ``L``.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NumericError, ValidationError
from .model import DisaggModel, HyperState, ModelSpec, ParamLayout, apply_link
from .prepare import PreparedData
from .spde import SparseCholesky

LOG_2PI = math.log(2.0 * math.pi)

INNER_TOL = 1e-8
INNER_MAX_ITER = 100
ARMIJO_C = 1e-4
OUTER_GTOL = 1e-5
FD_REL_STEP = 1e-4
HESS_REL_STEP = 1e-3
MAX_OUTER_STEP = 2.0
STALL_ITERATIONS = 3
STALL_GTOL_FACTOR = 10.0
QUADRATIC_DECREMENT = 1e-6
STALL_DECREMENT = 1e-10
RIDGES = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass
class InnerResult:
    latent: np.ndarray
    factor: SparseCholesky
    value: float
    iterations: int
    converged: bool
    grad_norm: float
    modified_hessian: bool = False


def _factorize(model: DisaggModel, hs: HyperState, latent, H):
    """Factor the latent Hessian, falling back to a ridge and then to Gauss-Newton."""
    try:
        return SparseCholesky(H), False
    except NumericError:
        pass
    diag = np.abs(H.diagonal()) + 1e-12
    for ridge in RIDGES:
        try:
            return SparseCholesky(H + sp.diags(ridge * diag)), True
        except NumericError:
            continue
    _, _, H_gn = model.evaluate(hs, latent, order=2, gauss_newton=True)
    return SparseCholesky(H_gn), True


def newton_mode(model: DisaggModel, hs: HyperState, start: np.ndarray, tol: float = INNER_TOL,
                max_iter: int = INNER_MAX_ITER) -> InnerResult:
    """Damped Newton iterations on the latent effects.

    Raises:
        NumericError: the objective is not finite at the start or the
            Hessian cannot be factorized.
    """
    x = np.array(start, dtype=float)
    n = model.layout.n_latent
    if n == 0:
        value, _, _ = model.evaluate(hs, x, order=0)
        if not np.isfinite(value):
            raise NumericError("objective is not finite")
        return InnerResult(x, SparseCholesky(sp.csr_matrix((0, 0))), value, 0, True, 0.0)

    iterations = 0
    polished = False
    while True:
        f, g, H = model.evaluate(hs, x, order=2)
        if not np.isfinite(f):
            raise NumericError("inner objective is not finite")
        gnorm = float(np.max(np.abs(g)))
        factor, modified = _factorize(model, hs, x, H)
        p = -factor.solve(g)
        decrement = -float(g @ p)
        if gnorm < tol and (polished or modified):
            return InnerResult(x, factor, f, iterations, True, gnorm, modified)
        if gnorm < tol:
            # One more full Newton step: the tolerance alone leaves mode errors
            # along flat directions that shift log det H by ~1e-9.
            polished = True
            f_new, g_new, _ = model.evaluate(hs, x + p, order=1)
            if np.isfinite(f_new) and float(np.max(np.abs(g_new))) <= gnorm:
                x = x + p
                iterations += 1
                continue
            return InnerResult(x, factor, f, iterations, True, gnorm, modified)
        if iterations >= max_iter:
            return InnerResult(x, factor, f, iterations, False, gnorm, modified)

        if 0.0 <= decrement < QUADRATIC_DECREMENT:
            # Near the mode, changes in f drown in rounding error (the
            # likelihood terms are much larger than their sum), so the step
            # is judged by the gradient instead.
            f_new, g_new, _ = model.evaluate(hs, x + p, order=1)
            if np.isfinite(f_new) and float(np.max(np.abs(g_new))) < gnorm:
                x = x + p
                iterations += 1
                continue
            return InnerResult(x, factor, f, iterations, decrement < STALL_DECREMENT, gnorm, modified)

        slope = -decrement
        if not slope < 0:
            p, slope = -g, -float(g @ g)
        noise = 8.0 * np.finfo(float).eps * max(1.0, abs(f))
        alpha = 1.0
        while True:
            f_new, _, _ = model.evaluate(hs, x + alpha * p, order=0)
            if np.isfinite(f_new) and f_new <= f + ARMIJO_C * alpha * slope + noise:
                break
            alpha *= 0.5
            if alpha < 1e-12:
                return InnerResult(x, factor, f, iterations, gnorm < 1e3 * tol, gnorm, modified)
        x = x + alpha * p
        iterations += 1


class LaplaceProblem:
    """Laplace-approximated objective with a warm-started inner solver."""

    def __init__(self, prep: PreparedData, spec: ModelSpec, model: DisaggModel | None = None):
        self.prep = prep
        self.spec = spec
        self.model = model if model is not None else DisaggModel(prep, spec)
        self.warm = np.zeros(self.model.layout.n_latent)
        self.inner_iterations = 0

    def inner(self, theta, start=None) -> InnerResult:
        hs = self.model.hyper_state(theta)
        start = self.warm if start is None else start
        try:
            res = newton_mode(self.model, hs, start)
        except NumericError:
            if not np.any(start):
                raise
            res = newton_mode(self.model, hs, np.zeros_like(start))
        return res

    def evaluate(self, theta, start=None) -> tuple[float, InnerResult | None]:
        """Value of the Laplace objective and the inner result (None when rejected)."""
        try:
            res = self.inner(theta, start)
        except NumericError:
            return math.inf, None
        n = self.model.layout.n_latent
        value = res.value + 0.5 * res.factor.logdet() - 0.5 * n * LOG_2PI
        if not math.isfinite(value):
            return math.inf, None
        return value, res

    def objective(self, theta) -> float:
        """Evaluate at ``theta`` and move the warm start to the new mode."""
        value, res = self.evaluate(theta)
        if res is not None:
            self.warm = res.latent
            self.inner_iterations += res.iterations
        return value


def inner_optimize(theta, prep: PreparedData, spec: ModelSpec, start=None) -> InnerResult:
    """Latent mode, its Hessian factor and the joint NLL there."""
    problem = LaplaceProblem(prep, spec)
    return problem.inner(np.asarray(theta, dtype=float), start)


def laplace_objective(theta, prep: PreparedData, spec: ModelSpec) -> float:
    problem = LaplaceProblem(prep, spec)
    return problem.evaluate(np.asarray(theta, dtype=float))[0]


# --------------------------------------------------------------------------- #
# Outer optimization
# --------------------------------------------------------------------------- #


def _map(fn, items, ncores):
    if ncores > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=ncores) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def fd_gradient(problem: LaplaceProblem, theta, free, start, ncores=1, rel_step=FD_REL_STEP):
    """Central differences over the ``free`` coordinates, all warm-started at ``start``."""
    points = []
    for k in free:
        h = rel_step * (1.0 + abs(theta[k]))
        for sign in (1.0, -1.0):
            t = theta.copy()
            t[k] += sign * h
            points.append(t)
    values = _map(lambda t: problem.evaluate(t, start)[0], points, ncores)
    grad = np.zeros(len(free))
    for j, k in enumerate(free):
        h = rel_step * (1.0 + abs(theta[k]))
        grad[j] = (values[2 * j] - values[2 * j + 1]) / (2.0 * h)
    return grad


def fd_hessian(problem: LaplaceProblem, theta, free, start, f0, ncores=1, rel_step=HESS_REL_STEP):
    """Central second differences of the Laplace objective over ``free``."""
    d = len(free)
    steps = [rel_step * (1.0 + abs(theta[k])) for k in free]
    points, keys = [], []
    for a in range(d):
        for sa in (1, -1):
            t = theta.copy()
            t[free[a]] += sa * steps[a]
            points.append(t)
            keys.append((a, a, sa, sa))
    for a in range(d):
        for b in range(a + 1, d):
            for sa in (1, -1):
                for sb in (1, -1):
                    t = theta.copy()
                    t[free[a]] += sa * steps[a]
                    t[free[b]] += sb * steps[b]
                    points.append(t)
                    keys.append((a, b, sa, sb))
    values = dict(zip(keys, _map(lambda t: problem.evaluate(t, start)[0], points, ncores)))
    H = np.zeros((d, d))
    for a in range(d):
        H[a, a] = (values[(a, a, 1, 1)] - 2.0 * f0 + values[(a, a, -1, -1)]) / steps[a] ** 2
        for b in range(a + 1, d):
            H[a, b] = H[b, a] = (values[(a, b, 1, 1)] - values[(a, b, 1, -1)] - values[(a, b, -1, 1)]
                                 + values[(a, b, -1, -1)]) / (4.0 * steps[a] * steps[b])
    return H


def floored_inverse(H: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """Inverse of the symmetrized matrix with eigenvalues floored at ``floor``."""
    if H.size == 0:
        return H.copy()
    Hs = 0.5 * (H + H.T)
    lam, V = np.linalg.eigh(Hs)
    lam = np.maximum(lam, floor)
    cov = (V / lam) @ V.T
    return 0.5 * (cov + cov.T)


@dataclass
class FitResult:
    spec: ModelSpec
    labels: list[str]
    theta_hat: np.ndarray
    theta_cov: np.ndarray
    latent_mode: np.ndarray
    nll_at_mode: float
    convergence: dict
    prep_digest: str
    latent_chol: SparseCholesky | None = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return bool(self.convergence["converged"])

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.theta_cov), 0.0))

    def split_latent(self, prep: PreparedData):
        layout = ParamLayout(self.spec, prep.pixel_table.n_covariates, prep.n_polygons, prep.lattice.n_nodes)
        return self.latent_mode[layout.u], self.latent_mode[layout.w]

    # -- persistence -------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "spec": self.spec.to_dict(),
            "labels": list(self.labels),
            "theta_hat": [float(v) for v in self.theta_hat],
            "theta_cov": [[float(v) for v in row] for row in self.theta_cov],
            "nll_at_mode": float(self.nll_at_mode),
            "convergence": self.convergence,
            "prep_digest": self.prep_digest,
            "n_latent": int(self.latent_mode.size),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, directory) -> None:
        """Write ``fit.json`` and ``latent.bin`` (little-endian float64: u_hat then w_hat)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "fit.json").write_text(self.to_json())
        (directory / "latent.bin").write_bytes(struct.pack(f"<{self.latent_mode.size}d", *self.latent_mode))

    @classmethod
    def load(cls, directory, prep: PreparedData | None = None) -> "FitResult":
        directory = Path(directory)
        try:
            doc = json.loads((directory / "fit.json").read_text())
            raw = (directory / "latent.bin").read_bytes()
        except FileNotFoundError as exc:
            raise DataError(f"missing fit artifact: {exc.filename}") from None
        n = doc["n_latent"]
        if len(raw) != 8 * n:
            raise DataError(f"latent.bin holds {len(raw) // 8} values, fit.json expects {n}")
        fit = cls(
            spec=ModelSpec.from_dict(doc["spec"]),
            labels=doc["labels"],
            theta_hat=np.array(doc["theta_hat"], dtype=float),
            theta_cov=np.array(doc["theta_cov"], dtype=float).reshape(len(doc["labels"]), len(doc["labels"])),
            latent_mode=np.array(struct.unpack(f"<{n}d", raw), dtype=float),
            nll_at_mode=doc["nll_at_mode"],
            convergence=doc["convergence"],
            prep_digest=doc["prep_digest"],
        )
        if prep is not None:
            check_provenance(fit, prep)
        return fit


def check_provenance(fit: FitResult, prep: PreparedData) -> None:
    if fit.prep_digest != prep.digest():
        raise ValidationError("fit was produced from different prepared data (provenance hash mismatch)")


def _fallback_intercept(model: DisaggModel) -> float:
    """Intercept matching the pooled observed rate; used when theta0 is infeasible."""
    spec = model.spec
    total = float(np.sum(model.totals))
    if spec.family == "binomial":
        rate = float(np.sum(model.y) / np.sum(model.sizes))
    else:
        rate = float(np.sum(model.y)) / total if total > 0 else 1.0
    if spec.link == "log":
        rate = max(rate, 1e-8)
    elif spec.link == "logit":
        rate = min(max(rate, 1e-6), 1 - 1e-6)
    return float(apply_link(rate, spec.link))


def fit(prep: PreparedData, spec: ModelSpec, *, ncores: int = 1,
        callback: Callable[[int, np.ndarray, float, float], None] | None = None,
        theta0: np.ndarray | None = None) -> FitResult:
    """Fit the model by nested Laplace optimization.

    Non-convergence within ``spec.max_iterations`` outer iterations is
    reported through ``FitResult.convergence`` and a warning; the result is
    still returned.
    """
    problem = LaplaceProblem(prep, spec)
    model = problem.model
    layout = model.layout
    theta = model.theta0() if theta0 is None else np.array(theta0, dtype=float)
    free = [k for k, name in enumerate(layout.labels) if name not in spec.fixed]

    f = problem.objective(theta)
    if not math.isfinite(f):
        theta[0] = _fallback_intercept(model)
        f = problem.objective(theta)
        if not math.isfinite(f):
            raise NumericError("objective is not finite at the starting values")

    outer = 0
    converged = False
    if free:
        g = fd_gradient(problem, theta, free, problem.warm, ncores)
        Hinv = np.eye(len(free))
        first = True
        stalled = 0
        while True:
            gnorm = float(np.max(np.abs(g)))
            if callback is not None:
                callback(outer, theta.copy(), f, gnorm)
            if gnorm < OUTER_GTOL:
                converged = True
                break
            if outer >= spec.max_iterations:
                break
            p = -Hinv @ g
            if not float(g @ p) < 0:
                Hinv = np.eye(len(free))
                p = -g
            pmax = float(np.max(np.abs(p)))
            if pmax > MAX_OUTER_STEP:
                p *= MAX_OUTER_STEP / pmax
            slope = float(g @ p)
            alpha = 1.0
            base = problem.warm
            while True:
                trial = theta.copy()
                trial[free] += alpha * p
                f_new, res = problem.evaluate(trial, base)
                if res is not None and f_new <= f + ARMIJO_C * alpha * slope:
                    break
                alpha *= 0.5
                if alpha < 1e-10:
                    res = None
                    break
            if res is None:
                if first:
                    break
                # retry once along steepest descent before giving up
                Hinv = np.eye(len(free))
                first = True
                continue
            problem.warm = res.latent
            problem.inner_iterations += res.iterations
            g_new = fd_gradient(problem, trial, free, problem.warm, ncores)
            s = trial[free] - theta[free]
            yv = g_new - g
            sy = float(s @ yv)
            if sy > 1e-12:
                if first:
                    Hinv = np.eye(len(free)) * sy / float(yv @ yv)
                    first = False
                rho = 1.0 / sy
                I = np.eye(len(free))
                Hinv = (I - rho * np.outer(s, yv)) @ Hinv @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
            stalled = stalled + 1 if f - f_new <= 1e-13 * max(1.0, abs(f)) else 0
            theta, f, g = trial, f_new, g_new
            outer += 1
            if stalled >= STALL_ITERATIONS:
                # the objective no longer resolves the remaining gradient
                converged = float(np.max(np.abs(g))) < STALL_GTOL_FACTOR * OUTER_GTOL
                break
        grad_norm = float(np.max(np.abs(g)))
    else:
        grad_norm = 0.0
        converged = True

    value, res = problem.evaluate(theta, problem.warm)
    if res is None:
        raise NumericError("inner problem failed at the final hyperparameters")

    cov = np.zeros((layout.n_theta, layout.n_theta))
    if free:
        H = fd_hessian(problem, theta, free, res.latent, value, ncores)
        cov[np.ix_(free, free)] = floored_inverse(H)
        if converged:
            # one Newton step on the FD Hessian removes the residual BFGS error
            trial = theta.copy()
            trial[free] -= cov[np.ix_(free, free)] @ g
            t_value, t_res = problem.evaluate(trial, res.latent)
            if t_res is not None and t_value <= value:
                t_grad = fd_gradient(problem, trial, free, t_res.latent, ncores)
                if np.max(np.abs(t_grad)) <= grad_norm:
                    theta, value, res, grad_norm = trial, t_value, t_res, float(np.max(np.abs(t_grad)))

    convergence = {
        "converged": bool(converged),
        "outer_iterations": int(outer),
        "inner_iterations_total": int(problem.inner_iterations),
        "gradient_norm": grad_norm,
        "inner_converged": bool(res.converged),
    }
    if not converged:
        warnings.warn(
            f"outer optimization stopped after {outer} iteration(s) without converging "
            f"(gradient max-norm {grad_norm:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return FitResult(
        spec=spec,
        labels=list(layout.labels),
        theta_hat=theta,
        theta_cov=cov,
        latent_mode=res.latent,
        nll_at_mode=value,
        convergence=convergence,
        prep_digest=prep.digest(),
        latent_chol=res.factor,
    )


def summarize_fit(fit: FitResult, prep: PreparedData) -> str:
    from .predictor import in_sample_metrics

    layout_names = ["slope" if n.startswith("slope[") else n for n in fit.labels]
    lines = ["Model parameters:", f"{'':<18s}{'Estimate':>12s} {'Std. Error':>11s}"]
    for name, est, se in zip(layout_names, fit.theta_hat, fit.std_errors):
        lines.append(f"{name:<18s}{est:>12.7f} {se:>11.7f}")
    lines += ["", f"Slopes are listed in covariate order: {', '.join(prep.covariate_names)}"]
    lines += ["", f"Negative log likelihood:  {fit.nll_at_mode!r}", ""]
    m = in_sample_metrics(fit, prep)
    lines += [
        "In sample performance:",
        f"{'RMSE':>12s} {'MAE':>12s} {'pearson':>10s} {'spearman':>10s} {'log_pearson':>12s}",
        f"{m.rmse:>12.7g} {m.mae:>12.7g} {m.pearson:>10.7g} {m.spearman:>10.7g} {m.log_pearson:>12.7g}",
    ]
    if not fit.converged:
        lines += ["", "WARNING: the optimizer did not converge"]
    return "\n".join(lines)
