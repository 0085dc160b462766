"""Joint negative log posterior of the disaggregation model.

Pixel ``p`` of polygon ``i`` has linear predictor

    eta_p = beta0 + X_p beta + (A w)_p + u_i

and rate ``link^-1(eta_p)``. Rates are summed with aggregation weights into
polygon cases, ``cases_i = sum_p a_p rate_p``, and polygon rate
``cases_i / sum_p a_p``. The response is Poisson(cases), Normal(cases,
sigma * sqrt(sum a^2)) or Binomial(M, polygon rate).

Hyperparameters ``theta`` (intercept, slopes, log iid precision, field log
sigma / log range, Gaussian log precision) are optimized in the outer
problem; the latent effects ``(u, w)`` are integrated out by Laplace.

The Hessian in the latent effects is exact for the log and identity links.
Because the likelihood depends on ``eta`` only through polygon sums, it has
a diagonal pixel part plus one rank-one term per polygon. For the logit
link the diagonal part is dropped (Gauss-Newton), which keeps the matrix
positive semi-definite.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, gammaln, xlogy

from .errors import DataError, DimensionError, InternalError, ValidationError
from .prepare import PreparedData
from .spde import FieldHyper, SparseCholesky, SpdeStructure, projection_matrix

FAMILIES = ("poisson", "gaussian", "binomial")
LINKS = ("log", "logit", "identity")
DEFAULT_LINK = {"poisson": "log", "gaussian": "identity", "binomial": "logit"}
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    priormean_intercept: float = 0.0
    priorsd_intercept: float = 2.0
    priormean_slope: float = 0.0
    priorsd_slope: float = 0.4
    prior_rho_min: float = 3.0
    prior_rho_prob: float = 0.01
    prior_sigma_max: float = 1.0
    prior_sigma_prob: float = 0.01
    prior_iideffect_sd_max: float = 1.0
    prior_iideffect_sd_prob: float = 0.01
    gaussian_tau_shape: float = 1.0
    gaussian_tau_rate: float = 5e-5

    def __post_init__(self):
        for name in ("priorsd_intercept", "priorsd_slope", "prior_rho_min", "prior_sigma_max",
                     "prior_iideffect_sd_max", "gaussian_tau_shape", "gaussian_tau_rate"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"prior '{name}' must be positive, got {getattr(self, name)}")
        for name in ("prior_rho_prob", "prior_sigma_prob", "prior_iideffect_sd_prob"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"prior '{name}' must lie in (0, 1), got {getattr(self, name)}")

    @property
    def lambda_rho(self) -> float:
        """Rate making P(rho < rho_min) = rho_prob under pi(rho) = l rho^-2 exp(-l/rho)."""
        return -math.log(self.prior_rho_prob) * self.prior_rho_min

    @property
    def lambda_sigma(self) -> float:
        """Rate making P(sigma > sigma_max) = sigma_prob under an exponential prior."""
        return -math.log(self.prior_sigma_prob) / self.prior_sigma_max

    @property
    def lambda_iid(self) -> float:
        return -math.log(self.prior_iideffect_sd_prob) / self.prior_iideffect_sd_max


@dataclass(frozen=True)
class ModelSpec:
    """Model configuration.

    ``fixed`` maps hyperparameter labels (see :class:`ParamLayout`) to values
    that are held constant during fitting.
    """

    family: str = "poisson"
    link: str | None = None
    use_field: bool = True
    use_iid: bool = True
    priors: PriorSpec = field(default_factory=PriorSpec)
    max_iterations: int = 100
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family '{self.family}'; choose from {FAMILIES}")
        if self.link is None:
            object.__setattr__(self, "link", DEFAULT_LINK[self.family])
        if self.link not in LINKS:
            raise ValidationError(f"unknown link '{self.link}'; choose from {LINKS}")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed"] = dict(sorted(self.fixed.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["priors"] = PriorSpec(**d.get("priors", {}))
        return cls(**d)


class ParamLayout:
    """Positions of every parameter in the theta and latent vectors."""

    def __init__(self, spec: ModelSpec, n_covariates: int, n_polygons: int, n_nodes: int):
        self.n_covariates = n_covariates
        self.n_polygons = n_polygons
        self.n_nodes = n_nodes
        labels = ["intercept"] + [f"slope[{k + 1}]" for k in range(n_covariates)]
        if spec.use_iid:
            labels.append("iideffect_log_tau")
        if spec.use_field:
            labels += ["log_sigma", "log_rho"]
        if spec.family == "gaussian":
            labels.append("log_tau_obs")
        self.labels = labels
        self.position = {name: k for k, name in enumerate(labels)}
        self.slopes = slice(1, 1 + n_covariates)
        self.u = slice(0, n_polygons) if spec.use_iid else slice(0, 0)
        w0 = self.u.stop
        self.w = slice(w0, w0 + n_nodes) if spec.use_field else slice(w0, w0)
        self.n_theta = len(labels)
        self.n_latent = self.w.stop
        for name in spec.fixed:
            if name not in self.position:
                raise ValidationError(f"cannot fix unknown parameter '{name}'; known: {labels}")

    @property
    def display_names(self) -> list[str]:
        """Row names in the style of the summary table ('slope' repeated)."""
        return ["slope" if n.startswith("slope[") else n for n in self.labels]

    def get(self, theta: np.ndarray, name: str, default: float = 0.0) -> float:
        k = self.position.get(name)
        return default if k is None else float(theta[k])


@dataclass
class ParamVector:
    theta: np.ndarray
    latent: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.latent = np.asarray(self.latent, dtype=float)
        if self.theta.size != self.layout.n_theta or self.latent.size != self.layout.n_latent:
            raise DimensionError(
                f"expected {self.layout.n_theta} hyperparameters and {self.layout.n_latent} latent values, "
                f"got {self.theta.size} and {self.latent.size}"
            )

    @property
    def intercept(self) -> float:
        return float(self.theta[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.theta[self.layout.slopes]

    @property
    def u(self) -> np.ndarray:
        return self.latent[self.layout.u]

    @property
    def w(self) -> np.ndarray:
        return self.latent[self.layout.w]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.theta, self.latent])


@dataclass
class Posterior:
    value: float
    grad_latent: np.ndarray
    hessian_latent: sp.csr_matrix


# --------------------------------------------------------------------------- #
# Elementwise pieces
# --------------------------------------------------------------------------- #


def apply_link_inverse(eta, link: str) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if link == "log":
        with np.errstate(over="ignore"):
            return np.exp(eta)
    if link == "logit":
        return expit(eta)
    if link == "identity":
        return eta.copy()
    raise ValidationError(f"unknown link '{link}'")


def link_derivatives(eta: np.ndarray, link: str):
    """Rate and its first two derivatives with respect to eta."""
    rate = apply_link_inverse(eta, link)
    if link == "log":
        return rate, rate, rate
    if link == "logit":
        d1 = rate * (1.0 - rate)
        return rate, d1, d1 * (1.0 - 2.0 * rate)
    ones = np.ones_like(rate)
    return rate, ones, np.zeros_like(rate)


def apply_link(rate, link: str) -> np.ndarray:
    rate = np.asarray(rate, dtype=float)
    if link == "log":
        return np.log(rate)
    if link == "logit":
        return np.log(rate) - np.log1p(-rate)
    return rate.copy()


def aggregate(rate, prep: PreparedData):
    """Polygon cases (weighted sums) and polygon rates (weighted means).

    A polygon whose weights sum to zero gets rate 0.
    """
    a = prep.pixel_table.aggregation
    starts = prep.index.starts
    cases = np.add.reduceat(a * np.asarray(rate, dtype=float), starts)
    total = np.add.reduceat(a, starts)
    with np.errstate(divide="ignore", invalid="ignore"):
        polygon_rate = np.where(total > 0, cases / np.where(total > 0, total, 1.0), 0.0)
    return cases, polygon_rate


def gaussian_dispersion(sigma: float, prep: PreparedData) -> np.ndarray:
    """Polygon-level SD ``sigma * sqrt(sum_j a_ij^2)``."""
    a = prep.pixel_table.aggregation
    return sigma * np.sqrt(np.add.reduceat(a * a, prep.index.starts))


def _normal_nll(x, mean, sd):
    return 0.5 * LOG_2PI + np.log(sd) + 0.5 * ((x - mean) / sd) ** 2


def family_terms(family: str, y, cases, polygon_rate, *, sd=None, totals=None, sizes=None):
    """Per-polygon negative log-likelihood and its derivatives in ``cases``.

    Invalid arguments (non-positive Poisson mean with a positive count, a
    binomial rate outside [0, 1]) give an infinite NLL rather than an error.
    """
    y = np.asarray(y, dtype=float)
    c = np.asarray(cases, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if family == "poisson":
            nll = c - xlogy(y, c) + gammaln(y + 1.0)
            bad = (c < 0) | ((c == 0) & (y > 0)) | ~np.isfinite(c)
            d1 = 1.0 - y / c
            d2 = y / (c * c)
            d1 = np.where(c == 0, 1.0, d1)
            d2 = np.where(c == 0, 0.0, d2)
        elif family == "gaussian":
            sd = np.asarray(sd, dtype=float)
            nll = _normal_nll(y, c, sd)
            bad = ~(sd > 0) | ~np.isfinite(c)
            d1 = (c - y) / sd ** 2
            d2 = 1.0 / sd ** 2
        elif family == "binomial":
            r = np.asarray(polygon_rate, dtype=float)
            M = np.asarray(sizes, dtype=float)
            T = np.asarray(totals, dtype=float)
            nll = -(gammaln(M + 1) - gammaln(y + 1) - gammaln(M - y + 1) + xlogy(y, r) + xlogy(M - y, 1 - r))
            bad = (r < 0) | (r > 1) | ((r == 0) & (y > 0)) | ((r == 1) & (M - y > 0)) | ~np.isfinite(r)
            dr = -y / r + (M - y) / (1 - r)
            d2r = y / r ** 2 + (M - y) / (1 - r) ** 2
            dr = np.where(y == 0, M / (1 - r), np.where(y == M, -y / r, dr))
            d2r = np.where(y == 0, M / (1 - r) ** 2, np.where(y == M, y / r ** 2, d2r))
            safe_T = np.where(T > 0, T, 1.0)
            d1 = np.where(T > 0, dr / safe_T, 0.0)
            d2 = np.where(T > 0, d2r / safe_T ** 2, 0.0)
        else:
            raise ValidationError(f"unknown family '{family}'")
    nll = np.where(bad, np.inf, nll)
    d1 = np.where(bad, np.nan, d1)
    d2 = np.where(bad, np.nan, d2)
    return nll, d1, d2


def family_nll(family: str, y: np.ndarray, cases: np.ndarray, polygon_rate: np.ndarray, *, sd=None,
               sizes=None) -> float:
    """Total negative log-likelihood only; a lean path for samplers.

    Agrees with ``family_terms(...)[0].sum()`` including the infinite cases.
    """
    if family == "poisson":
        if cases.min() < 0 or np.any((cases == 0) & (y > 0)):
            return math.inf
        total = float(np.sum(cases - xlogy(y, cases) + gammaln(y + 1.0)))
    elif family == "gaussian":
        if not sd.min() > 0:
            return math.inf
        total = float(np.sum(_normal_nll(y, cases, sd)))
    elif family == "binomial":
        r = polygon_rate
        if r.min() < 0 or r.max() > 1 or np.any((r == 0) & (y > 0)) or np.any((r == 1) & (sizes > y)):
            return math.inf
        total = float(-np.sum(gammaln(sizes + 1) - gammaln(y + 1) - gammaln(sizes - y + 1)
                              + xlogy(y, r) + xlogy(sizes - y, 1 - r)))
    else:
        raise ValidationError(f"unknown family '{family}'")
    return total if math.isfinite(total) else math.inf


# --------------------------------------------------------------------------- #
# Precomputed evaluator
# --------------------------------------------------------------------------- #


@dataclass
class HyperState:
    """Quantities that depend on theta only; reused across latent updates."""

    theta: np.ndarray
    beta0: float
    beta: np.ndarray
    tau_u: float
    log_tau_u: float
    Q: sp.csr_matrix | None
    Q_logdet: float
    sd: np.ndarray | None
    hyper_nlp: float


class DisaggModel:
    """Evaluator of the joint negative log posterior on a fixed dataset."""

    def __init__(self, prep: PreparedData, spec: ModelSpec):
        self.prep = prep
        self.spec = spec
        t = prep.pixel_table
        self.layout = ParamLayout(spec, t.n_covariates, prep.n_polygons, prep.lattice.n_nodes)
        self.X = t.covariates
        self.a = t.aggregation
        self.pidx = t.polygon_index
        self.starts = prep.index.starts
        self.y = np.asarray(prep.responses, dtype=float)
        self.totals = prep.aggregation_totals()
        self.sum_a2 = np.add.reduceat(self.a * self.a, self.starts)
        self.sizes = None
        if spec.family == "binomial":
            if prep.sample_sizes is None:
                raise DataError("the binomial family needs sample sizes for every polygon")
            self.sizes = np.asarray(prep.sample_sizes, dtype=float)
            if np.any(self.y > self.sizes) or np.any(self.y < 0):
                raise DataError("binomial responses must lie between 0 and the sample size")

        n_pix = t.n_pixels
        blocks = []
        if spec.use_iid:
            blocks.append(sp.csr_matrix((np.ones(n_pix), (np.arange(n_pix), self.pidx)),
                                        shape=(n_pix, prep.n_polygons)))
        self.A = None
        self.spde = None
        if spec.use_field:
            self.A = projection_matrix(prep.lattice, t.x, t.y)
            self.spde = SpdeStructure.build(prep.lattice)
            blocks.append(self.A)
        self.B = sp.hstack(blocks, format="csr") if blocks else sp.csr_matrix((n_pix, 0))
        self.BT = self.B.T.tocsr()

    # -- hyperparameters ---------------------------------------------------

    def theta0(self) -> np.ndarray:
        """Default starting point of the outer optimization."""
        pr = self.spec.priors
        L = self.layout
        theta = np.zeros(L.n_theta)
        theta[0] = pr.priormean_intercept
        theta[L.slopes] = pr.priormean_slope
        if "log_sigma" in L.position:
            theta[L.position["log_sigma"]] = -1.0
            theta[L.position["log_rho"]] = math.log(0.25 * max(self.prep.lattice.diagonal, self.prep.lattice.spacing))
        for name, value in self.spec.fixed.items():
            theta[L.position[name]] = value
        return theta

    def hyper_nlp(self, theta: np.ndarray) -> float:
        """Negative log prior of the hyperparameters (Jacobians included)."""
        L = self.layout
        pr = self.spec.priors
        nlp = float(_normal_nll(float(theta[0]), pr.priormean_intercept, pr.priorsd_intercept))
        nlp += float(np.sum(_normal_nll(theta[L.slopes], pr.priormean_slope, pr.priorsd_slope)))
        if self.spec.use_iid:
            nlp += pc_iid_nll(L.get(theta, "iideffect_log_tau"), pr)
        if self.spec.use_field:
            nlp += pc_field_nll(L.get(theta, "log_sigma"), L.get(theta, "log_rho"), pr)
        if self.spec.family == "gaussian":
            nlp += log_gamma_nll(L.get(theta, "log_tau_obs"), pr.gaussian_tau_shape, pr.gaussian_tau_rate)
        return nlp

    def field_hyper(self, theta: np.ndarray) -> FieldHyper:
        return FieldHyper(self.layout.get(theta, "log_sigma"), self.layout.get(theta, "log_rho"))

    def gaussian_sd(self, theta: np.ndarray) -> np.ndarray | None:
        if self.spec.family != "gaussian":
            return None
        return math.exp(-0.5 * self.layout.get(theta, "log_tau_obs")) * np.sqrt(self.sum_a2)

    def hyper_state(self, theta: np.ndarray, factor: bool = True) -> HyperState:
        theta = np.asarray(theta, dtype=float)
        L = self.layout
        log_tau_u = L.get(theta, "iideffect_log_tau")
        tau_u = math.exp(log_tau_u) if self.spec.use_iid else 0.0
        Q, Q_logdet = None, 0.0
        if self.spec.use_field:
            Q = self.spde.precision(self.field_hyper(theta))
            if factor:
                Q_logdet = SparseCholesky(Q).logdet()
        return HyperState(theta, float(theta[0]), theta[L.slopes], tau_u, log_tau_u, Q, Q_logdet,
                          self.gaussian_sd(theta), self.hyper_nlp(theta))

    # -- pieces ------------------------------------------------------------

    def eta(self, hs: HyperState, latent: np.ndarray) -> np.ndarray:
        eta = hs.beta0 + self.X @ hs.beta
        if self.B.shape[1]:
            eta = eta + self.B @ latent
        return eta

    def latent_prior(self, hs: HyperState, latent: np.ndarray):
        """NLL of the latent effects under their Gaussian priors, with gradient."""
        L = self.layout
        value = 0.0
        grad = np.zeros(L.n_latent)
        if self.spec.use_iid:
            u = latent[L.u]
            n = u.size
            value += 0.5 * n * LOG_2PI - 0.5 * n * hs.log_tau_u + 0.5 * hs.tau_u * float(u @ u)
            grad[L.u] = hs.tau_u * u
        if self.spec.use_field:
            w = latent[L.w]
            Qw = hs.Q @ w
            value += 0.5 * w.size * LOG_2PI - 0.5 * hs.Q_logdet + 0.5 * float(w @ Qw)
            grad[L.w] = Qw
        return value, grad

    def prior_hessian(self, hs: HyperState) -> sp.csr_matrix:
        blocks = []
        if self.spec.use_iid:
            blocks.append(sp.identity(self.layout.n_polygons, format="csr") * hs.tau_u)
        if self.spec.use_field:
            blocks.append(hs.Q)
        if not blocks:
            return sp.csr_matrix((0, 0))
        return sp.block_diag(blocks, format="csr")

    def evaluate(self, hs: HyperState, latent: np.ndarray, order: int = 0, gauss_newton: bool | None = None):
        """Joint NLL at ``(theta, latent)``; with gradient (order >= 1) and Hessian (order 2).

        Returns ``(value, grad, hess)`` with unused entries set to None.
        """
        latent = np.asarray(latent, dtype=float)
        eta = self.eta(hs, latent)
        rate, g1, g2 = link_derivatives(eta, self.spec.link)
        cases = np.add.reduceat(self.a * rate, self.starts)
        with np.errstate(divide="ignore", invalid="ignore"):
            prate = np.where(self.totals > 0, cases / np.where(self.totals > 0, self.totals, 1.0), 0.0)
        nll, d1, d2 = family_terms(self.spec.family, self.y, cases, prate, sd=hs.sd, totals=self.totals,
                                   sizes=self.sizes)
        prior_value, prior_grad = self.latent_prior(hs, latent)
        value = float(np.sum(nll)) + hs.hyper_nlp + prior_value
        if order == 0 or not np.isfinite(value):
            return value, None, None

        v = self.a * g1
        s = d1[self.pidx] * v
        grad = self.BT @ s + prior_grad
        if order == 1:
            return value, grad, None

        if gauss_newton is None:
            gauss_newton = self.spec.link == "logit"
        n_pix = self.X.shape[0]
        J = sp.csr_matrix((v, (self.pidx, np.arange(n_pix))), shape=(self.layout.n_polygons, n_pix))
        K = (J @ self.B).tocsr()
        H = K.T @ sp.diags(d2) @ K
        if not gauss_newton:
            dpix = d1[self.pidx] * self.a * g2
            H = H + self.BT @ sp.diags(dpix) @ self.B
        H = H + self.prior_hessian(hs)
        # sparse products leave roundoff-level asymmetry
        H = (0.5 * (H + H.T)).tocsr()
        return value, grad, H

    def polygon_predictions(self, hs: HyperState, latent: np.ndarray):
        rate = apply_link_inverse(self.eta(hs, latent), self.spec.link)
        return aggregate(rate, self.prep)


# --------------------------------------------------------------------------- #
# Prior densities
# --------------------------------------------------------------------------- #


def pc_field_nll(log_sigma: float, log_rho: float, priors: PriorSpec) -> float:
    """Joint PC prior on (log sigma, log rho), Jacobian included."""
    lr, ls = priors.lambda_rho, priors.lambda_sigma
    return (-math.log(lr) - math.log(ls) + log_rho + lr * math.exp(-log_rho)
            + ls * math.exp(log_sigma) - log_sigma)


def pc_iid_nll(log_tau: float, priors: PriorSpec) -> float:
    """Exponential PC prior on sigma_u = exp(-log_tau / 2), in log_tau."""
    lam = priors.lambda_iid
    return -math.log(lam) + lam * math.exp(-0.5 * log_tau) + math.log(2.0) + 0.5 * log_tau


def log_gamma_nll(log_tau: float, shape: float, rate: float) -> float:
    """NLL of log(tau) when tau ~ Gamma(shape, rate)."""
    return -shape * math.log(rate) + math.lgamma(shape) - shape * log_tau + rate * math.exp(log_tau)


# --------------------------------------------------------------------------- #
# Functional interface
# --------------------------------------------------------------------------- #


def linear_predictor(params: ParamVector, prep: PreparedData, A=None) -> np.ndarray:
    """Pixel linear predictor ``beta0 + X beta + A w + u[polygon]``."""
    L = params.layout
    eta = params.intercept + prep.pixel_table.covariates @ params.slopes
    if L.w.stop > L.w.start:
        if A is None:
            t = prep.pixel_table
            A = projection_matrix(prep.lattice, t.x, t.y)
        eta = eta + A @ params.w
    if L.u.stop > L.u.start:
        eta = eta + params.u[prep.pixel_table.polygon_index]
    return eta


def neg_log_likelihood(cases, polygon_rate, prep: PreparedData, spec: ModelSpec, params: ParamVector) -> float:
    sd = None
    if spec.family == "gaussian":
        sigma = math.exp(-0.5 * params.layout.get(params.theta, "log_tau_obs"))
        sd = gaussian_dispersion(sigma, prep)
    sizes = prep.sample_sizes
    if spec.family == "binomial" and sizes is None:
        raise DataError("the binomial family needs sample sizes for every polygon")
    nll, _, _ = family_terms(spec.family, prep.responses, cases, polygon_rate, sd=sd,
                             totals=prep.aggregation_totals(), sizes=sizes)
    return float(np.sum(nll))


def neg_log_prior(params: ParamVector, spec: ModelSpec, prep: PreparedData, Q=None) -> float:
    """Hyperpriors plus the Gaussian priors of the latent effects."""
    model = DisaggModel(prep, spec)
    hs = model.hyper_state(params.theta)
    if Q is not None and spec.use_field:
        hs = replace(hs, Q=Q, Q_logdet=SparseCholesky(Q).logdet())
    value, _ = model.latent_prior(hs, params.latent)
    return hs.hyper_nlp + value


def joint_neg_log_posterior(params: ParamVector, prep: PreparedData, spec: ModelSpec) -> Posterior:
    model = DisaggModel(prep, spec)
    if params.layout.n_latent != model.layout.n_latent or params.layout.n_theta != model.layout.n_theta:
        raise InternalError("parameter layout does not match the prepared data")
    hs = model.hyper_state(params.theta)
    value, grad, H = model.evaluate(hs, params.latent, order=2)
    if grad is None:
        grad = np.full(model.layout.n_latent, np.nan)
        H = sp.csr_matrix((model.layout.n_latent, model.layout.n_latent))
    return Posterior(value, grad, H)
