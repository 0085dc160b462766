"""Pixel-level predictions, posterior draws and in-sample metrics."""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import NODATA, DataError, NumericError, ValidationError
from .geoio import CovariateStack, Grid, write_ascii_grid
from .laplace import FitResult, LaplaceProblem, check_provenance
from .model import DisaggModel, ParamLayout, apply_link_inverse
from .prepare import PreparedData, transform_covariates
from .spde import projection_matrix

DEFAULT_N_DRAWS = 100
DEFAULT_CI = 0.95
LOG_EPS = 1e-8


@dataclass
class PredictionSet:
    """Mean prediction rasters, plus draws and credible bounds when requested."""

    rate: Grid
    field_component: Grid
    covariate_component: Grid
    iid_component: Grid | None = None
    draws: list[Grid] = field(default_factory=list)
    ci_lower: Grid | None = None
    ci_upper: Grid | None = None
    ci: float | None = None

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_ascii_grid(self.rate, directory / "rate.asc")
        write_ascii_grid(self.field_component, directory / "field.asc")
        write_ascii_grid(self.covariate_component, directory / "covariates.asc")
        if self.iid_component is not None:
            write_ascii_grid(self.iid_component, directory / "iid.asc")
        if self.ci_lower is not None:
            write_ascii_grid(self.ci_lower, directory / "ci_lower.asc")
            write_ascii_grid(self.ci_upper, directory / "ci_upper.asc")
        if self.draws:
            (directory / "draws").mkdir(exist_ok=True)
            for s, grid in enumerate(self.draws):
                write_ascii_grid(grid, directory / "draws" / f"draw_{s:04d}.asc")


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    pearson: float
    spearman: float
    log_pearson: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- #
# Prediction design
# --------------------------------------------------------------------------- #


@dataclass
class _Design:
    """Everything about the prediction cells that does not depend on parameters."""

    template: Grid
    valid: np.ndarray  # flat mask of cells with all covariates present
    X: np.ndarray  # transformed covariates of valid cells
    A: object  # projection of valid cells onto the lattice (or None)
    polygon: np.ndarray  # training polygon of each valid cell, -1 if none


def _select_stack(prep: PreparedData, newdata: CovariateStack | None) -> CovariateStack:
    stack = prep.stack if newdata is None else newdata
    if stack is None:
        raise DataError("no covariate rasters available; pass newdata")
    unknown = [n for n in stack.names if n not in prep.covariate_names]
    if unknown:
        raise DataError(f"newdata has covariates not used in the fit: {unknown}")
    missing = [n for n in prep.covariate_names if n not in stack.names]
    if missing:
        raise DataError(f"newdata lacks covariates used in the fit: {missing}")
    return stack.subset(prep.covariate_names)


def _training_polygon(prep: PreparedData, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Training polygon whose pixel center coincides with (x, y), else -1."""
    t = prep.pixel_table
    cs = prep.template_header.get("cellsize", prep.lattice.spacing)
    scale = 1e6 / cs

    def key(a, b):
        return zip(np.round(a * scale).astype(np.int64).tolist(), np.round(b * scale).astype(np.int64).tolist())

    lookup = dict(zip(key(t.x, t.y), t.polygon_index.tolist()))
    return np.array([lookup.get(k, -1) for k in key(x, y)], dtype=np.int64)


def _design(fit: FitResult, prep: PreparedData, newdata: CovariateStack | None) -> _Design:
    stack = _select_stack(prep, newdata)
    template = stack.template
    X_all = stack.matrix()
    valid = np.all(np.isfinite(X_all), axis=1)
    X = transform_covariates(prep, X_all[valid])
    cx, cy = template.cell_centers()
    cx, cy = cx.ravel()[valid], cy.ravel()[valid]
    A = projection_matrix(prep.lattice, cx, cy, outside="zero") if fit.spec.use_field else None
    return _Design(template, valid, X, A, _training_polygon(prep, cx, cy))


def _layout(fit: FitResult, prep: PreparedData) -> ParamLayout:
    return ParamLayout(fit.spec, prep.pixel_table.n_covariates, prep.n_polygons, prep.lattice.n_nodes)


def _components(design: _Design, layout: ParamLayout, theta, latent, predict_iid: bool):
    cov = design.X @ np.asarray(theta)[layout.slopes]
    fld = design.A @ latent[layout.w] if design.A is not None else np.zeros_like(cov)
    iid = None
    if predict_iid:
        iid = np.zeros_like(cov)
        if layout.u.stop > layout.u.start:
            inside = design.polygon >= 0
            iid[inside] = latent[layout.u][design.polygon[inside]]
    return cov, fld, iid


def _to_grid(design: _Design, values: np.ndarray) -> Grid:
    t = design.template
    out = np.full(t.ncols * t.nrows, NODATA)
    out[design.valid] = values
    return Grid(t.ncols, t.nrows, t.xll, t.yll, t.cellsize, out.reshape(t.nrows, t.ncols), NODATA)


def _rate(fit: FitResult, design: _Design, layout, theta, latent, predict_iid):
    cov, fld, iid = _components(design, layout, theta, latent, predict_iid)
    eta = float(theta[0]) + cov + fld + (iid if iid is not None else 0.0)
    return apply_link_inverse(eta, fit.spec.link), cov, fld, iid


# --------------------------------------------------------------------------- #
# Public API
# --------------------------------------------------------------------------- #


def predict_mean(fit: FitResult, prep: PreparedData, newdata: CovariateStack | None = None,
                 predict_iid: bool = False) -> PredictionSet:
    """Rate at the posterior mode and its additive components.

    The intercept is part of the rate but of no component. Cells outside every
    training polygon get no iid contribution.
    """
    check_provenance(fit, prep)
    return _mean_set(fit, _design(fit, prep, newdata), _layout(fit, prep), predict_iid)


def _mean_set(fit: FitResult, design: _Design, layout: ParamLayout, predict_iid: bool) -> PredictionSet:
    rate, cov, fld, iid = _rate(fit, design, layout, fit.theta_hat, fit.latent_mode, predict_iid)
    return PredictionSet(
        rate=_to_grid(design, rate),
        field_component=_to_grid(design, fld),
        covariate_component=_to_grid(design, cov),
        iid_component=None if iid is None else _to_grid(design, iid),
    )


def theta_sampler(theta_hat: np.ndarray, theta_cov: np.ndarray):
    """Factor ``theta_cov`` for sampling; negative eigenvalues are floored at 0 with a warning."""
    cov = 0.5 * (theta_cov + theta_cov.T)
    lam, V = np.linalg.eigh(cov)
    if np.any(lam < -1e-12 * max(1.0, float(np.max(np.abs(lam))))):
        warnings.warn("theta covariance is not positive semi-definite; negative eigenvalues floored",
                      RuntimeWarning, stacklevel=3)
    root = V * np.sqrt(np.maximum(lam, 0.0))

    def draw(rng: np.random.Generator) -> np.ndarray:
        return theta_hat + root @ rng.standard_normal(theta_hat.size)

    return draw


def predict_uncertainty(fit: FitResult, prep: PreparedData, newdata: CovariateStack | None = None,
                        predict_iid: bool = False, n_draws: int = DEFAULT_N_DRAWS, ci: float = DEFAULT_CI,
                        seed: int = 0, ncores: int = 1) -> PredictionSet:
    """Posterior draws of the rate raster and cellwise credible bounds.

    Each draw takes theta from Normal(theta_hat, theta_cov), re-optimizes the
    latent mode at that theta (warm-started at the fitted mode) and draws the
    latent effects from the Gaussian approximation there. Draw ``s`` uses its
    own random substream, so results do not depend on ``ncores``.

    Raises:
        ValidationError: ``n_draws < 2`` or ``ci`` outside (0, 1).
        NumericError: the inner problem fails at a sampled theta.
    """
    if n_draws < 2:
        raise ValidationError("n_draws must be at least 2")
    if not 0.0 < ci < 1.0:
        raise ValidationError("ci must lie in (0, 1)")
    check_provenance(fit, prep)
    design = _design(fit, prep, newdata)
    layout = _layout(fit, prep)
    mean = _mean_set(fit, design, layout, predict_iid)
    problem = LaplaceProblem(prep, fit.spec)
    draw_theta = theta_sampler(fit.theta_hat, fit.theta_cov)
    streams = np.random.SeedSequence(seed).spawn(n_draws)

    def one(ss):
        rng = np.random.default_rng(ss)
        theta = draw_theta(rng)
        res = problem.inner(theta, fit.latent_mode)
        if not res.converged:
            warnings.warn("inner optimization did not converge for a posterior draw", RuntimeWarning,
                          stacklevel=2)
        latent = res.latent + res.factor.sample(rng.standard_normal(res.latent.size))
        return _rate(fit, design, layout, theta, latent, predict_iid)[0]

    if ncores > 1:
        with ThreadPoolExecutor(max_workers=ncores) as pool:
            rates = list(pool.map(one, streams))
    else:
        rates = [one(ss) for ss in streams]
    rates = np.array(rates)
    if not np.all(np.isfinite(rates)):
        raise NumericError("posterior draws produced non-finite rates")
    lo, hi = np.quantile(rates, [(1.0 - ci) / 2.0, 1.0 - (1.0 - ci) / 2.0], axis=0, method="linear")
    mean.draws = [_to_grid(design, r) for r in rates]
    mean.ci_lower = _to_grid(design, lo)
    mean.ci_upper = _to_grid(design, hi)
    mean.ci = ci
    return mean


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2 or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return NODATA
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return NODATA
    return float(np.clip(float(da @ db) / denom, -1.0, 1.0))


def compute_metrics(predicted, observed) -> MetricsReport:
    """Error and correlation summaries of predicted vs observed polygon rates.

    Correlations that are undefined (a constant vector) are reported as the
    nodata sentinel.
    """
    p = np.asarray(predicted, dtype=float)
    o = np.asarray(observed, dtype=float)
    if p.shape != o.shape or p.ndim != 1 or p.size == 0:
        raise ValidationError("predicted and observed must be non-empty vectors of equal length")
    err = p - o
    with np.errstate(divide="ignore", invalid="ignore"):
        lp, lo = np.log(p + LOG_EPS), np.log(o + LOG_EPS)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(err * err))),
        mae=float(np.mean(np.abs(err))),
        pearson=_pearson(p, o),
        spearman=_pearson(rankdata(p), rankdata(o)),
        log_pearson=_pearson(lp, lo),
    )


def observed_rates(prep: PreparedData, family: str) -> np.ndarray:
    """Observed polygon rates: y over summed weights, or y over trials for binomial data."""
    y = np.asarray(prep.responses, dtype=float)
    denom = prep.sample_sizes if family == "binomial" else prep.aggregation_totals()
    denom = np.asarray(denom, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, y / np.where(denom > 0, denom, 1.0), 0.0)


def fitted_polygon_rates(fit: FitResult, prep: PreparedData) -> np.ndarray:
    model = DisaggModel(prep, fit.spec)
    hs = model.hyper_state(fit.theta_hat, factor=False)
    return model.polygon_predictions(hs, fit.latent_mode)[1]


def in_sample_metrics(fit: FitResult, prep: PreparedData) -> MetricsReport:
    return compute_metrics(fitted_polygon_rates(fit, prep), observed_rates(prep, fit.spec.family))


def write_metrics(report: MetricsReport, path) -> None:
    Path(path).write_text(report.to_json())
