"""Synthetic disaggregation datasets with known parameters."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .geoio import CovariateStack, Grid, Polygon, PolygonSet, save_covariate_dir, write_ascii_grid, write_polygons
from .model import DEFAULT_LINK, FAMILIES, apply_link_inverse
from .prepare import LatticeSpec
from .spde import FieldHyper, SparseCholesky, SpdeStructure, projection_matrix


@dataclass(frozen=True)
class SimulationConfig:
    grid_ncols: int = 40
    grid_nrows: int = 40
    cellsize: float = 1.0
    n_polygons: int = 25
    n_covariates: int = 2
    true_beta0: float = -2.0
    true_beta: tuple = (0.5, -0.3)
    true_sigma: float = 0.5
    true_rho: float = 8.0
    true_sigma_u: float = 0.2
    family: str = "poisson"
    link: str | None = None
    aggregation_mode: str = "lognormal"
    aggregation_mu: float = math.log(100.0)
    aggregation_sigma: float = 0.5
    covariate_smoothing: float = 3.0
    sample_size: float = 100.0
    obs_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.grid_ncols < 1 or self.grid_nrows < 1 or not self.cellsize > 0:
            raise ValidationError("grid dimensions and cellsize must be positive")
        if not 1 <= self.n_polygons <= self.grid_ncols * self.grid_nrows:
            raise ValidationError("n_polygons must be between 1 and the number of pixels")
        if len(self.true_beta) != self.n_covariates:
            raise ValidationError(f"true_beta has {len(self.true_beta)} entries for {self.n_covariates} covariates")
        for name in ("true_sigma", "true_rho", "true_sigma_u"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family '{self.family}'")
        if self.aggregation_mode not in ("uniform", "lognormal"):
            raise ValidationError("aggregation_mode must be 'uniform' or 'lognormal'")
        if self.link is None:
            object.__setattr__(self, "link", DEFAULT_LINK[self.family])
        object.__setattr__(self, "true_beta", tuple(float(b) for b in self.true_beta))


@dataclass
class SimulatedData:
    polygons: PolygonSet
    stack: CovariateStack
    aggregation: Grid
    truth: dict = field(default_factory=dict)

    def save(self, directory, id_var: str = "id", response_var: str = "response") -> None:
        """Write ``polygons.geojson``, ``covariates/``, ``aggregation.asc`` and ``truth.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_polygons(self.polygons, directory / "polygons.geojson", id_var, response_var)
        save_covariate_dir(self.stack, directory / "covariates")
        write_ascii_grid(self.aggregation, directory / "aggregation.asc")
        (directory / "truth.json").write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n")


def pixel_set_rings(mask: np.ndarray, xll: float, yll: float, cellsize: float) -> list[np.ndarray]:
    """Closed boundary rings of the union of the ``True`` cells of ``mask``.

    Rings follow cell edges, so every cell center is strictly inside or
    outside. Outer boundaries run counter-clockwise, holes clockwise.
    """
    nrows, ncols = mask.shape
    padded = np.pad(mask, 1)
    edges: dict[tuple, list[tuple]] = {}

    def add(p, q):
        edges.setdefault(p, []).append(q)

    rows, cols = np.nonzero(mask)
    for r, c in zip(rows, cols):
        j = nrows - 1 - r  # integer y of the cell's lower edge
        pr, pc = r + 1, c + 1
        if not padded[pr + 1, pc]:
            add((c, j), (c + 1, j))
        if not padded[pr, pc + 1]:
            add((c + 1, j), (c + 1, j + 1))
        if not padded[pr - 1, pc]:
            add((c + 1, j + 1), (c, j + 1))
        if not padded[pr, pc - 1]:
            add((c, j + 1), (c, j))

    rings = []
    while edges:
        start = min(edges)
        ring = [start]
        cur = start
        while True:
            nxt = edges[cur].pop()
            if not edges[cur]:
                del edges[cur]
            ring.append(nxt)
            cur = nxt
            if cur == start:
                break
        rings.append(_simplify(ring))
    return [np.array([(xll + i * cellsize, yll + j * cellsize) for i, j in ring], dtype=float) for ring in rings]


def _simplify(ring):
    """Drop vertices lying on a straight run; keeps the ring closed."""
    pts = ring[:-1]
    n = len(pts)
    keep = []
    for k in range(n):
        a, b, c = pts[k - 1], pts[k], pts[(k + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            keep.append(b)
    return keep + [keep[0]]


def voronoi_labels(ncols: int, nrows: int, n_polygons: int, rng: np.random.Generator) -> np.ndarray:
    """Nearest-seed labels for every cell; seeds are distinct random cells."""
    seeds = rng.choice(ncols * nrows, size=n_polygons, replace=False)
    sr, sc = np.divmod(seeds, ncols)
    rr, cc = np.divmod(np.arange(ncols * nrows), ncols)
    d2 = (rr[:, None] - sr[None, :]) ** 2 + (cc[:, None] - sc[None, :]) ** 2
    return np.argmin(d2, axis=1).reshape(nrows, ncols)


def simulate_field(ncols, nrows, cellsize, sigma, rho, rng, pad=None):
    """Exact GMRF draw at pixel centers (row-major, north first)."""
    pad = int(math.ceil(rho / cellsize)) if pad is None else pad
    lattice = LatticeSpec(ncols + 2 * pad, nrows + 2 * pad, 0.5 * cellsize - pad * cellsize,
                          0.5 * cellsize - pad * cellsize, cellsize, pad)
    Q = SpdeStructure.build(lattice).precision(FieldHyper(math.log(sigma), math.log(rho)))
    w = SparseCholesky(Q).sample(rng.standard_normal(lattice.n_nodes))
    rows, cols = np.divmod(np.arange(ncols * nrows), ncols)
    x = (cols + 0.5) * cellsize
    y = (nrows - 1 - rows + 0.5) * cellsize
    return projection_matrix(lattice, x, y) @ w


def draw_response(family: str, cases, polygon_rate, rng, *, sizes=None, sd=None) -> np.ndarray:
    if family == "poisson":
        return rng.poisson(cases).astype(float)
    if family == "gaussian":
        return cases + sd * rng.standard_normal(len(cases))
    return rng.binomial(np.asarray(sizes, dtype=np.int64), np.clip(polygon_rate, 0.0, 1.0)).astype(float)


def simulate_dataset(cfg: SimulationConfig) -> SimulatedData:
    """Run the generative model forward on a synthetic raster."""
    rng = np.random.default_rng(cfg.seed)
    nc, nr, cs = cfg.grid_ncols, cfg.grid_nrows, cfg.cellsize

    covs = []
    for _ in range(cfg.n_covariates):
        z = gaussian_filter(rng.standard_normal((nr, nc)), cfg.covariate_smoothing, mode="reflect")
        covs.append((z - z.mean()) / z.std(ddof=1))
    names = [f"cov{k + 1}" for k in range(cfg.n_covariates)]
    stack = CovariateStack(names, [Grid(nc, nr, 0.0, 0.0, cs, c) for c in covs])

    if cfg.aggregation_mode == "uniform":
        agg = np.ones((nr, nc))
    else:
        agg = np.exp(cfg.aggregation_mu + cfg.aggregation_sigma * rng.standard_normal((nr, nc)))
    aggregation = Grid(nc, nr, 0.0, 0.0, cs, agg)

    field_px = simulate_field(nc, nr, cs, cfg.true_sigma, cfg.true_rho, rng)
    labels = voronoi_labels(nc, nr, cfg.n_polygons, rng)
    u = cfg.true_sigma_u * rng.standard_normal(cfg.n_polygons)

    X = np.column_stack([c.ravel() for c in covs]) if covs else np.zeros((nc * nr, 0))
    eta = cfg.true_beta0 + X @ np.array(cfg.true_beta) + field_px + u[labels.ravel()]
    rate = apply_link_inverse(eta, cfg.link)
    a = agg.ravel()
    lab = labels.ravel()
    cases = np.bincount(lab, weights=a * rate, minlength=cfg.n_polygons)
    totals = np.bincount(lab, weights=a, minlength=cfg.n_polygons)
    prate = cases / totals
    sd = cfg.obs_sigma * np.sqrt(np.bincount(lab, weights=a * a, minlength=cfg.n_polygons))
    sizes = np.full(cfg.n_polygons, cfg.sample_size)
    y = draw_response(cfg.family, cases, prate, rng, sizes=sizes, sd=sd)

    polygons = []
    for i in range(cfg.n_polygons):
        rings = pixel_set_rings(labels == i, 0.0, 0.0, cs)
        size = float(sizes[i]) if cfg.family == "binomial" else None
        polygons.append(Polygon(f"P{i:03d}", float(y[i]), rings, size))

    truth = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "beta0": cfg.true_beta0,
        "beta": list(cfg.true_beta),
        "sigma": cfg.true_sigma,
        "rho": cfg.true_rho,
        "sigma_u": cfg.true_sigma_u,
        "u": u.tolist(),
        "cases": cases.tolist(),
        "polygon_rate": prate.tolist(),
        "field": field_px.tolist(),
        "labels": labels.ravel().tolist(),
    }
    return SimulatedData(PolygonSet(polygons), stack, aggregation, truth)
