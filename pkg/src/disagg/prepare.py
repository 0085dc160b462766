"""Turn polygons and rasters into a fit-ready bundle.

The pipeline is: extract pixels inside each polygon, apply the NA policy,
drop polygons without pixels, optionally standardize covariates, build the
start/end index and size the SPDE lattice.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, InternalError, ValidationError
from .geoio import CovariateStack, Grid, PolygonSet, first_misalignment, format_ascii_grid, read_ascii_grid

DEFAULT_PAD_NODES = 5
DEFAULT_SPACING_FACTOR = 4.0


@dataclass(frozen=True)
class PixelTable:
    """One row per pixel, grouped by polygon.

    ``polygon_index`` is non-decreasing so the pixels of polygon ``i`` form a
    contiguous block. ``cell`` is the row-major cell index in the template
    raster.
    """

    polygon_index: np.ndarray
    x: np.ndarray
    y: np.ndarray
    covariates: np.ndarray
    aggregation: np.ndarray
    cell: np.ndarray
    names: tuple[str, ...] = ()

    @property
    def n_pixels(self) -> int:
        return len(self.polygon_index)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def take(self, rows: np.ndarray) -> "PixelTable":
        return replace(
            self,
            polygon_index=self.polygon_index[rows],
            x=self.x[rows],
            y=self.y[rows],
            covariates=self.covariates[rows],
            aggregation=self.aggregation[rows],
            cell=self.cell[rows],
        )


@dataclass(frozen=True)
class StartEndIndex:
    """Inclusive ``(start, end)`` pixel ranges, one row per polygon."""

    ranges: np.ndarray

    @property
    def n_polygons(self) -> int:
        return len(self.ranges)

    @property
    def counts(self) -> np.ndarray:
        return self.ranges[:, 1] - self.ranges[:, 0] + 1

    @property
    def starts(self) -> np.ndarray:
        return self.ranges[:, 0]


@dataclass(frozen=True)
class LatticeSpec:
    """Regular node lattice carrying the spatial field.

    Node ``(r, c)`` sits at ``(x0 + c * spacing, y0 + r * spacing)``; nodes
    are numbered ``r * ncols + c``.
    """

    ncols: int
    nrows: int
    x0: float
    y0: float
    spacing: float
    pad_nodes: int = 0

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValidationError(f"lattice spacing must be positive, got {self.spacing}")
        if self.ncols < 1 or self.nrows < 1:
            raise ValidationError("lattice needs at least one node in each direction")

    @property
    def n_nodes(self) -> int:
        return self.ncols * self.nrows

    @property
    def x1(self) -> float:
        return self.x0 + (self.ncols - 1) * self.spacing

    @property
    def y1(self) -> float:
        return self.y0 + (self.nrows - 1) * self.spacing

    @property
    def diagonal(self) -> float:
        return math.hypot(self.x1 - self.x0, self.y1 - self.y0)

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        r, c = np.divmod(np.arange(self.n_nodes), self.ncols)
        return self.x0 + c * self.spacing, self.y0 + r * self.spacing

    def to_dict(self) -> dict:
        return {
            "ncols": self.ncols,
            "nrows": self.nrows,
            "x0": self.x0,
            "y0": self.y0,
            "spacing": self.spacing,
            "pad_nodes": self.pad_nodes,
        }


@dataclass(frozen=True, eq=False)
class PreparedData:
    pixel_table: PixelTable
    index: StartEndIndex
    lattice: LatticeSpec
    responses: np.ndarray
    covariate_names: list[str]
    template_header: dict
    polygon_ids: list[str]
    stack: CovariateStack | None
    sample_sizes: np.ndarray | None = None
    transform: dict | None = None
    dropped: dict = field(default_factory=dict)

    @property
    def n_polygons(self) -> int:
        return self.index.n_polygons

    @property
    def n_pixels(self) -> int:
        return self.pixel_table.n_pixels

    def aggregation_totals(self) -> np.ndarray:
        return np.add.reduceat(self.pixel_table.aggregation, self.index.starts)

    def digest(self) -> str:
        """SHA-256 of the serialized bundle; identifies fits and chains built on it."""
        h = hashlib.sha256()
        for name, text in sorted(_serialize(self).items()):
            h.update(name.encode())
            h.update(b"\0")
            h.update(text.encode())
        return h.hexdigest()


# --------------------------------------------------------------------------- #
# Point in polygon
# --------------------------------------------------------------------------- #


def points_in_rings(x: np.ndarray, y: np.ndarray, rings) -> np.ndarray:
    """Even-odd ray casting over all rings.

    A horizontal ray is cast towards +x. An edge counts when it straddles the
    point's y with the half-open rule ``(y1 > y) != (y2 > y)`` and lies
    strictly to the right of the point. Points on bottom/left edges are
    therefore inside, points on top/right edges outside.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = np.zeros(x.shape, dtype=bool)
    for ring in rings:
        x1, y1 = ring[:-1, 0], ring[:-1, 1]
        x2, y2 = ring[1:, 0], ring[1:, 1]
        for k in range(len(x1)):
            if y1[k] == y2[k]:
                continue
            straddle = (y1[k] > y) != (y2[k] > y)
            if not straddle.any():
                continue
            xint = x1[k] + (y - y1[k]) * (x2[k] - x1[k]) / (y2[k] - y1[k])
            inside ^= straddle & (x < xint)
    return inside


# --------------------------------------------------------------------------- #
# Extraction
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Extraction:
    table: PixelTable
    empty: list[int]


def extract_pixels(polygons: PolygonSet, stack: CovariateStack, aggregation: Grid | None = None,
                   ncores: int = 1) -> Extraction:
    """Collect every pixel whose center falls inside a polygon.

    Pixels covered by several polygons go to the first polygon in file order.
    Missing raster cells come back as NaN; without an aggregation raster each
    pixel gets weight 1. Polygons without any pixel are listed in
    ``Extraction.empty`` (indices into ``polygons``).
    """
    template = stack.template
    if aggregation is not None:
        bad = first_misalignment(template, aggregation)
        if bad is not None:
            raise DataError(f"aggregation raster is not aligned with the covariates (field '{bad}')")

    cx, cy = template.cell_centers()
    owner = np.full(cx.size, -1, dtype=np.int64)
    for i, poly in enumerate(polygons):
        coords = np.vstack(poly.rings)
        xmin, ymin = coords.min(axis=0)
        xmax, ymax = coords.max(axis=0)
        cand = np.flatnonzero((owner < 0) & (cx >= xmin) & (cx <= xmax) & (cy >= ymin) & (cy <= ymax))
        if cand.size == 0:
            continue
        hit = points_in_rings(cx[cand], cy[cand], poly.rings)
        owner[cand[hit]] = i

    cells = np.flatnonzero(owner >= 0)
    cells = cells[np.argsort(owner[cells], kind="stable")]
    pidx = owner[cells]

    def column(grid: Grid) -> np.ndarray:
        return grid.as_float().ravel()[cells]

    with ThreadPoolExecutor(max_workers=max(1, int(ncores))) as pool:
        cols = list(pool.map(column, stack.grids))
    covariates = np.column_stack(cols) if cols else np.empty((cells.size, 0))
    agg = column(aggregation) if aggregation is not None else np.ones(cells.size)

    counts = np.bincount(pidx, minlength=len(polygons))
    empty = [i for i in range(len(polygons)) if counts[i] == 0]
    table = PixelTable(pidx, cx[cells], cy[cells], covariates, agg, cells, tuple(stack.names))
    return Extraction(table, empty)


def _renumber(table: PixelTable, keep: np.ndarray) -> PixelTable:
    """Drop pixels of polygons not in ``keep`` and renumber the rest 0..K-1."""
    keep = np.asarray(keep, dtype=np.int64)
    new_id = np.full(int(table.polygon_index.max(initial=-1)) + 1, -1, dtype=np.int64)
    valid = keep[keep < new_id.size]
    new_id[valid] = np.flatnonzero(keep < new_id.size)
    rows = np.flatnonzero(np.isin(table.polygon_index, keep))
    sub = table.take(rows)
    return replace(sub, polygon_index=new_id[sub.polygon_index])


@dataclass(frozen=True)
class NAResult:
    table: PixelTable
    responses: np.ndarray
    sample_sizes: np.ndarray | None
    kept: np.ndarray


def apply_na_policy(raw: PixelTable, responses, na_action: bool, sample_sizes=None) -> NAResult:
    """Handle missing values.

    With ``na_action`` off any missing value is an error. With it on:
    polygons with a missing response (or sample size) are dropped, missing
    aggregation weights become 0, and missing covariate values are replaced
    by that covariate's median over all extracted pixels.
    """
    responses = np.asarray(responses, dtype=float)
    sizes = None if sample_sizes is None else np.asarray(sample_sizes, dtype=float)
    bad_resp = np.isnan(responses)
    if sizes is not None:
        bad_resp |= np.isnan(sizes)
    cov_nan = np.isnan(raw.covariates)
    agg_nan = np.isnan(raw.aggregation)

    if not na_action:
        counts = {
            "response": int(bad_resp.sum()),
            "covariate": int(cov_nan.sum()),
            "aggregation": int(agg_nan.sum()),
        }
        if any(counts.values()):
            detail = ", ".join(f"{k}: {v}" for k, v in counts.items() if v)
            raise DataError(f"missing values found ({detail}); clean the inputs or enable na_action")
        return NAResult(raw, responses, sizes, np.arange(len(responses)))

    covariates = raw.covariates.copy()
    for k in range(covariates.shape[1]):
        col = covariates[:, k]
        nan = np.isnan(col)
        if nan.any():
            if nan.all():
                name = raw.names[k] if k < len(raw.names) else str(k)
                raise DataError(f"covariate '{name}' is missing at every extracted pixel")
            col[nan] = np.median(col[~nan])
    aggregation = np.where(agg_nan, 0.0, raw.aggregation)
    table = replace(raw, covariates=covariates, aggregation=aggregation)

    kept = np.flatnonzero(~bad_resp)
    table = _renumber(table, kept)
    return NAResult(table, responses[kept], None if sizes is None else sizes[kept], kept)


def build_index(pixel_table) -> StartEndIndex:
    """Inclusive start/end rows for each polygon block."""
    pidx = np.asarray(getattr(pixel_table, "polygon_index", pixel_table), dtype=np.int64)
    if pidx.size == 0:
        return StartEndIndex(np.empty((0, 2), dtype=np.int64))
    step = np.diff(pidx)
    if np.any(step < 0):
        raise InternalError("polygon_index must be non-decreasing")
    if pidx[0] != 0 or np.any(step > 1):
        raise InternalError("polygon_index must number polygons consecutively from 0")
    starts = np.flatnonzero(np.r_[True, step > 0])
    ends = np.r_[starts[1:] - 1, pidx.size - 1]
    return StartEndIndex(np.column_stack([starts, ends]))


def standardize(pixel_table: PixelTable):
    """Center and scale covariates by their mean and sample standard deviation.

    Returns the transformed table with the per-covariate means and sds.
    """
    X = pixel_table.covariates
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(X.shape[1])
    for k, sd in enumerate(sds):
        if not sd > 0:
            name = pixel_table.names[k] if k < len(pixel_table.names) else str(k)
            raise ValidationError(f"covariate '{name}' is constant and cannot be standardized")
    return replace(pixel_table, covariates=(X - means) / sds), means, sds


def build_lattice(pixel_table: PixelTable, spacing: float, pad_nodes: int = DEFAULT_PAD_NODES) -> LatticeSpec:
    """Smallest lattice covering the pixel bounding box plus ``pad_nodes`` rings."""
    if not spacing > 0:
        raise ValidationError(f"lattice spacing must be positive, got {spacing}")
    if pad_nodes < 0:
        raise ValidationError("pad_nodes must be non-negative")
    if pixel_table.n_pixels == 0:
        raise DataError("cannot build a lattice without pixels")
    xmin, xmax = pixel_table.x.min(), pixel_table.x.max()
    ymin, ymax = pixel_table.y.min(), pixel_table.y.max()

    def count(extent):
        # tolerance keeps exact multiples from gaining a spurious node
        return int(math.ceil(extent / spacing - 1e-9)) + 1

    return LatticeSpec(
        ncols=count(xmax - xmin) + 2 * pad_nodes,
        nrows=count(ymax - ymin) + 2 * pad_nodes,
        x0=float(xmin - pad_nodes * spacing),
        y0=float(ymin - pad_nodes * spacing),
        spacing=float(spacing),
        pad_nodes=int(pad_nodes),
    )


def prepare_data(
    polygons: PolygonSet,
    stack: CovariateStack,
    aggregation: Grid | None = None,
    *,
    na_action: bool = False,
    standardize_covariates: bool = False,
    spacing: float | None = None,
    pad_nodes: int = DEFAULT_PAD_NODES,
    ncores: int = 1,
) -> PreparedData:
    """Build a :class:`PreparedData` bundle.

    ``spacing`` defaults to four times the raster cell size. Polygons that
    contain no pixel are dropped from the likelihood with a warning.
    """
    extraction = extract_pixels(polygons, stack, aggregation, ncores=ncores)
    na = apply_na_policy(extraction.table, polygons.responses, na_action, polygons.sample_sizes())
    ids = [polygons.ids[k] for k in na.kept]
    dropped = {"missing_response": [pid for pid in polygons.ids if pid not in set(ids)]}

    counts = np.bincount(na.table.polygon_index, minlength=len(ids))
    has_pixels = np.flatnonzero(counts > 0)
    empty_ids = [ids[k] for k in np.flatnonzero(counts == 0)]
    if empty_ids:
        warnings.warn(f"dropping {len(empty_ids)} polygon(s) without pixels: {empty_ids}", stacklevel=2)
    dropped["no_pixels"] = empty_ids
    table = _renumber(na.table, has_pixels)
    ids = [ids[k] for k in has_pixels]
    responses = na.responses[has_pixels]
    sizes = None if na.sample_sizes is None else na.sample_sizes[has_pixels]
    if table.n_pixels == 0:
        raise DataError("no pixel falls inside any polygon")

    transform = None
    if standardize_covariates:
        table, means, sds = standardize(table)
        transform = {"means": means.tolist(), "sds": sds.tolist()}

    if spacing is None:
        spacing = DEFAULT_SPACING_FACTOR * stack.template.cellsize
    lattice = build_lattice(table, spacing, pad_nodes)
    return PreparedData(
        pixel_table=table,
        index=build_index(table),
        lattice=lattice,
        responses=responses,
        covariate_names=list(stack.names),
        template_header=stack.template.header(),
        polygon_ids=ids,
        stack=stack,
        sample_sizes=sizes,
        transform=transform,
        dropped=dropped,
    )


def prepared_from_arrays(
    polygon_index,
    x,
    y,
    covariates,
    aggregation,
    responses,
    *,
    sample_sizes=None,
    spacing: float = 1.0,
    pad_nodes: int = 1,
    lattice: LatticeSpec | None = None,
) -> PreparedData:
    """Bundle in-memory pixel arrays without going through rasters.

    Handy for small synthetic problems. The result has no covariate stack,
    so predictions need explicit ``newdata``.
    """
    pidx = np.asarray(polygon_index, dtype=np.int64)
    X = np.asarray(covariates, dtype=float).reshape(len(pidx), -1)
    names = tuple(f"cov{k + 1}" for k in range(X.shape[1]))
    table = PixelTable(pidx, np.asarray(x, dtype=float), np.asarray(y, dtype=float), X,
                       np.asarray(aggregation, dtype=float), np.arange(len(pidx), dtype=np.int64), names)
    index = build_index(table)
    if lattice is None:
        lattice = build_lattice(table, spacing, pad_nodes)
    responses = np.asarray(responses, dtype=float)
    if responses.size != index.n_polygons:
        raise ValidationError(f"{responses.size} responses for {index.n_polygons} polygons")
    return PreparedData(
        pixel_table=table,
        index=index,
        lattice=lattice,
        responses=responses,
        covariate_names=list(names),
        template_header={},
        polygon_ids=[f"P{i}" for i in range(index.n_polygons)],
        stack=None,
        sample_sizes=None if sample_sizes is None else np.asarray(sample_sizes, dtype=float),
    )


def transform_covariates(prep: PreparedData, X: np.ndarray) -> np.ndarray:
    """Apply the stored standardization (if any) to raw covariate values."""
    if prep.transform is None:
        return X
    return (X - np.asarray(prep.transform["means"])) / np.asarray(prep.transform["sds"])


# --------------------------------------------------------------------------- #
# Summary
# --------------------------------------------------------------------------- #


def _describe(col: np.ndarray) -> list[tuple[str, float]]:
    q1, med, q3 = np.percentile(col, [25, 50, 75])
    return [("Min.", col.min()), ("1st Qu.", q1), ("Median", med), ("Mean", col.mean()),
            ("3rd Qu.", q3), ("Max.", col.max())]


def summarize(prep: PreparedData) -> str:
    counts = prep.index.counts
    lines = [
        f"The data contains {prep.n_polygons} polygons and {prep.n_pixels} pixels",
        f"The largest polygon contains {counts.max()} pixels and the smallest polygon contains {counts.min()} pixels",
        f"There are {len(prep.covariate_names)} covariates",
    ]
    dropped = [pid for ids in prep.dropped.values() for pid in ids]
    if dropped:
        lines.append(f"Dropped polygons: {', '.join(dropped)}")
    lines += ["", "Covariate summary:"]
    for k, name in enumerate(prep.covariate_names):
        stats = "  ".join(f"{label}: {value:.6g}" for label, value in _describe(prep.pixel_table.covariates[:, k]))
        lines.append(f"  {name:<12s} {stats}")
    return "\n".join(lines)


# --------------------------------------------------------------------------- #
# Persistence
# --------------------------------------------------------------------------- #


def _r(v) -> str:
    return repr(float(v))


def _serialize(prep: PreparedData) -> dict[str, str]:
    t = prep.pixel_table
    manifest = {
        "covariate_names": list(prep.covariate_names),
        "template_header": {k: prep.template_header[k] for k in sorted(prep.template_header)},
        "lattice": prep.lattice.to_dict(),
        "n_polygons": prep.n_polygons,
        "n_pixels": prep.n_pixels,
        "transform": prep.transform,
        "dropped": prep.dropped,
        "has_sample_sizes": prep.sample_sizes is not None,
        "has_stack": prep.stack is not None,
    }
    files = {"manifest.json": json.dumps(manifest, indent=2, sort_keys=True) + "\n"}

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["polygon_index", "cell", "x", "y", *prep.covariate_names, "aggregation"])
    for p in range(t.n_pixels):
        w.writerow([int(t.polygon_index[p]), int(t.cell[p]), _r(t.x[p]), _r(t.y[p]),
                    *(_r(v) for v in t.covariates[p]), _r(t.aggregation[p])])
    files["pixels.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["polygon_id", "response", "sample_size", "start", "end"])
    for i, pid in enumerate(prep.polygon_ids):
        size = "" if prep.sample_sizes is None else _r(prep.sample_sizes[i])
        start, end = prep.index.ranges[i]
        w.writerow([pid, _r(prep.responses[i]), size, int(start), int(end)])
    files["responses.csv"] = buf.getvalue()

    if prep.stack is not None:
        for name, grid in zip(prep.stack.names, prep.stack.grids):
            files[f"covariates/{name}.asc"] = format_ascii_grid(grid)
    return files


def save_prepared(prep: PreparedData, directory) -> str:
    """Write the bundle to ``directory`` and return its digest."""
    directory = Path(directory)
    (directory / "covariates").mkdir(parents=True, exist_ok=True)
    for name, text in _serialize(prep).items():
        (directory / name).write_text(text)
    return prep.digest()


def load_prepared(directory) -> PreparedData:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise DataError(f"'{directory}' is not a prepared-data directory (no manifest.json)")
    manifest = json.loads((directory / "manifest.json").read_text())
    names = manifest["covariate_names"]

    with open(directory / "pixels.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    k = len(names)
    pidx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    cell = np.array([int(r[1]) for r in rows], dtype=np.int64)
    vals = np.array([[float(v) for v in r[2:]] for r in rows], dtype=float).reshape(len(rows), k + 3)
    table = PixelTable(pidx, vals[:, 0], vals[:, 1], vals[:, 2:2 + k].copy(), vals[:, 2 + k].copy(), cell,
                       tuple(names))

    with open(directory / "responses.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [r[0] for r in rows]
    responses = np.array([float(r[1]) for r in rows])
    sizes = np.array([float(r[2]) for r in rows]) if manifest["has_sample_sizes"] else None

    stack = None
    if manifest.get("has_stack", True):
        stack = CovariateStack(names, [read_ascii_grid(directory / "covariates" / f"{n}.asc") for n in names])
    return PreparedData(
        pixel_table=table,
        index=build_index(table),
        lattice=LatticeSpec(**manifest["lattice"]),
        responses=responses,
        covariate_names=names,
        template_header=manifest["template_header"],
        polygon_ids=ids,
        stack=stack,
        sample_sizes=sizes,
        transform=manifest["transform"],
        dropped=manifest["dropped"],
    )
