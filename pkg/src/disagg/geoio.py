"""Raster and polygon I/O.

Rasters use the ESRI ASCII grid format; polygons are read from GeoJSON-style
feature collections. All coordinates are treated as planar map units.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NODATA, AlignmentError, DataError, DimensionError, FormatError, GeometryError, ValidationError

HEADER_FIELDS = ("ncols", "nrows", "xll", "yll", "cellsize")

_HEADER_KEYS = {
    "ncols": "ncols",
    "nrows": "nrows",
    "xllcorner": "xll",
    "yllcorner": "yll",
    "cellsize": "cellsize",
    "nodata_value": "nodata",
}


@dataclass(frozen=True, eq=False)
class Grid:
    """A georeferenced regular raster.

    ``values`` has shape ``(nrows, ncols)``; row 0 is the northernmost row,
    matching the order in which rows appear in an ASCII grid file. Missing
    cells hold the ``nodata`` sentinel.
    """

    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    values: np.ndarray
    nodata: float = NODATA

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise DimensionError(f"grid must have at least one row and column, got {self.nrows}x{self.ncols}")
        if not self.cellsize > 0:
            raise ValidationError(f"cellsize must be positive, got {self.cellsize}")
        values = np.array(self.values, dtype=float)
        if values.size != self.nrows * self.ncols:
            raise DimensionError(
                f"expected {self.nrows * self.ncols} values for a {self.nrows}x{self.ncols} grid, got {values.size}"
            )
        values = values.reshape(self.nrows, self.ncols)
        values[np.isnan(values)] = self.nodata
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def header(self) -> dict:
        return {
            "ncols": self.ncols,
            "nrows": self.nrows,
            "xll": self.xll,
            "yll": self.yll,
            "cellsize": self.cellsize,
            "nodata": self.nodata,
        }

    @classmethod
    def from_header(cls, header: dict, values: np.ndarray) -> "Grid":
        return cls(
            ncols=int(header["ncols"]),
            nrows=int(header["nrows"]),
            xll=float(header["xll"]),
            yll=float(header["yll"]),
            cellsize=float(header["cellsize"]),
            values=values,
            nodata=float(header.get("nodata", NODATA)),
        )

    @property
    def missing(self) -> np.ndarray:
        """Boolean mask of nodata cells."""
        return self.values == self.nodata

    def as_float(self) -> np.ndarray:
        """Values with nodata cells replaced by NaN."""
        out = np.array(self.values, dtype=float)
        out[self.missing] = np.nan
        return out

    def cell_center(self, row, col):
        """Map-unit coordinates of the center of cell ``(row, col)``."""
        x = self.xll + (np.asarray(col) + 0.5) * self.cellsize
        y = self.yll + (self.nrows - 1 - np.asarray(row) + 0.5) * self.cellsize
        return x, y

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (row-major) x and y coordinates of every cell center."""
        rows, cols = np.divmod(np.arange(self.nrows * self.ncols), self.ncols)
        return self.cell_center(rows, cols)

    def aligned_with(self, other: "Grid") -> bool:
        return first_misalignment(self, other) is None

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return self.header() == other.header() and np.array_equal(self.values, other.values)

    __hash__ = None


def first_misalignment(a: Grid, b: Grid) -> str | None:
    """Name of the first header field that differs between two grids."""
    for name in HEADER_FIELDS:
        if getattr(a, name) != getattr(b, name):
            return name
    return None


@dataclass(frozen=True)
class CovariateStack:
    """Aligned covariate rasters with unique names."""

    names: list[str]
    grids: list[Grid]

    def __post_init__(self):
        if len(self.names) != len(self.grids):
            raise DimensionError(f"{len(self.names)} names for {len(self.grids)} grids")
        if len(self.names) == 0:
            raise DataError("covariate stack is empty")
        if any(not n for n in self.names):
            raise ValidationError("covariate names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate covariate names in {self.names}")
        for name, grid in zip(self.names[1:], self.grids[1:]):
            bad = first_misalignment(self.grids[0], grid)
            if bad is not None:
                raise AlignmentError(f"covariate '{name}' differs from '{self.names[0]}' in header field '{bad}'")

    @property
    def template(self) -> Grid:
        return self.grids[0]

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> Grid:
        return self.grids[self.names.index(name)]

    def matrix(self) -> np.ndarray:
        """Cells × covariates array, NaN where any raster is nodata."""
        return np.column_stack([g.as_float().ravel() for g in self.grids])

    def subset(self, names: Sequence[str]) -> "CovariateStack":
        missing = [n for n in names if n not in self.names]
        if missing:
            raise DataError(f"covariates not found in stack: {missing}")
        return CovariateStack(list(names), [self[n] for n in names])


@dataclass
class Polygon:
    id: str
    response: float
    rings: list[np.ndarray]
    sample_size: float | None = None


@dataclass
class PolygonSet:
    polygons: list[Polygon] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for p in self.polygons:
            if p.id in seen:
                raise ValidationError(f"duplicate polygon id '{p.id}'")
            seen.add(p.id)
            for ring in p.rings:
                _check_ring(ring, p.id)

    def __len__(self):
        return len(self.polygons)

    def __iter__(self):
        return iter(self.polygons)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.polygons]

    @property
    def responses(self) -> np.ndarray:
        return np.array([p.response for p in self.polygons], dtype=float)

    def sample_sizes(self) -> np.ndarray | None:
        if all(p.sample_size is None for p in self.polygons):
            return None
        return np.array([np.nan if p.sample_size is None else p.sample_size for p in self.polygons], dtype=float)

    def require_sample_sizes(self) -> np.ndarray:
        sizes = self.sample_sizes()
        if sizes is None or np.any(np.isnan(sizes)):
            raise DataError("the binomial family needs a sample size for every polygon")
        if np.any(sizes <= 0):
            raise ValidationError("sample sizes must be positive")
        return sizes


def _check_ring(ring: np.ndarray, pid: str) -> None:
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise GeometryError(f"polygon '{pid}': ring coordinates must be (x, y) pairs")
    if len(ring) < 4:
        raise GeometryError(f"polygon '{pid}': ring has {len(ring)} vertices, need at least 4")
    if not np.array_equal(ring[0], ring[-1]):
        raise GeometryError(f"polygon '{pid}': ring is not closed (first vertex != last vertex)")


# --------------------------------------------------------------------------- #
# ASCII grids
# --------------------------------------------------------------------------- #


def read_ascii_grid(path) -> Grid:
    """Read an ESRI ASCII grid.

    The ``NODATA_value`` key is optional and defaults to -9999. Header keys
    are matched case-insensitively.
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    header: dict[str, str] = {}
    pos = 0
    while pos < len(lines):
        parts = lines[pos].split()
        if not parts:
            pos += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            break
        if len(parts) != 2:
            raise FormatError(f"{path}: malformed header line for key '{parts[0]}'")
        header[_HEADER_KEYS[key]] = parts[1]
        pos += 1

    for key, name in _HEADER_KEYS.items():
        if name != "nodata" and name not in header:
            raise FormatError(f"{path}: header is missing key '{key}'")

    parsed = {}
    for name, text in header.items():
        try:
            parsed[name] = int(text) if name in ("ncols", "nrows") else float(text)
        except ValueError:
            raise FormatError(f"{path}: cannot parse header key '{name}' value '{text}'") from None
    parsed.setdefault("nodata", NODATA)

    tokens = " ".join(lines[pos:]).split()
    expected = parsed["nrows"] * parsed["ncols"]
    if len(tokens) != expected:
        raise DimensionError(f"{path}: expected {expected} values, found {len(tokens)}")
    try:
        values = np.array([float(t) for t in tokens], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return Grid.from_header(parsed, values)


def _fmt(v: float) -> str:
    return repr(float(v))


def format_ascii_grid(grid: Grid) -> str:
    """ASCII grid text; floats use the shortest round-tripping repr."""
    out = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {_fmt(grid.xll)}",
        f"yllcorner {_fmt(grid.yll)}",
        f"cellsize {_fmt(grid.cellsize)}",
        f"NODATA_value {_fmt(grid.nodata)}",
    ]
    nodata = _fmt(grid.nodata)
    for row in grid.values:
        out.append(" ".join(nodata if not math.isfinite(v) else _fmt(v) for v in row))
    return "\n".join(out) + "\n"


def write_ascii_grid(grid: Grid, path) -> None:
    """Write a grid so that :func:`read_ascii_grid` reproduces it bit-exactly."""
    try:
        Path(path).write_text(format_ascii_grid(grid))
    except OSError as exc:
        raise DataError(f"cannot write '{path}': {exc}") from exc


def load_covariate_dir(directory, template: Grid | None = None) -> CovariateStack:
    """Load every ``*.asc`` file in ``directory`` as a covariate.

    Names come from file stems and are sorted lexicographically. Every grid
    must match ``template`` (or the first grid when no template is given).
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"covariate directory '{directory}' does not exist")
    files = sorted(directory.glob("*.asc"), key=lambda p: p.stem)
    if not files:
        raise DataError(f"no ASCII grids (*.asc) found in '{directory}'")
    grids = [read_ascii_grid(f) for f in files]
    reference = template if template is not None else grids[0]
    for f, g in zip(files, grids):
        bad = first_misalignment(reference, g)
        if bad is not None:
            raise AlignmentError(
                f"'{f.name}' is not aligned with the template: header field '{bad}' "
                f"is {getattr(g, bad)!r}, expected {getattr(reference, bad)!r}"
            )
    return CovariateStack([f.stem for f in files], grids)


def save_covariate_dir(stack: CovariateStack, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, grid in zip(stack.names, stack.grids):
        write_ascii_grid(grid, directory / f"{name}.asc")


# --------------------------------------------------------------------------- #
# Polygons
# --------------------------------------------------------------------------- #


def _as_ring(coords, pid) -> np.ndarray:
    try:
        ring = np.array(coords, dtype=float)
    except (TypeError, ValueError):
        raise GeometryError(f"polygon '{pid}': ring coordinates are not numeric") from None
    if ring.ndim != 2 or ring.shape[0] == 0:
        raise GeometryError(f"polygon '{pid}': empty or ragged ring")
    return ring[:, :2]


def _optional_float(value):
    return np.nan if value is None else float(value)


def read_polygons(path, id_var: str, response_var: str, sample_size_var: str | None = None) -> PolygonSet:
    """Read polygons and their responses from a GeoJSON feature collection.

    A ``null`` response is kept as NaN so that the NA policy can deal with
    it. MultiPolygon parts (and holes) are all stored as rings of a single
    polygon; membership is decided by the even-odd rule over all rings.

    Raises:
        DataError: a feature lacks ``id_var``, ``response_var`` or
            ``sample_size_var``.
        GeometryError: a ring is unclosed or has fewer than 4 vertices.
        ValidationError: two features share an id.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    features = doc.get("features") if isinstance(doc, dict) else None
    if features is None:
        raise FormatError(f"{path}: not a feature collection (no 'features' array)")

    polygons = []
    for k, feat in enumerate(features):
        props = feat.get("properties") or {}
        for var in (id_var, response_var, sample_size_var):
            if var is not None and var not in props:
                raise DataError(f"{path}: feature {k} has no property '{var}'")
        pid = str(props[id_var])
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        coords = geom.get("coordinates")
        if gtype == "Polygon":
            parts = [coords]
        elif gtype == "MultiPolygon":
            parts = coords
        else:
            raise GeometryError(f"{path}: feature {k} ('{pid}') has unsupported geometry type {gtype!r}")
        rings = [_as_ring(r, pid) for part in parts for r in part]
        size = _optional_float(props[sample_size_var]) if sample_size_var else None
        polygons.append(Polygon(pid, _optional_float(props[response_var]), rings, size))
    return PolygonSet(polygons)


def write_polygons(polygons: PolygonSet, path, id_var: str = "id", response_var: str = "response",
                   sample_size_var: str = "sample_size") -> None:
    """Write polygons as a GeoJSON feature collection (one Polygon per entry)."""
    features = []
    for p in polygons:
        props = {id_var: p.id, response_var: None if math.isnan(p.response) else p.response}
        if p.sample_size is not None:
            props[sample_size_var] = p.sample_size
        features.append({
            "type": "Feature",
            "properties": props,
            "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in p.rings]},
        })
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}, indent=1))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
