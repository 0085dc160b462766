from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disagg.errors import NODATA, AlignmentError, DataError, DimensionError, FormatError, GeometryError, ValidationError
from disagg.geoio import (
    Grid,
    Polygon,
    PolygonSet,
    load_covariate_dir,
    read_ascii_grid,
    read_polygons,
    write_ascii_grid,
    write_polygons,
)

from conftest import square


def _write(path, text):
    path.write_text(text)
    return path


class TestAsciiGrid:
    def test_single_cell(self, tmp_path):
        p = _write(tmp_path / "a.asc", "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n5.0\n")
        g = read_ascii_grid(p)
        assert g.values.tolist() == [[5.0]]

    def test_row_major_and_cell_center(self, tmp_path):
        p = _write(tmp_path / "a.asc", "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n3 4\n")
        g = read_ascii_grid(p)
        assert g.values.ravel().tolist() == [1, 2, 3, 4]
        assert g.cell_center(1, 0) == (0.5, 0.5)
        assert g.nodata == NODATA

    def test_header_keys_case_insensitive(self, tmp_path):
        p = _write(tmp_path / "a.asc", "NCOLS 1\nNROWS 1\nXLLCORNER 0\nYLLCORNER 0\nCELLSIZE 2\nnodata_value -1\n-1\n")
        g = read_ascii_grid(p)
        assert g.cellsize == 2.0 and g.missing.all()

    def test_missing_cellsize(self, tmp_path):
        p = _write(tmp_path / "a.asc", "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\n5.0\n")
        with pytest.raises(FormatError, match="cellsize"):
            read_ascii_grid(p)

    def test_wrong_value_count(self, tmp_path):
        p = _write(tmp_path / "a.asc", "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n")
        with pytest.raises(DimensionError, match="expected 4"):
            read_ascii_grid(p)

    def test_zero_roundtrip(self, tmp_path):
        g = Grid(3, 3, 0.0, 0.0, 1.0, np.zeros((3, 3)))
        write_ascii_grid(g, tmp_path / "z.asc")
        assert read_ascii_grid(tmp_path / "z.asc") == g

    def test_nodata_written_as_sentinel(self, tmp_path):
        g = Grid(3, 1, 0.0, 0.0, 1.0, [1.25, NODATA, 3.5])
        write_ascii_grid(g, tmp_path / "n.asc")
        text = (tmp_path / "n.asc").read_text()
        assert [float(t) for t in text.splitlines()[-1].split()] == [1.25, NODATA, 3.5]
        back = read_ascii_grid(tmp_path / "n.asc")
        assert back.missing.tolist() == [[False, True, False]]

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 5),
        st.integers(1, 5),
        st.floats(-1e6, 1e6),
        st.floats(-1e6, 1e6),
        st.floats(1e-3, 1e3),
        st.data(),
    )
    def test_roundtrip_property(self, tmp_path_factory, ncols, nrows, xll, yll, cs, data):
        vals = data.draw(st.lists(st.floats(-1e300, 1e300, allow_nan=False), min_size=ncols * nrows,
                                  max_size=ncols * nrows))
        g = Grid(ncols, nrows, xll, yll, cs, vals)
        path = tmp_path_factory.mktemp("rt") / "g.asc"
        write_ascii_grid(g, path)
        back = read_ascii_grid(path)
        assert back == g
        assert np.array_equal(back.missing, g.missing)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.floats(1e-2, 1e2))
    def test_cell_centers_distinct(self, ncols, nrows, cs):
        g = Grid(ncols, nrows, 0.0, 0.0, cs, np.zeros(ncols * nrows))
        x, y = g.cell_centers()
        assert len(set(zip(x.tolist(), y.tolist()))) == ncols * nrows

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 2), st.integers(1, 2), st.sampled_from([0.0, 1.0]),
                              st.sampled_from([1.0, 2.0])), min_size=3, max_size=3))
    def test_alignment_is_equivalence(self, headers):
        a, b, c = (Grid(n, m, x, 0.0, cs, np.zeros(n * m)) for n, m, x, cs in headers)
        assert a.aligned_with(a)
        assert a.aligned_with(b) == b.aligned_with(a)
        if a.aligned_with(b) and b.aligned_with(c):
            assert a.aligned_with(c)


class TestCovariateDir:
    def test_sorted_names(self, tmp_path):
        for name in ("b", "a"):
            write_ascii_grid(Grid(2, 2, 0, 0, 1, np.ones(4)), tmp_path / f"{name}.asc")
        assert load_covariate_dir(tmp_path).names == ["a", "b"]

    def test_misaligned(self, tmp_path):
        write_ascii_grid(Grid(2, 2, 0, 0, 1, np.ones(4)), tmp_path / "a.asc")
        write_ascii_grid(Grid(2, 2, 0, 0, 2, np.ones(4)), tmp_path / "b.asc")
        with pytest.raises(AlignmentError, match="cellsize"):
            load_covariate_dir(tmp_path)

    def test_empty(self, tmp_path):
        with pytest.raises(DataError):
            load_covariate_dir(tmp_path)


def _collection(features):
    return {"type": "FeatureCollection", "features": features}


def _feature(props, coords, gtype="Polygon"):
    return {"type": "Feature", "properties": props, "geometry": {"type": gtype, "coordinates": coords}}


UNIT = [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]]


class TestPolygons:
    def test_read_unit_square(self, tmp_path):
        p = tmp_path / "p.geojson"
        p.write_text(json.dumps(_collection([_feature({"ID_2": "A", "inc": 12}, UNIT)])))
        ps = read_polygons(p, "ID_2", "inc")
        assert ps.ids == ["A"] and ps.responses.tolist() == [12.0]

    def test_missing_response(self, tmp_path):
        p = tmp_path / "p.geojson"
        p.write_text(json.dumps(_collection([_feature({"ID_2": "A"}, UNIT)])))
        with pytest.raises(DataError, match="inc"):
            read_polygons(p, "ID_2", "inc")

    def test_duplicate_ids(self, tmp_path):
        p = tmp_path / "p.geojson"
        f = _feature({"ID_2": "A", "inc": 1}, UNIT)
        p.write_text(json.dumps(_collection([f, f])))
        with pytest.raises(ValidationError):
            read_polygons(p, "ID_2", "inc")

    def test_unclosed_ring(self, tmp_path):
        p = tmp_path / "p.geojson"
        p.write_text(json.dumps(_collection([_feature({"id": "A", "r": 1}, [[[0, 0], [1, 0], [1, 1], [0, 1]]])])))
        with pytest.raises(GeometryError):
            read_polygons(p, "id", "r")

    def test_multipolygon_single_id(self, tmp_path):
        p = tmp_path / "p.geojson"
        mp = [UNIT, [[[2, 2], [3, 2], [3, 3], [2, 3], [2, 2]]]]
        p.write_text(json.dumps(_collection([_feature({"id": "M", "r": 1}, mp, "MultiPolygon")])))
        ps = read_polygons(p, "id", "r")
        assert len(ps) == 1 and len(ps.polygons[0].rings) == 2

    def test_write_read_roundtrip(self, tmp_path):
        ps = PolygonSet([Polygon("A", 2.0, [square(0, 0, 1, 1)], 10.0), Polygon("B", 3.0, [square(1, 0, 2, 1)], 12.0)])
        write_polygons(ps, tmp_path / "p.geojson")
        back = read_polygons(tmp_path / "p.geojson", "id", "response", "sample_size")
        assert back.ids == ["A", "B"]
        assert back.sample_sizes().tolist() == [10.0, 12.0]
        assert np.array_equal(back.polygons[1].rings[0], ps.polygons[1].rings[0])

    def test_binomial_needs_sizes(self):
        ps = PolygonSet([Polygon("A", 2.0, [square(0, 0, 1, 1)])])
        with pytest.raises(DataError):
            ps.require_sample_sizes()
