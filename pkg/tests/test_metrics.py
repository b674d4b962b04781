import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cdsp_moe.metrics import (HeatmapSpec, clustering_separation, export_csv, export_svg_heatmap, js_divergence,
                              pairwise_pearson, pearson, ramp_color, read_csv_log, read_csv_matrix)

SVG = "{http://www.w3.org/2000/svg}"
row = arrays(np.float64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False))


def dist(n):
    return arrays(np.float64, n, elements=st.floats(0, 1)).filter(lambda v: v.sum() > 1e-3).map(lambda v: v / v.sum())


def test_pearson_examples():
    assert pearson([1, 2, 3], [1, 2, 3]) == 1.0
    assert pearson([1, 2, 3], [-1, -2, -3]) == -1.0
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9819805060619657, rel=1e-14)
    assert pearson([1, 1, 1], [1, 2, 3], return_flag=True) == (0.0, True)
    with pytest.raises(ValueError):
        pearson([1], [1])


@given(row)
def test_pearson_self_is_exactly_one(a):
    assume(np.ptp(a) > 1e-6)
    assert pearson(a, a) == 1.0


@given(row, row)
def test_pearson_bounded_and_symmetric(a, b):
    r = pearson(a, b)
    assert -1.0 <= r <= 1.0 and r == pearson(b, a)


def test_pairwise_keys():
    assert set(pairwise_pearson(np.eye(3))) == {(0, 1), (0, 2), (1, 2)}


def test_clustering_examples():
    rep = clustering_separation(np.full((3, 4), 0.25))
    assert rep["degenerate"] and rep["clustered"] and rep["d01"] == 0.0
    rep = clustering_separation(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    assert rep["d01"] == 0.0 and rep["d02"] == pytest.approx(math.log(2), rel=1e-15)
    assert rep["clustered"] and not rep["degenerate"]
    assert not clustering_separation(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))["clustered"]
    with pytest.raises(ValueError):
        clustering_separation(np.array([[0.5, 0.6], [1, 0], [0, 1]]))


@given(dist(5), dist(5))
@settings(max_examples=60)
def test_js_properties(p, q):
    d = js_divergence(p, q)
    assert d == js_divergence(q, p)
    assert 0.0 <= d <= math.log(2)
    assert js_divergence(p, p) == 0.0


def test_csv_identity_file(tmp_path):
    path = export_csv(np.eye(2), tmp_path / "m.csv")
    text = path.read_text()
    assert text == "c0,c1\n1.0,0.0\n0.0,1.0\n"
    assert len(text.splitlines()) == 3


def test_csv_empty_log(tmp_path):
    path = export_csv([], tmp_path / "log.csv", ["epoch", "loss"])
    assert path.read_text() == "epoch,loss\n"
    assert read_csv_log(path) == []


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False)))
@settings(max_examples=40, deadline=None)
def test_csv_round_trip_is_bit_exact(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("csv") / "m.csv"
    export_csv(m, path, ["a", "b", "c", "d"], ["r0", "r1", "r2"])
    header, back, labels = read_csv_matrix(path)
    assert header == ["a", "b", "c", "d"] and labels == ["r0", "r1", "r2"]
    assert np.array_equal(back, m)


def test_csv_log_round_trip(tmp_path):
    rows = [{"epoch": 1, "loss": 0.1 + 0.2}, {"epoch": 2, "loss": 1e-17}]
    back = read_csv_log(export_csv(rows, tmp_path / "log.csv"))
    assert back == [{"epoch": 1.0, "loss": 0.1 + 0.2}, {"epoch": 2.0, "loss": 1e-17}]


def test_csv_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export_csv(np.eye(2), blocker / "m.csv")


def _rects(path):
    root = ET.parse(path).getroot()
    assert root.tag == SVG + "svg" and root.get("width") and root.get("height")
    return root.findall(f"{SVG}rect")


def test_svg_single_cell_minimum_color(tmp_path):
    rects = _rects(export_svg_heatmap(HeatmapSpec(np.zeros((1, 1))), tmp_path / "a.svg"))
    assert len(rects) == 1 and rects[0].get("fill") == "#f7fbff"


def test_svg_topology_cell_count(tmp_path):
    m = np.random.default_rng(0).uniform(size=(8, 8))
    spec = HeatmapSpec(m, [f"e{i}" for i in range(8)], [f"e{i}" for i in range(8)], "sigma(A) <epoch 1>")
    assert len(_rects(export_svg_heatmap(spec, tmp_path / "t.svg"))) == 64


def test_svg_degenerate_scale_uses_midpoint(tmp_path):
    spec = HeatmapSpec(np.full((2, 3), 0.4), vmin=None, vmax=None, annotate=False)
    fills = {r.get("fill") for r in _rects(export_svg_heatmap(spec, tmp_path / "d.svg"))}
    assert fills == {ramp_color(0.5, "#f7fbff", "#08306b")}


def test_ramp_endpoints():
    assert ramp_color(0.0, "#000000", "#ffffff") == "#000000"
    assert ramp_color(1.0, "#000000", "#ffffff") == "#ffffff"
    assert ramp_color(0.5, "#000000", "#fefefe") == "#7f7f7f"


def test_heatmap_label_mismatch():
    with pytest.raises(ValueError):
        HeatmapSpec(np.zeros((2, 2)), ["a"], ["b", "c"])
