"""Qualitative panels and sweep plots: deterministic pixels, exact data."""

from __future__ import annotations

import pytest

from hallucilab.core import derive_rng
from hallucilab.detector import Detector, init_detector
from hallucilab.panel import read_plot_points, render_panel, render_sweep_plot


def test_sweep_plot_embeds_exact_points(tmp_path):
    series = {
        "seed0": [(0.1, 0.1 + 0.2), (1.0, 0.9362056138327866)],
        "mean": [(0.1, 1.0 / 3.0), (1.0, 0.95)],
    }
    path = tmp_path / "plot.png"
    render_sweep_plot(series, path, "train fraction")
    points = read_plot_points(path)
    assert points == {k: [list(p) for p in sorted(v)] for k, v in series.items()}


def test_sweep_plot_rerenders_byte_identically(tmp_path):
    series = {"seed0": [(0.0, 0.25), (0.5, 0.5), (1.0, 0.75)]}
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    render_sweep_plot(series, a, "x")
    render_sweep_plot(series, b, "x")
    assert a.read_bytes() == b.read_bytes()


def test_sweep_plot_rejects_empty_series(tmp_path):
    with pytest.raises(ValueError):
        render_sweep_plot({}, tmp_path / "p.png", "x")
    with pytest.raises(ValueError):
        render_sweep_plot({"s": []}, tmp_path / "p.png", "x")


def test_panel_renders_deterministically(tmp_path, tiny_data, tiny_det_cfg):
    _, test = tiny_data
    det = Detector(tiny_det_cfg, init_detector(tiny_det_cfg, derive_rng(3, 0)))
    rows = [
        ("rgb + ground truth", "rgb_gt", None, None),
        ("no adaptation", "pred", None, det),
    ]
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    render_panel(test[:2], rows, a)
    render_panel(test[:2], rows, b)
    assert a.read_bytes() == b.read_bytes()
    assert a.stat().st_size > 500


def test_panel_validates_inputs(tmp_path, tiny_data):
    _, test = tiny_data
    with pytest.raises(ValueError):
        render_panel([], [("r", "rgb_gt", None, None)], tmp_path / "p.png")
    with pytest.raises(ValueError):
        render_panel(test[:1], [("r", "heatmap", None, None)], tmp_path / "p.png")
