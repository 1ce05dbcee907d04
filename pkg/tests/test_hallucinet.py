"""Translation network: shapes, capacity, invariances, persistence."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from hallucilab.core import (
    ConfigError,
    ImagePlane,
    Modality,
    WrongChannelCount,
    derive_rng,
)
from hallucilab.hallucinet import (
    HalluciNet,
    HalluciNetConfig,
    Translator,
    count_params,
    hallucinate,
    init_translator,
    load_translator,
    reconstruction_loss,
    save_translator,
)

from conftest import make_plane


def test_config_validation():
    with pytest.raises(ConfigError):
        HalluciNetConfig(encoder_widths=(8,))
    with pytest.raises(ConfigError):
        HalluciNetConfig(encoder_widths=(8, 0))
    assert HalluciNetConfig(encoder_widths=(8, 16, 32)).depth == 2


def test_param_count_matches_hand_derivation_width_one():
    """Width-(1,1) network, counted layer by layer:

    encoder block (1->1): two 3x3 convs (9+1 each) + two norms (1+1 each) = 24
    down block (1->1): same = 24
    up transpose conv (1->1, 2x2): 4 + 1 = 5
    attention gate (skip 1, gate 1): w_x 1x1 no bias = 1, w_g 1x1 + bias = 2,
      psi 1x1 + bias = 2 -> 5
    decoder block (2->1): (18+1) + (1+1) + (9+1) + (1+1) = 33
    head 1x1 conv (1->3): 3 + 3 = 6
    total: 24 + 24 + 5 + 5 + 33 + 6 = 97 (92 without the gate)
    """
    assert count_params(HalluciNetConfig(encoder_widths=(1, 1), use_attention=True)) == 97
    assert count_params(HalluciNetConfig(encoder_widths=(1, 1), use_attention=False)) == 92


def test_param_count_matches_module_and_store():
    cfg = HalluciNetConfig(encoder_widths=(4, 8))
    store = init_translator(cfg, derive_rng(1, 0))
    net = HalluciNet(cfg)
    assert count_params(cfg) == store.total_size
    assert count_params(cfg) == sum(p.numel() for p in net.parameters())


def test_capacity_grows_with_width():
    small = count_params(HalluciNetConfig(encoder_widths=(8, 16, 32)))
    default = count_params(HalluciNetConfig(encoder_widths=(16, 32, 64)))
    large = count_params(HalluciNetConfig(encoder_widths=(24, 48, 96)))
    assert small < default < large


def test_output_shape_and_range_with_odd_sizes(rng):
    cfg = HalluciNetConfig(encoder_widths=(4, 8, 8))
    tr = Translator(cfg, init_translator(cfg, derive_rng(2, 0)))
    for h, w in ((50, 35), (32, 32), (33, 63)):
        plane = make_plane(rng, h, w)
        out = hallucinate(tr, plane)
        assert (out.height, out.width, out.channels) == (h, w, 3)
        assert out.modality is Modality.HALLUCINATED
        assert out.data.min() > 0.0 and out.data.max() < 1.0  # sigmoid is open


def test_hallucinate_rejects_3ch_input(rng):
    cfg = HalluciNetConfig(encoder_widths=(2, 4))
    tr = Translator(cfg, init_translator(cfg, derive_rng(2, 0)))
    with pytest.raises(WrongChannelCount):
        hallucinate(tr, make_plane(rng, 16, 16, 3, Modality.RGB))


def test_translator_call_is_deterministic(rng):
    cfg = HalluciNetConfig(encoder_widths=(4, 8))
    tr = Translator(cfg, init_translator(cfg, derive_rng(4, 0)))
    plane = make_plane(rng, 24, 24)
    a = tr(plane)
    b = tr(plane)
    assert np.array_equal(a.data, b.data)


def test_scale_map_near_invariance_vs_polarity_gap(rng):
    """The normalization layers absorb per-image intensity rescaling almost
    exactly, but polarity reversal is outside the invariance group: the
    translator must actually learn the IR -> RGB appearance flip."""
    cfg = HalluciNetConfig(encoder_widths=(4, 8))
    tr = Translator(cfg, init_translator(cfg, derive_rng(5, 0)))
    x = torch.from_numpy(rng.random((1, 1, 48, 48), dtype=np.float64).astype(np.float32))
    with torch.no_grad():
        base = tr.module(x)
        scaled = tr.module(0.5 * x)
        flipped = tr.module(1.0 - x)
    assert float((base - scaled).abs().max()) < 1e-3
    assert float((base - flipped).abs().max()) > 1e-2


def test_attention_gate_toggle_changes_capacity_not_interface(rng):
    plain = HalluciNetConfig(encoder_widths=(4, 8), use_attention=False)
    gated = HalluciNetConfig(encoder_widths=(4, 8), use_attention=True)
    assert count_params(gated) > count_params(plain)
    for cfg in (plain, gated):
        tr = Translator(cfg, init_translator(cfg, derive_rng(6, 0)))
        out = hallucinate(tr, make_plane(rng, 20, 20))
        assert out.channels == 3


def test_reconstruction_loss_hand_value_and_validation(rng):
    a = ImagePlane(np.full((4, 4, 3), 0.25), Modality.HALLUCINATED)
    b = ImagePlane(np.full((4, 4, 3), 0.75), Modality.RGB)
    assert reconstruction_loss(a, b) == pytest.approx(0.5, abs=1e-15)
    ta = torch.full((1, 3, 4, 4), 0.25)
    tb = torch.full((1, 3, 4, 4), 0.75)
    assert float(reconstruction_loss(ta, tb)) == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ConfigError):
        reconstruction_loss(a, ImagePlane(np.zeros((5, 5, 3)), Modality.RGB))


def test_translator_checkpoint_roundtrip(tmp_path, rng):
    cfg = HalluciNetConfig(encoder_widths=(4, 8), use_attention=False)
    tr = Translator(cfg, init_translator(cfg, derive_rng(7, 0)))
    path = tmp_path / "tr.ckpt"
    save_translator(path, tr)
    back = load_translator(path)
    assert back.digest == tr.digest
    assert back.config == cfg
    plane = make_plane(rng, 16, 16)
    assert np.array_equal(back(plane).data, tr(plane).data)


def test_load_translator_rejects_detector_checkpoint(tmp_path, tiny_det_cfg):
    from hallucilab.detector import Detector, init_detector, save_detector

    det = Detector(tiny_det_cfg, init_detector(tiny_det_cfg, derive_rng(8, 0)))
    path = tmp_path / "d.ckpt"
    save_detector(path, det)
    with pytest.raises(ConfigError):
        load_translator(path)
