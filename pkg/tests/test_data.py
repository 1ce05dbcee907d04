"""Synthetic paired-scene generator and dataset plumbing."""

from __future__ import annotations

import numpy as np
import pytest

from hallucilab.core import (
    BadFraction,
    ConfigError,
    MalformedAnnotation,
    MissingPair,
    Modality,
    on_u8_lattice,
    planes_equal,
)
from hallucilab.data import (
    TEST_ID_BASE,
    Dataset,
    SceneConfig,
    export_dataset,
    generate_dataset,
    generate_sample,
    load_external,
    nested_subset_indices,
    subset_fraction,
)


def test_scene_config_validation_and_roundtrip():
    cfg = SceneConfig(image_size=(48, 64), light_level=0.5, seed=3)
    assert SceneConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        SceneConfig(image_size=(16, 64))
    with pytest.raises(ConfigError):
        SceneConfig(n_persons=(0, 2))
    with pytest.raises(ConfigError):
        SceneConfig(light_level=1.5)
    with pytest.raises(ConfigError):
        SceneConfig(noise_sigma=0.5)


def test_generation_is_bit_deterministic(tiny_scene):
    a = generate_sample(tiny_scene, 5)
    b = generate_sample(tiny_scene, 5)
    assert planes_equal(a.ir, b.ir)
    assert planes_equal(a.rgb, b.rgb)
    assert a.boxes == b.boxes
    c = generate_sample(SceneConfig(image_size=(48, 64), seed=78), 5)
    assert not planes_equal(a.ir, c.ir)


def test_samples_live_on_the_8bit_lattice(tiny_data):
    train, test = tiny_data
    for s in train[:3] + test[:2]:
        assert on_u8_lattice(s.ir.data)
        assert on_u8_lattice(s.rgb.data)


def test_sample_structure(tiny_scene, tiny_data):
    train, _ = tiny_data
    h, w = tiny_scene.image_size
    lo, hi = tiny_scene.n_persons
    for s in train:
        assert s.ir.channels == 1 and s.ir.modality is Modality.IR
        assert s.rgb.channels == 3 and s.rgb.modality is Modality.RGB
        assert (s.ir.height, s.ir.width) == (h, w)
        assert lo <= len(s.boxes) <= hi
        for b in s.boxes:
            assert b.cls == 1
            assert 0.0 <= b.x and b.x2 <= w
            assert 0.0 <= b.y and b.y2 <= h
            assert b.h > b.w  # upright subjects


def test_train_and_test_ids_never_collide(tiny_scene):
    train, test = generate_dataset(tiny_scene, 6, 3)
    train_ids = {s.sample_id for s in train}
    test_ids = {s.sample_id for s in test}
    assert train_ids == set(range(6))
    assert test_ids == {TEST_ID_BASE + i for i in range(3)}


def test_test_set_is_independent_of_train_size(tiny_scene):
    _, test_a = generate_dataset(tiny_scene, 4, 3)
    _, test_b = generate_dataset(tiny_scene, 9, 3)
    for sa, sb in zip(test_a, test_b):
        assert planes_equal(sa.ir, sb.ir)
        assert sa.boxes == sb.boxes


def test_light_level_dims_rgb_but_not_ir():
    dark_cfg = SceneConfig(image_size=(48, 64), light_level=0.05, seed=9)
    bright_cfg = SceneConfig(image_size=(48, 64), light_level=0.95, seed=9)
    dark = generate_sample(dark_cfg, 0)
    bright = generate_sample(bright_cfg, 0)
    assert bright.rgb.data.mean() > dark.rgb.data.mean() * 2.0
    assert planes_equal(dark.ir, bright.ir)


def test_ir_bright_subjects_on_dark_background(tiny_data):
    train, _ = tiny_data
    s = train[0]
    ys, xs = np.mgrid[0 : s.ir.height, 0 : s.ir.width]
    inside = np.zeros((s.ir.height, s.ir.width), dtype=bool)
    for b in s.boxes:
        inside |= (xs >= b.x) & (xs < b.x2) & (ys >= b.y) & (ys < b.y2)
    ir = s.ir.data[:, :, 0]
    assert ir[inside].mean() > ir[~inside].mean() + 0.1


def test_generate_dataset_validation(tiny_scene):
    with pytest.raises(ConfigError):
        generate_dataset(tiny_scene, 0, 2)
    with pytest.raises(ConfigError):
        generate_dataset(tiny_scene, 1, -1)


# ---------------------------------------------------------------------------
# Subsets


def test_subset_indices_are_nested_and_sized():
    for n in (7, 10, 33):
        prev: set[int] = set()
        for fraction in (0.1, 0.25, 0.5, 1.0):
            idx = nested_subset_indices(n, fraction, seed=4)
            assert len(idx) == int(np.ceil(fraction * n))
            assert sorted(idx) == idx
            assert prev <= set(idx)
            prev = set(idx)
        assert nested_subset_indices(n, 1.0, seed=4) == list(range(n))
    with pytest.raises(BadFraction):
        nested_subset_indices(10, 0.0, seed=4)
    with pytest.raises(BadFraction):
        nested_subset_indices(10, 1.2, seed=4)


def test_subset_fraction_respects_seed_and_nesting(tiny_data):
    train, _ = tiny_data
    ds = Dataset(tuple(train))
    small = subset_fraction(ds, 0.3, seed=5)
    large = subset_fraction(ds, 0.6, seed=5)
    assert {s.sample_id for s in small} <= {s.sample_id for s in large}
    other = subset_fraction(ds, 0.3, seed=6)
    assert {s.sample_id for s in small} != {s.sample_id for s in other}


# ---------------------------------------------------------------------------
# Export / import


def test_export_then_load_roundtrips_bit_exactly(tmp_path, tiny_data):
    train, _ = tiny_data
    ds = Dataset(tuple(train[:4]))
    export_dataset(ds, tmp_path / "out")
    back = load_external(tmp_path / "out")
    assert len(back) == 4
    by_id = {s.sample_id: s for s in back}
    for s in ds:
        r = by_id[s.sample_id]
        assert planes_equal(s.ir, r.ir)
        assert planes_equal(s.rgb, r.rgb)
        assert len(r.boxes) == len(s.boxes)
        for a, b in zip(s.boxes, r.boxes):
            assert (a.x, a.y, a.w, a.h, a.cls) == (b.x, b.y, b.w, b.h, b.cls)


def test_load_external_missing_pair_raises(tmp_path, tiny_data):
    train, _ = tiny_data
    export_dataset(Dataset(tuple(train[:2])), tmp_path / "out")
    (tmp_path / "out" / "1_rgb.png").unlink()
    with pytest.raises(MissingPair):
        load_external(tmp_path / "out")


def test_load_external_malformed_annotations(tmp_path, tiny_data):
    train, _ = tiny_data
    export_dataset(Dataset(tuple(train[:2])), tmp_path / "out")
    (tmp_path / "out" / "annotations.jsonl").write_text("garbage\n")
    with pytest.raises(MalformedAnnotation):
        load_external(tmp_path / "out")
