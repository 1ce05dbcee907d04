"""Foundation types: images, boxes, RNG streams, parameter stores, files."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hallucilab.core import (
    BBox,
    ChecksumError,
    Detection,
    ImagePlane,
    LossWeights,
    MalformedAnnotation,
    MissingPair,
    Modality,
    OutOfRange,
    PairedSample,
    ParamStore,
    ShapeMismatch,
    WrongChannelCount,
    derive_rng,
    load_checkpoint,
    load_png,
    on_u8_lattice,
    planes_equal,
    quantize_u8,
    read_annotations,
    save_checkpoint,
    save_png,
    write_annotations,
)

from conftest import make_plane


# ---------------------------------------------------------------------------
# Quantization and RNG


@given(st.lists(st.integers(0, 255), min_size=1, max_size=64))
@settings(max_examples=60, deadline=None)
def test_quantize_u8_is_identity_on_lattice(ks):
    arr = np.array(ks, dtype=np.float64) / 255.0
    q = quantize_u8(arr)
    assert np.array_equal(q, arr)
    assert on_u8_lattice(q)


def test_quantize_u8_rounds_to_nearest_level():
    arr = np.array([0.0, 1.0, 0.5, 0.001, 0.999])
    q = quantize_u8(arr)
    assert on_u8_lattice(q)
    assert np.all(np.abs(q - arr) <= 0.5 / 255.0 + 1e-15)


def test_quantize_u8_idempotent(rng):
    arr = rng.random((17, 9))
    assert np.array_equal(quantize_u8(quantize_u8(arr)), quantize_u8(arr))


def test_derive_rng_reproducible_and_stream_independent():
    a1 = derive_rng(42, 7).random(8)
    a2 = derive_rng(42, 7).random(8)
    b = derive_rng(42, 8).random(8)
    c = derive_rng(43, 7).random(8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


# ---------------------------------------------------------------------------
# ImagePlane


def test_image_plane_validation():
    with pytest.raises(ShapeMismatch):
        ImagePlane(np.zeros((4, 4)), Modality.IR)
    with pytest.raises(WrongChannelCount):
        ImagePlane(np.zeros((4, 4, 2)), Modality.IR)
    with pytest.raises(OutOfRange):
        ImagePlane(np.full((4, 4, 1), 1.5), Modality.IR)
    with pytest.raises(OutOfRange):
        ImagePlane(np.full((4, 4, 1), np.nan), Modality.IR)


def test_image_plane_is_immutable(rng):
    plane = make_plane(rng)
    with pytest.raises(ValueError):
        plane.data[0, 0, 0] = 0.5


def test_image_plane_u8_roundtrip_is_exact(rng):
    plane = make_plane(rng, 20, 30, 3, Modality.RGB)
    back = ImagePlane.from_u8(plane.to_u8(), Modality.RGB)
    assert planes_equal(plane, back)


def test_planes_equal_requires_same_modality(rng):
    p = make_plane(rng)
    q = ImagePlane(p.data, Modality.HALLUCINATED)
    assert not planes_equal(p, q)
    assert planes_equal(p, ImagePlane(p.data, Modality.IR))


def test_png_roundtrip_bit_exact(tmp_path, rng):
    for channels, modality in ((1, Modality.IR), (3, Modality.RGB)):
        plane = make_plane(rng, 24, 18, channels, modality)
        path = tmp_path / f"img{channels}.png"
        save_png(plane, path)
        back = load_png(path, modality)
        assert planes_equal(plane, back)


def test_load_png_converts_channels_to_requested_modality(tmp_path, rng):
    plane = make_plane(rng, 8, 8, 3, Modality.RGB)
    save_png(plane, tmp_path / "rgb.png")
    as_ir = load_png(tmp_path / "rgb.png", Modality.IR)
    assert as_ir.channels == 1 and as_ir.modality is Modality.IR
    gray = make_plane(rng, 8, 8, 1, Modality.IR)
    save_png(gray, tmp_path / "gray.png")
    as_rgb = load_png(tmp_path / "gray.png", Modality.RGB)
    assert as_rgb.channels == 3
    assert np.array_equal(as_rgb.data[:, :, 0], gray.data[:, :, 0])


# ---------------------------------------------------------------------------
# Boxes, detections, samples


def test_bbox_validation_and_corners():
    b = BBox(2.0, 3.0, 4.0, 5.0, 1)
    assert (b.x2, b.y2) == (6.0, 8.0)
    with pytest.raises(OutOfRange):
        BBox(0, 0, 0.0, 5, 1)
    with pytest.raises(OutOfRange):
        BBox(0, 0, 5, -1, 1)
    with pytest.raises(OutOfRange):
        BBox(float("inf"), 0, 5, 5, 1)
    with pytest.raises(OutOfRange):
        BBox(0, 0, 5, 5, 0)  # class 0 is reserved for background


def test_detection_score_validation():
    Detection(BBox(0, 0, 1, 1, 1), 0.0)
    Detection(BBox(0, 0, 1, 1, 1), 1.0)
    with pytest.raises(OutOfRange):
        Detection(BBox(0, 0, 1, 1, 1), 1.5)
    with pytest.raises(OutOfRange):
        Detection(BBox(0, 0, 1, 1, 1), float("nan"))


def test_paired_sample_validation(rng):
    ir = make_plane(rng, 32, 32, 1, Modality.IR)
    rgb = make_plane(rng, 32, 32, 3, Modality.RGB)
    boxes = (BBox(4, 4, 8, 12, 1),)
    s = PairedSample(sample_id=0, ir=ir, rgb=rgb, boxes=boxes)
    assert s.sample_id == 0
    with pytest.raises(WrongChannelCount):
        PairedSample(0, ir=rgb, rgb=rgb, boxes=boxes)  # wrong modality for ir
    with pytest.raises(WrongChannelCount):
        PairedSample(0, ir=make_plane(rng, 32, 32, 3, Modality.IR), rgb=rgb, boxes=boxes)
    with pytest.raises(ShapeMismatch):
        PairedSample(0, ir=make_plane(rng, 16, 32), rgb=rgb, boxes=boxes)
    with pytest.raises(OutOfRange):
        # Box entirely outside the canvas.
        PairedSample(0, ir=ir, rgb=rgb, boxes=(BBox(100, 100, 5, 5, 1),))


def test_loss_weights_validation_and_scaling():
    w = LossWeights(0.01, 0.1, 0.1)
    doubled = w.scaled(2.0)
    assert (doubled.lambda_cls, doubled.lambda_reg, doubled.lambda_star) == (
        0.02,
        0.2,
        0.2,
    )
    with pytest.raises(OutOfRange):
        LossWeights(-0.1, 1, 1)
    with pytest.raises(OutOfRange):
        LossWeights(0, 0, 0)  # all-zero objective is degenerate


# ---------------------------------------------------------------------------
# Annotations


def test_annotations_roundtrip(tmp_path, rng):
    ir = make_plane(rng, 32, 32, 1, Modality.IR)
    rgb = make_plane(rng, 32, 32, 3, Modality.RGB)
    samples = [
        PairedSample(3, ir, rgb, (BBox(1.5, 2.25, 8.0, 10.0, 1),)),
        PairedSample(9, ir, rgb, (BBox(4, 4, 6, 6, 1), BBox(10, 10, 12, 14, 1))),
    ]
    path = tmp_path / "annotations.jsonl"
    write_annotations(path, samples)
    table = read_annotations(path)
    assert set(table) == {3, 9}
    assert table[3][0].x == 1.5 and table[3][0].y == 2.25
    assert len(table[9]) == 2
    assert table[9][1].w == 12.0


def test_read_annotations_rejects_garbage(tmp_path):
    path = tmp_path / "annotations.jsonl"
    path.write_text('{"sample_id": 1}\n')
    with pytest.raises(MalformedAnnotation):
        read_annotations(path)
    path.write_text("not json\n")
    with pytest.raises(MalformedAnnotation):
        read_annotations(path)
    path.write_text('{"sample_id": 1, "cls": 1, "x": 0, "y": 0, "w": -3, "h": 2}\n')
    with pytest.raises(MalformedAnnotation):
        read_annotations(path)
    with pytest.raises(MalformedAnnotation):
        read_annotations(tmp_path / "absent.jsonl")


def test_read_annotations_groups_boxes_by_sample_in_file_order(tmp_path):
    path = tmp_path / "annotations.jsonl"
    path.write_text(
        '{"sample_id": 2, "cls": 1, "x": 0, "y": 0, "w": 3, "h": 2}\n'
        '{"sample_id": 1, "cls": 1, "x": 5, "y": 5, "w": 4, "h": 4}\n'
        '{"sample_id": 2, "cls": 1, "x": 9, "y": 9, "w": 1, "h": 1}\n'
    )
    table = read_annotations(path)
    assert [b.x for b in table[2]] == [0.0, 9.0]
    assert len(table[1]) == 1


# ---------------------------------------------------------------------------
# ParamStore and checkpoints


def _store(rng: np.random.Generator) -> ParamStore:
    return ParamStore(
        {
            "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "a.bias": rng.standard_normal(3).astype(np.float32),
        }
    )


def test_param_store_behaves_like_ordered_mapping(rng):
    store = _store(rng)
    assert list(store) == ["a.weight", "a.bias"]
    assert store.total_size == 15
    assert store["a.bias"].shape == (3,)


def test_param_store_digest_sensitivity(rng):
    store = _store(rng)
    same = ParamStore({k: store[k].copy() for k in store})
    assert store.digest == same.digest
    bumped = store.with_entry("a.bias", store["a.bias"] + 1e-7)
    assert bumped.digest != store.digest
    renamed = ParamStore({k + "x": store[k] for k in store})
    assert renamed.digest != store.digest


def test_param_store_arrays_are_frozen(rng):
    store = _store(rng)
    with pytest.raises(ValueError):
        store["a.bias"][0] = 1.0


def test_checkpoint_roundtrip(tmp_path, rng):
    store = _store(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, {"kind": "detector", "width": 4})
    back, desc = load_checkpoint(path)
    assert back.digest == store.digest
    assert desc == {"kind": "detector", "width": 4}


def test_checkpoint_detects_corruption(tmp_path, rng):
    store = _store(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, {"kind": "detector"})
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation_and_bad_magic(tmp_path, rng):
    store = _store(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, {"kind": "detector"})
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
