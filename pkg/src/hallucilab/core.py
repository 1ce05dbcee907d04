"""Shared domain types, deterministic RNG derivation, and file formats.

Images are stored as float64 arrays in [0, 1] with shape (H, W, C). Most
planes in practice lie exactly on the 8-bit lattice {k/255}: the synthetic
generator quantizes to it and PNG import/export is defined on it, which is
what makes export -> reload bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image


# ---------------------------------------------------------------------------
# Errors


class HalluciLabError(Exception):
    """Base class for all package-specific failures."""


class ShapeMismatch(HalluciLabError):
    pass


class WrongChannelCount(HalluciLabError):
    pass


class OutOfRange(HalluciLabError):
    pass


class NonPositiveSigma(HalluciLabError):
    pass


class NoGroundTruth(HalluciLabError):
    pass


class EmptyList(HalluciLabError):
    pass


class EmptyDataset(HalluciLabError):
    pass


class MissingPair(HalluciLabError):
    pass


class MalformedAnnotation(HalluciLabError):
    pass


class BadFraction(HalluciLabError):
    pass


class FrozenParamViolation(HalluciLabError):
    pass


class ChecksumError(HalluciLabError):
    pass


class ConfigError(HalluciLabError):
    pass


class TrainingDiverged(HalluciLabError):
    pass


# ---------------------------------------------------------------------------
# Deterministic RNG derivation

# Stream ids below 2**40 are reserved for per-sample generator streams keyed
# by sample id; procedural streams live above the offset so a user picking
# equal master seeds for dataset and training cannot collide streams.
_STREAM_BASE = 1 << 40
STREAM_INIT = _STREAM_BASE + 1
STREAM_SHUFFLE = _STREAM_BASE + 2
STREAM_SPLIT = _STREAM_BASE + 3
STREAM_SUBSET = _STREAM_BASE + 4
STREAM_PROBE = _STREAM_BASE + 5


def derive_rng(master_seed: int, stream_id: int) -> np.random.Generator:
    """Independent, platform-stable generator for (master_seed, stream_id).

    Counter-based (Philox) so streams are independent by key, not by
    splitting state: the same pair always yields the same draws, distinct
    pairs yield unrelated streams.
    """
    for name, value in (("master_seed", master_seed), ("stream_id", stream_id)):
        if not isinstance(value, (int, np.integer)):
            raise ConfigError(f"{name} must be an integer, got {type(value).__name__}")
        if not 0 <= int(value) < 2 ** 64:
            raise ConfigError(f"{name} must be in [0, 2**64), got {value}")
    key = np.array([int(master_seed), int(stream_id)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# 8-bit lattice helpers


def quantize_u8(arr: np.ndarray) -> np.ndarray:
    """Round intensities to the nearest 8-bit lattice point k/255 (float64)."""
    k = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0.0, 255.0)
    return k / 255.0


def on_u8_lattice(arr: np.ndarray) -> bool:
    """True when every value is exactly an 8-bit lattice point."""
    a = np.asarray(arr, dtype=np.float64)
    k = np.rint(a * 255.0)
    if np.any(k < 0.0) or np.any(k > 255.0):
        return False
    return bool(np.array_equal(k / 255.0, a))


# ---------------------------------------------------------------------------
# Image planes


class Modality(str, Enum):
    IR = "ir"
    RGB = "rgb"
    HALLUCINATED = "hallucinated"


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """Immutable (H, W, C) float64 image with unit-interval intensities."""

    data: np.ndarray
    modality: Modality

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeMismatch(f"image data must be (H, W, C), got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise WrongChannelCount(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatch(f"degenerate image shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise OutOfRange("image intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise OutOfRange(
                f"image intensities must lie in [0, 1], got [{arr.min()}, {arr.max()}]"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_u8(self) -> np.ndarray:
        return np.clip(np.rint(self.data * 255.0), 0.0, 255.0).astype(np.uint8)

    @classmethod
    def from_u8(cls, arr: np.ndarray, modality: Modality) -> "ImagePlane":
        a = np.asarray(arr)
        if a.dtype != np.uint8:
            raise OutOfRange(f"expected uint8 array, got dtype {a.dtype}")
        if a.ndim == 2:
            a = a[:, :, None]
        return cls(a.astype(np.float64) / 255.0, modality)


def planes_equal(a: ImagePlane, b: ImagePlane) -> bool:
    return (
        a.modality == b.modality
        and a.data.shape == b.data.shape
        and bool(np.array_equal(a.data, b.data))
    )


def save_png(plane: ImagePlane, path: str | Path) -> None:
    """Write an 8-bit PNG; lossless for planes on the 8-bit lattice."""
    u8 = plane.to_u8()
    if plane.channels == 1:
        img = Image.fromarray(u8[:, :, 0], mode="L")
    else:
        img = Image.fromarray(u8, mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")


def load_png(path: str | Path, modality: Modality) -> ImagePlane:
    with Image.open(path) as img:
        modality = Modality(modality)
        if modality is Modality.IR:
            arr = np.asarray(img.convert("L"))
        else:
            arr = np.asarray(img.convert("RGB"))
    return ImagePlane.from_u8(arr, modality)


# ---------------------------------------------------------------------------
# Boxes, detections, samples


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner (x, y), extent (w, h), category cls.

    Categories are 1-based; 0 is reserved for background and never appears
    on an annotation.
    """

    x: float
    y: float
    w: float
    h: float
    cls: int

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise OutOfRange(f"box {name} must be finite, got {v}")
            object.__setattr__(self, name, float(v))
        if self.w <= 0.0 or self.h <= 0.0:
            raise OutOfRange(f"box extent must be positive, got w={self.w}, h={self.h}")
        if not isinstance(self.cls, (int, np.integer)) or int(self.cls) < 1:
            raise OutOfRange(f"box cls must be a positive integer, got {self.cls!r}")
        object.__setattr__(self, "cls", int(self.cls))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h


def bbox_area(box: BBox) -> float:
    return box.w * box.h


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise OutOfRange(f"detection score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "score", float(self.score))


@dataclass(frozen=True)
class PairedSample:
    """One co-registered IR/RGB pair with boxes shared across modalities."""

    sample_id: int
    ir: ImagePlane
    rgb: ImagePlane
    boxes: tuple[BBox, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ir.modality is not Modality.IR or self.ir.channels != 1:
            raise WrongChannelCount("ir plane must be single-channel with modality ir")
        if self.rgb.modality is not Modality.RGB or self.rgb.channels != 3:
            raise WrongChannelCount("rgb plane must be 3-channel with modality rgb")
        if (self.ir.height, self.ir.width) != (self.rgb.height, self.rgb.width):
            raise ShapeMismatch(
                f"ir and rgb planes must share dimensions, got "
                f"{(self.ir.height, self.ir.width)} vs {(self.rgb.height, self.rgb.width)}"
            )
        object.__setattr__(self, "boxes", tuple(self.boxes))
        h, w = self.ir.height, self.ir.width
        for b in self.boxes:
            if b.x >= w or b.y >= h or b.x2 <= 0.0 or b.y2 <= 0.0:
                raise OutOfRange(f"box {b} does not intersect the {h}x{w} canvas")


# ---------------------------------------------------------------------------
# Loss weights


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three detection-loss terms (classification, box
    regression, centerness). Defaults are the strongest anchor-free row of
    the weighting ablation grid."""

    lambda_cls: float = 0.01
    lambda_reg: float = 0.1
    lambda_star: float = 0.1

    def __post_init__(self) -> None:
        vals = (self.lambda_cls, self.lambda_reg, self.lambda_star)
        for name, v in zip(("lambda_cls", "lambda_reg", "lambda_star"), vals):
            if not np.isfinite(v) or v < 0.0:
                raise OutOfRange(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, float(v))
        if all(v == 0.0 for v in vals):
            raise OutOfRange("at least one loss weight must be strictly positive")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.lambda_cls * k, self.lambda_reg * k, self.lambda_star * k)


# ---------------------------------------------------------------------------
# Annotations (JSONL interchange)

_ANN_KEYS = ("sample_id", "cls", "x", "y", "w", "h")


def write_annotations(path: str | Path, samples: Sequence[PairedSample]) -> None:
    """One JSON object per box: {"sample_id", "cls", "x", "y", "w", "h"}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        for b in s.boxes:
            lines.append(
                json.dumps(
                    {"sample_id": s.sample_id, "cls": b.cls, "x": b.x, "y": b.y, "w": b.w, "h": b.h}
                )
            )
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_annotations(path: str | Path) -> dict[int, list[BBox]]:
    """Parse JSONL annotations; boxes grouped by sample id in file order."""
    path = Path(path)
    if not path.exists():
        raise MalformedAnnotation(f"annotation file not found: {path}")
    grouped: dict[int, list[BBox]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedAnnotation(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or set(obj) != set(_ANN_KEYS):
                raise MalformedAnnotation(
                    f"{path}:{lineno}: expected keys {list(_ANN_KEYS)}, got {sorted(obj) if isinstance(obj, dict) else type(obj).__name__}"
                )
            if not isinstance(obj["sample_id"], int) or isinstance(obj["sample_id"], bool):
                raise MalformedAnnotation(f"{path}:{lineno}: sample_id must be an integer")
            if not isinstance(obj["cls"], int) or isinstance(obj["cls"], bool):
                raise MalformedAnnotation(f"{path}:{lineno}: cls must be an integer")
            try:
                box = BBox(obj["x"], obj["y"], obj["w"], obj["h"], obj["cls"])
            except (OutOfRange, TypeError) as exc:
                raise MalformedAnnotation(f"{path}:{lineno}: {exc}") from exc
            grouped.setdefault(obj["sample_id"], []).append(box)
    if not grouped:
        raise EmptyDataset(f"annotation file {path} contains no boxes")
    return grouped


# ---------------------------------------------------------------------------
# Parameter store and checkpoints

_CKPT_MAGIC = b"HLPS"
_CKPT_VERSION = 1


class ParamStore(Mapping):
    """Ordered, immutable mapping of parameter names to float32 arrays.

    The digest is a sha256 over names, shapes, and little-endian payloads in
    insertion order, so it changes iff any entry (or the layout) changes.
    """

    def __init__(self, entries: Mapping[str, np.ndarray]):
        store: dict[str, np.ndarray] = {}
        for name, arr in entries.items():
            if not isinstance(name, str) or not name:
                raise ConfigError(f"parameter name must be a non-empty string, got {name!r}")
            a = np.ascontiguousarray(np.asarray(arr), dtype=np.float32)
            if not np.all(np.isfinite(a)):
                raise OutOfRange(f"parameter {name!r} contains non-finite values")
            a = a.copy()
            a.flags.writeable = False
            store[name] = a
        if not store:
            raise EmptyList("a ParamStore must hold at least one entry")
        self._store = store
        self._digest: str | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self._store[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._store)

    def __len__(self) -> int:
        return len(self._store)

    @property
    def total_size(self) -> int:
        return sum(int(a.size) for a in self._store.values())

    @property
    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256()
            for name, arr in self._store.items():
                h.update(name.encode("utf-8"))
                h.update(struct.pack("<B", arr.ndim))
                h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
                h.update(arr.astype("<f4", copy=False).tobytes())
            self._digest = h.hexdigest()
        return self._digest

    def with_entry(self, name: str, arr: np.ndarray) -> "ParamStore":
        if name not in self._store:
            raise ConfigError(f"unknown parameter {name!r}")
        entries = dict(self._store)
        if np.asarray(arr).shape != entries[name].shape:
            raise ShapeMismatch(
                f"replacement for {name!r} has shape {np.asarray(arr).shape}, "
                f"expected {entries[name].shape}"
            )
        entries[name] = np.asarray(arr, dtype=np.float32)
        return ParamStore(entries)


def save_checkpoint(path: str | Path, store: ParamStore, descriptor: dict) -> None:
    """Single binary file: magic, version byte, JSON descriptor, entries,
    and an embedded sha256 digest of everything after the magic."""
    payload = bytearray()
    payload += struct.pack("<B", _CKPT_VERSION)
    meta = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    payload += struct.pack("<I", len(meta))
    payload += meta
    payload += struct.pack("<I", len(store))
    for name, arr in store.items():
        nb = name.encode("utf-8")
        payload += struct.pack("<H", len(nb))
        payload += nb
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.astype("<f4", copy=False).tobytes()
    digest = hashlib.sha256(bytes(payload)).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(bytes(payload))
        fh.write(digest)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(_CKPT_MAGIC) + 1 + 32 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint file")
    payload, stored_digest = raw[len(_CKPT_MAGIC) : -32], raw[-32:]
    if hashlib.sha256(payload).digest() != stored_digest:
        raise ChecksumError(f"{path}: embedded digest mismatch (corrupt file)")
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(payload):
            raise ChecksumError(f"{path}: truncated checkpoint")
        chunk = payload[off : off + n]
        off += n
        return chunk

    (version,) = struct.unpack("<B", take(1))
    if version != _CKPT_VERSION:
        raise ChecksumError(f"{path}: unsupported checkpoint format version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    descriptor = json.loads(take(meta_len).decode("utf-8"))
    (n_entries,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        entries[name] = data.astype(np.float32)
    if off != len(payload):
        raise ChecksumError(f"{path}: trailing bytes in checkpoint")
    return ParamStore(entries), descriptor
