"""Paired IR/RGB scene generation and dataset loading.

Each sample is fully determined by (config seed, sample id) through one
counter-based stream, so regenerating any subset is reproducible and test
ids never collide with train ids. Scenes are desk-scale: dim RGB frames
with dark, hue-distinct upright subjects on a light textured background,
and IR frames where subjects glow bright on a dark background alongside
equally bright horizontally-elongated clutter that carries no box. The
clutter is the modality trap: intensity alone cannot separate subjects in
IR, while shape and hue do in RGB.

Each IR body renders as a hot core at the true extent wrapped in a
cooler halo that blooms well past it with a diffuse thermal edge, while
ground-truth boxes keep the body extent that the RGB plane shows. The
halo-to-background contrast dominates the apparent IR silhouette, so a
translation that copies IR intensity over-states every box below the
0.5-IoU matching threshold; faithful localization requires suppressing
the halo relative to the core, which the core/halo intensity gap leaves
recoverable from the IR plane alone.

Both planes are quantized to the 8-bit lattice, so PNG export followed by
reload is bit-exact and generated and external datasets are
interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    BBox,
    ConfigError,
    EmptyDataset,
    ImagePlane,
    MissingPair,
    Modality,
    PairedSample,
    STREAM_SUBSET,
    BadFraction,
    derive_rng,
    load_png,
    quantize_u8,
    read_annotations,
    save_png,
    write_annotations,
)

TEST_ID_BASE = 1_000_000

# Thermal halo: a cooler glow extends this factor past the body ellipse
# with a wider anti-aliasing edge than the crisp visible-light boundary.
# An uncorrected bloom factor k leaves box IoU near 1/k^2, so this range
# keeps apparent-extent boxes decisively below the 0.5 matching threshold.
_BLOOM_RANGE = (1.5, 1.9)
_HALO_GAIN = 0.85
_IR_EDGE_PX = 2.5
_RGB_EDGE_PX = 1.5

_PALETTE = (
    (0.72, 0.18, 0.16),
    (0.16, 0.22, 0.70),
    (0.62, 0.14, 0.55),
    (0.12, 0.50, 0.20),
    (0.70, 0.45, 0.12),
)


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (96, 128)
    n_persons: tuple[int, int] = (1, 3)
    n_distractors: tuple[int, int] = (1, 3)
    light_level: float = 0.35
    noise_sigma: float = 0.02
    seed: int = 1234

    def __post_init__(self) -> None:
        h, w = self.image_size
        if not (isinstance(h, int) and isinstance(w, int)) or h < 32 or w < 32:
            raise ConfigError(f"image_size must be integer (H, W) >= 32, got {self.image_size}")
        for name in ("n_persons", "n_distractors"):
            lo, hi = getattr(self, name)
            if not (isinstance(lo, int) and isinstance(hi, int)) or lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be an integer range (lo, hi), got {(lo, hi)}")
        if self.n_persons[0] < 1:
            raise ConfigError("every sample needs at least one annotated subject")
        if not 0.0 <= self.light_level <= 1.0:
            raise ConfigError(f"light_level must lie in [0, 1], got {self.light_level}")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise ConfigError(f"noise_sigma must lie in [0, 0.2], got {self.noise_sigma}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "n_persons": list(self.n_persons),
            "n_distractors": list(self.n_distractors),
            "light_level": self.light_level,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(
            image_size=tuple(d.get("image_size", (96, 128))),
            n_persons=tuple(d.get("n_persons", (1, 3))),
            n_distractors=tuple(d.get("n_distractors", (1, 3))),
            light_level=float(d.get("light_level", 0.35)),
            noise_sigma=float(d.get("noise_sigma", 0.02)),
            seed=int(d.get("seed", 1234)),
        )


def _bilinear_upsample(coarse: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    ch, cw = coarse.shape
    ys = np.clip((np.arange(h) + 0.5) / h * ch - 0.5, 0.0, ch - 1.0)
    xs = np.clip((np.arange(w) + 0.5) / w * cw - 0.5, 0.0, cw - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return (
        coarse[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + coarse[np.ix_(y0, x1)] * (1 - wy) * wx
        + coarse[np.ix_(y1, x0)] * wy * (1 - wx)
        + coarse[np.ix_(y1, x1)] * wy * wx
    )


def _soft_ellipse(
    hw: tuple[int, int], cx: float, cy: float, a: float, b: float, edge_px: float = _RGB_EDGE_PX
) -> np.ndarray:
    """Anti-aliased ellipse membership in [0, 1] with an ~edge_px wide rim."""
    h, w = hw
    yy = (np.arange(h, dtype=np.float64) + 0.5 - cy) / b
    xx = (np.arange(w, dtype=np.float64) + 0.5 - cx) / a
    r = np.sqrt(yy[:, None] ** 2 + xx[None, :] ** 2)
    edge = edge_px / min(a, b)
    return np.clip((1.0 - r) / edge, 0.0, 1.0)


def generate_sample(cfg: SceneConfig, sample_id: int) -> PairedSample:
    """One paired scene, a pure function of (cfg.seed, sample_id)."""
    if not isinstance(sample_id, (int, np.integer)) or sample_id < 0:
        raise ConfigError(f"sample_id must be a non-negative integer, got {sample_id}")
    rng = derive_rng(cfg.seed, int(sample_id))
    h, w = cfg.image_size

    bg_gray = _bilinear_upsample(rng.uniform(0.55, 0.80, size=(6, 8)), (h, w))
    bg_ir = _bilinear_upsample(rng.uniform(0.05, 0.16, size=(6, 8)), (h, w))
    rgb = np.stack([bg_gray * 0.97, bg_gray, bg_gray * 0.90], axis=2)
    ir = bg_ir.copy()

    n_p = int(rng.integers(cfg.n_persons[0], cfg.n_persons[1] + 1))
    n_d = int(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1))

    persons = []
    for _ in range(n_p):
        height_px = rng.uniform(26.0, 46.0)
        aspect = rng.uniform(0.36, 0.55)
        width_px = height_px * aspect
        cx = rng.uniform(0.55 * width_px + 2.0, w - 0.55 * width_px - 2.0)
        cy = rng.uniform(0.40 * height_px + 2.0, h - 0.40 * height_px - 2.0)
        color = _PALETTE[int(rng.integers(len(_PALETTE)))]
        glow = rng.uniform(0.75, 0.95)
        persons.append((cx, cy, width_px / 2.0, height_px / 2.0, color, glow))

    distractors = []
    for _ in range(n_d):
        width_px = rng.uniform(26.0, 46.0)
        aspect = rng.uniform(0.36, 0.55)
        height_px = width_px * aspect
        cx = rng.uniform(0.55 * width_px + 2.0, w - 0.55 * width_px - 2.0)
        cy = rng.uniform(0.40 * height_px + 2.0, h - 0.40 * height_px - 2.0)
        shade = rng.uniform(0.88, 1.06)
        glow = rng.uniform(0.75, 0.95)
        distractors.append((cx, cy, width_px / 2.0, height_px / 2.0, shade, glow))

    # Halo factors are drawn after all body parameters so the RGB plane is
    # unaffected by the IR rendering model.
    bloom_d = rng.uniform(*_BLOOM_RANGE, size=n_d)
    bloom_p = rng.uniform(*_BLOOM_RANGE, size=n_p)

    # Clutter first, subjects on top. IR composites the cool halo under the
    # hot core so the true boundary stays visible inside the bloom.
    for (cx, cy, a, b, shade, glow), k in zip(distractors, bloom_d):
        alpha = _soft_ellipse((h, w), cx, cy, a, b)
        for c in range(3):
            rgb[:, :, c] = rgb[:, :, c] * (1 - alpha) + (bg_gray * shade) * alpha
        halo = _soft_ellipse((h, w), cx, cy, a * k, b * k, edge_px=_IR_EDGE_PX)
        ir = ir * (1 - halo) + (glow * _HALO_GAIN) * halo
        ir = ir * (1 - alpha) + glow * alpha
    boxes = []
    for (cx, cy, a, b, color, glow), k in zip(persons, bloom_p):
        alpha = _soft_ellipse((h, w), cx, cy, a, b)
        for c in range(3):
            rgb[:, :, c] = rgb[:, :, c] * (1 - alpha) + color[c] * alpha
        halo = _soft_ellipse((h, w), cx, cy, a * k, b * k, edge_px=_IR_EDGE_PX)
        ir = ir * (1 - halo) + (glow * _HALO_GAIN) * halo
        ir = ir * (1 - alpha) + glow * alpha
        x0, y0 = max(cx - a, 0.0), max(cy - b, 0.0)
        x1, y1 = min(cx + a, float(w)), min(cy + b, float(h))
        boxes.append(BBox(x0, y0, x1 - x0, y1 - y0, 1))

    rgb *= 0.15 + 0.85 * cfg.light_level
    ir = ir + rng.normal(0.0, cfg.noise_sigma, size=(h, w)) if cfg.noise_sigma > 0 else ir
    ir = np.clip(ir, 0.0, 1.0)
    rgb = np.clip(rgb, 0.0, 1.0)

    return PairedSample(
        sample_id=int(sample_id),
        ir=ImagePlane(quantize_u8(ir)[:, :, None], Modality.IR),
        rgb=ImagePlane(quantize_u8(rgb), Modality.RGB),
        boxes=tuple(boxes),
        seed=cfg.seed,
    )


@dataclass(frozen=True)
class Dataset:
    samples: tuple[PairedSample, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ConfigError("dataset sample ids must be unique")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> PairedSample:
        return self.samples[i]

    @property
    def ids(self) -> list[int]:
        return [s.sample_id for s in self.samples]


def generate_dataset(cfg: SceneConfig, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    """Train samples use ids 0..n_train-1; test samples start at a fixed
    offset, so the test set is identical regardless of train size."""
    if n_train < 1 or n_test < 0:
        raise ConfigError(f"need n_train >= 1 and n_test >= 0, got {n_train}, {n_test}")
    if n_train > TEST_ID_BASE:
        raise ConfigError(f"n_train must not exceed {TEST_ID_BASE}")
    train = Dataset(tuple(generate_sample(cfg, i) for i in range(n_train)))
    test = Dataset(tuple(generate_sample(cfg, TEST_ID_BASE + i) for i in range(n_test)))
    return train, test


def nested_subset_indices(n: int, fraction: float, seed: int) -> list[int]:
    """First ceil(fraction*n) entries of one fixed permutation, sorted, so
    subsets nest across fractions for a given seed."""
    if not 0.0 < fraction <= 1.0:
        raise BadFraction(f"fraction must lie in (0, 1], got {fraction}")
    keep = int(np.ceil(fraction * n))
    perm = derive_rng(seed, STREAM_SUBSET).permutation(n)
    return sorted(perm[:keep].tolist())


def subset_fraction(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Deterministic uniform subsample of ceil(fraction * len) samples;
    smaller fractions give subsets of larger ones at the same seed."""
    keep = nested_subset_indices(len(ds), fraction, seed)
    return Dataset(tuple(ds.samples[i] for i in keep))


def export_dataset(ds: Dataset, root: str | Path) -> None:
    """Write {id}_ir.png, {id}_rgb.png, and annotations.jsonl under root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in ds:
        save_png(s.ir, root / f"{s.sample_id}_ir.png")
        save_png(s.rgb, root / f"{s.sample_id}_rgb.png")
    write_annotations(root / "annotations.jsonl", list(ds))


def load_external(root: str | Path, annotations: str | Path | None = None) -> Dataset:
    """Load a dataset laid out as export_dataset writes it. Every annotated
    sample id must have both PNGs; pairing is strict."""
    root = Path(root)
    ann_path = Path(annotations) if annotations is not None else root / "annotations.jsonl"
    grouped = read_annotations(ann_path)
    samples = []
    for sid in sorted(grouped):
        ir_path = root / f"{sid}_ir.png"
        rgb_path = root / f"{sid}_rgb.png"
        missing = [p.name for p in (ir_path, rgb_path) if not p.exists()]
        if missing:
            raise MissingPair(f"sample {sid}: missing {', '.join(missing)} under {root}")
        samples.append(
            PairedSample(
                sample_id=sid,
                ir=load_png(ir_path, Modality.IR),
                rgb=load_png(rgb_path, Modality.RGB),
                boxes=tuple(grouped[sid]),
                seed=0,
            )
        )
    if not samples:
        raise EmptyDataset(f"no samples found under {root}")
    return Dataset(tuple(samples))
