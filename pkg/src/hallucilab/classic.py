"""Classical pixel-manipulation translations and their composition algebra.

All ops take and return ImagePlane, act per channel, and are closed over
[0, 1]. Chains are addressed by canonical keys such as "invert+stretch";
the parallel combination stacks three fixed branches into an RGB-shaped
plane.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .core import (
    ConfigError,
    ImagePlane,
    Modality,
    NonPositiveSigma,
    OutOfRange,
    WrongChannelCount,
    on_u8_lattice,
)

Translator = Callable[[ImagePlane], ImagePlane]


def invert(plane: ImagePlane) -> ImagePlane:
    """Complement each intensity: v -> 1 - v.

    On planes that lie exactly on the 8-bit lattice the complement is
    computed in integer space ((255-k)/255), which is both the correctly
    rounded true complement and exactly involutive; plain floating 1-v is
    not (the second subtraction re-rounds). Off-lattice planes use 1-v.
    """
    data = plane.data
    if on_u8_lattice(data):
        out = (255.0 - np.rint(data * 255.0)) / 255.0
    else:
        out = 1.0 - data
    return ImagePlane(out, plane.modality)


def hist_stretch(plane: ImagePlane) -> ImagePlane:
    """Min-max normalize each channel to the full range; constant channels
    pass through unchanged."""
    out = np.empty_like(plane.data)
    for c in range(plane.channels):
        ch = plane.data[:, :, c]
        lo, hi = float(ch.min()), float(ch.max())
        out[:, :, c] = ch if hi == lo else (ch - lo) / (hi - lo)
    return ImagePlane(out, plane.modality)


def hist_equalize(plane: ImagePlane, bins: int = 256) -> ImagePlane:
    """Histogram equalization per channel: v -> (CDF(v) - CDF_min) / (1 - CDF_min).

    CDF is the inclusive cumulative histogram over `bins` equal-width bins;
    CDF_min is its value at the first occupied bin. Channels concentrated
    in a single bin pass through unchanged.
    """
    if not isinstance(bins, (int, np.integer)) or bins < 2:
        raise ConfigError(f"bins must be an integer >= 2, got {bins}")
    out = np.empty_like(plane.data)
    n = plane.height * plane.width
    for c in range(plane.channels):
        ch = plane.data[:, :, c]
        idx = np.minimum((ch * bins).astype(np.int64), bins - 1)
        counts = np.bincount(idx.ravel(), minlength=bins)
        cdf = np.cumsum(counts) / float(n)
        cdf_min = float(cdf[np.nonzero(counts)[0][0]])
        if cdf_min == 1.0:
            out[:, :, c] = ch
        else:
            out[:, :, c] = (cdf[idx] - cdf_min) / (1.0 - cdf_min)
    return ImagePlane(out, plane.modality)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(plane: ImagePlane, sigma: float = 1.0) -> ImagePlane:
    """Separable Gaussian blur, kernel radius ceil(3 sigma), mirror padding
    (edge pixel not repeated). Linear, so it commutes with invert up to
    float rounding, and the unit-sum kernel fixes constant images."""
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise NonPositiveSigma(f"sigma must be finite and > 0, got {sigma}")
    kernel = _gaussian_kernel(sigma)
    radius = (len(kernel) - 1) // 2
    if radius >= plane.height or radius >= plane.width:
        raise OutOfRange(
            f"blur radius {radius} too large for a {plane.height}x{plane.width} image"
        )
    out = np.empty_like(plane.data)
    for c in range(plane.channels):
        ch = np.pad(plane.data[:, :, c], radius, mode="reflect")
        ch = _correlate_axis(ch, kernel, axis=0)
        ch = _correlate_axis(ch, kernel, axis=1)
        out[:, :, c] = ch
    return ImagePlane(np.clip(out, 0.0, 1.0), plane.modality)


def _correlate_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Valid-mode 1D correlation along one axis of a padded 2D array."""
    windows = np.lib.stride_tricks.sliding_window_view(arr, len(kernel), axis=axis)
    return windows @ kernel


def gray_to_3ch(plane: ImagePlane) -> ImagePlane:
    """Replicate a single channel into an RGB-shaped hallucinated plane."""
    if plane.channels != 1:
        raise WrongChannelCount(f"expected a 1-channel plane, got {plane.channels}")
    return ImagePlane(np.repeat(plane.data, 3, axis=2), Modality.HALLUCINATED)


def compose_chain(ops: Sequence[Callable[[ImagePlane], ImagePlane]]) -> Callable[[ImagePlane], ImagePlane]:
    """Left-to-right composition: compose_chain([f, g])(x) == g(f(x))."""
    ops = tuple(ops)

    def chained(plane: ImagePlane) -> ImagePlane:
        for op in ops:
            plane = op(plane)
        return plane

    return chained


def parallel_combination(
    plane: ImagePlane,
    branches: tuple[Translator, Translator, Translator] | None = None,
) -> ImagePlane:
    """Stack three single-channel branch outputs into one 3-channel plane.

    Default branches: R = stretch(invert(x)), G = equalize(invert(x)),
    B = blur(x, sigma=1).
    """
    if plane.channels != 1:
        raise WrongChannelCount(f"expected a 1-channel plane, got {plane.channels}")
    if branches is None:
        branches = (
            compose_chain([invert, hist_stretch]),
            compose_chain([invert, hist_equalize]),
            lambda p: gaussian_blur(p, sigma=1.0),
        )
    outs = []
    for branch in branches:
        res = branch(plane)
        if res.channels != 1 or (res.height, res.width) != (plane.height, plane.width):
            raise WrongChannelCount("parallel branches must map 1ch planes to 1ch planes")
        outs.append(res.data[:, :, 0])
    return ImagePlane(np.stack(outs, axis=2), Modality.HALLUCINATED)


# ---------------------------------------------------------------------------
# Method registry: canonical string keys for the CLI and result tables

_OPS: dict[str, Callable[[ImagePlane], ImagePlane]] = {
    "invert": invert,
    "stretch": hist_stretch,
    "equalize": hist_equalize,
    "blur": gaussian_blur,
}


def classic_method_keys() -> list[str]:
    return ["none", "parallel"] + sorted(_OPS)


def translator_from_key(key: str) -> Translator:
    """Build a 1ch-IR -> 3ch translator from a canonical method key.

    "none" replicates gray to 3 channels, "parallel" is the three-branch
    combination, and op names joined by "+" (e.g. "invert+stretch") apply
    left to right before gray replication.
    """
    if key == "none":
        return gray_to_3ch
    if key == "parallel":
        return parallel_combination
    names = key.split("+")
    unknown = [n for n in names if n not in _OPS]
    if unknown:
        raise ConfigError(
            f"unknown classic op(s) {unknown} in method key {key!r}; "
            f"known ops: {sorted(_OPS)}"
        )
    chain = compose_chain([_OPS[n] for n in names])
    return compose_chain([chain, gray_to_3ch])
