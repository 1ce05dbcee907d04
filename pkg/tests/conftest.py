"""Shared fixtures: tiny deterministic datasets and model configs.

Thread count is pinned so floating-point reductions inside torch are
reproducible across runs on the same machine.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from hallucilab.core import BBox, Detection, ImagePlane, Modality, derive_rng, quantize_u8
from hallucilab.data import SceneConfig, generate_dataset
from hallucilab.detector import DetectorConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_scene() -> SceneConfig:
    return SceneConfig(image_size=(48, 64), seed=77)


@pytest.fixture(scope="session")
def tiny_data(tiny_scene):
    train, test = generate_dataset(tiny_scene, 10, 4)
    return list(train), list(test)


@pytest.fixture(scope="session")
def tiny_det_cfg() -> DetectorConfig:
    return DetectorConfig(width=4)


@pytest.fixture()
def rng() -> np.random.Generator:
    return derive_rng(99, 0)


def make_plane(rng: np.random.Generator, h: int = 32, w: int = 32, c: int = 1,
               modality: Modality = Modality.IR) -> ImagePlane:
    """Random image on the 8-bit lattice, like every generated sample."""
    return ImagePlane(quantize_u8(rng.random((h, w, c))), modality)


def box(x: float, y: float, w: float, h: float, cls: int = 1) -> BBox:
    return BBox(x, y, w, h, cls)


def det(x: float, y: float, w: float, h: float, score: float, cls: int = 1) -> Detection:
    return Detection(BBox(x, y, w, h, cls), score)
