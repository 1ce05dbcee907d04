"""IR-to-RGB translator: a small U-Net with additive attention gates.

The network maps a single-channel plane to a 3-channel plane through an
encoder-decoder with skip connections. Each skip passes through an
attention gate (1x1 projections of skip and gating signals, ReLU, 1x1
squeeze, sigmoid mask multiplied onto the skip) before concatenation.
Output logits are clamped to [-15, 15] and sigmoid-activated, so every
output intensity lies strictly inside (0, 1) even in float32.

GroupNorm over one group keeps per-image outputs independent of batch
composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import (
    ConfigError,
    ImagePlane,
    Modality,
    ParamStore,
    WrongChannelCount,
    load_checkpoint,
    save_checkpoint,
)
from .detector import init_module, load_params, params_from_module

_LOGIT_CLAMP = 15.0


@dataclass(frozen=True)
class HalluciNetConfig:
    """encoder_widths[0] is the full-resolution width; each further entry
    adds one 2x downsampling stage, so depth = len(encoder_widths) - 1."""

    encoder_widths: tuple[int, ...] = (16, 32, 64)
    use_attention: bool = True

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.encoder_widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigError(
                f"encoder_widths needs >= 2 positive entries, got {self.encoder_widths}"
            )
        object.__setattr__(self, "encoder_widths", widths)

    @property
    def depth(self) -> int:
        return len(self.encoder_widths) - 1

    def descriptor(self) -> dict:
        return {
            "kind": "hallucinet",
            "encoder_widths": list(self.encoder_widths),
            "use_attention": bool(self.use_attention),
        }


class _DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(1, cout),
            nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(1, cout),
            nn.ReLU(),
        )


class AttentionGate(nn.Module):
    """Additive attention: mask = sigmoid(psi(relu(Wx x + Wg g))), applied
    multiplicatively to the skip tensor x."""

    def __init__(self, skip_ch: int, gate_ch: int):
        super().__init__()
        inter = max(skip_ch // 2, 1)
        self.w_x = nn.Conv2d(skip_ch, inter, 1, bias=False)
        self.w_g = nn.Conv2d(gate_ch, inter, 1, bias=True)
        self.psi = nn.Conv2d(inter, 1, 1, bias=True)

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        mask = torch.sigmoid(self.psi(torch.relu(self.w_x(x) + self.w_g(g))))
        return x * mask


class HalluciNet(nn.Module):
    def __init__(self, cfg: HalluciNetConfig):
        super().__init__()
        widths = cfg.encoder_widths
        self.config = cfg
        self.inc = _DoubleConv(1, widths[0])
        self.downs = nn.ModuleList(
            _DoubleConv(widths[i - 1], widths[i]) for i in range(1, len(widths))
        )
        self.pool = nn.MaxPool2d(2)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2)
            for i in range(len(widths) - 1, 0, -1)
        )
        if cfg.use_attention:
            self.gates = nn.ModuleList(
                AttentionGate(widths[i - 1], widths[i - 1])
                for i in range(len(widths) - 1, 0, -1)
            )
        else:
            self.gates = nn.ModuleList()
        self.decs = nn.ModuleList(
            _DoubleConv(2 * widths[i - 1], widths[i - 1])
            for i in range(len(widths) - 1, 0, -1)
        )
        self.out = nn.Conv2d(widths[0], 3, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        factor = 2 ** self.config.depth
        pad_h = (-h) % factor
        pad_w = (-w) % factor
        if pad_h or pad_w:
            x = nn.functional.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(self.pool(skips[-1])))
        y = skips.pop()
        for idx, (up, dec) in enumerate(zip(self.ups, self.decs)):
            y = up(y)
            skip = skips.pop()
            if self.config.use_attention:
                skip = self.gates[idx](skip, y)
            y = dec(torch.cat([skip, y], dim=1))
        logits = self.out(y).clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
        return torch.sigmoid(logits)[..., :h, :w]


class Translator:
    """A config plus parameters, wrapped around the torch module."""

    def __init__(self, cfg: HalluciNetConfig, params: ParamStore | None = None):
        self.config = cfg
        self.module = HalluciNet(cfg)
        self.module.eval()
        if params is not None:
            load_params(self.module, params)

    @property
    def params(self) -> ParamStore:
        return params_from_module(self.module)

    @property
    def digest(self) -> str:
        return self.params.digest

    def __call__(self, plane: ImagePlane) -> ImagePlane:
        return hallucinate(self, plane)


def init_translator(cfg: HalluciNetConfig, rng: np.random.Generator) -> ParamStore:
    net = HalluciNet(cfg)
    init_module(net, rng)
    return params_from_module(net)


def hallucinate(translator: Translator, plane: ImagePlane) -> ImagePlane:
    """Translate a 1-channel plane into a 3-channel hallucinated plane."""
    if plane.channels != 1:
        raise WrongChannelCount(f"expected a 1-channel plane, got {plane.channels}")
    x = torch.from_numpy(
        np.transpose(plane.data, (2, 0, 1)).astype(np.float32)
    ).unsqueeze(0)
    with torch.no_grad():
        y = translator.module(x)
    out = np.transpose(y[0].numpy().astype(np.float64), (1, 2, 0))
    return ImagePlane(out, Modality.HALLUCINATED)


def reconstruction_loss(pred, target):
    """Mean absolute error between two 3-channel planes (or tensors)."""
    if isinstance(pred, ImagePlane) and isinstance(target, ImagePlane):
        if pred.data.shape != target.data.shape:
            raise ConfigError(
                f"shape mismatch: {pred.data.shape} vs {target.data.shape}"
            )
        return float(np.abs(pred.data - target.data).mean())
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def count_params(cfg: HalluciNetConfig) -> int:
    """Exact learnable-parameter count for a config."""
    return sum(int(p.numel()) for p in HalluciNet(cfg).parameters())


def save_translator(path, translator: Translator) -> None:
    save_checkpoint(path, translator.params, translator.config.descriptor())


def load_translator(path) -> Translator:
    store, desc = load_checkpoint(path)
    if desc.get("kind") != "hallucinet":
        raise ConfigError(f"{path}: checkpoint kind {desc.get('kind')!r} is not a translator")
    cfg = HalluciNetConfig(
        encoder_widths=tuple(int(w) for w in desc["encoder_widths"]),
        use_attention=bool(desc["use_attention"]),
    )
    return Translator(cfg, store)
