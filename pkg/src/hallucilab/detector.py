"""Anchor-free single-level detector with a differentiable loss surface.

The network predicts, at every cell of a stride-8 feature grid, class
logits over K = n_classes + 1 categories (0 is background), four box
distances (left, top, right, bottom of the enclosing box in pixels,
exp-activated so they stay positive), and a centerness logit. Losses and
decoding follow the anchor-free center-sampling convention: a cell is
positive when its center falls strictly inside a box, overlapping boxes
resolve to the smallest area, and decode scores are class probability
times centerness probability.

All normalization is GroupNorm over a single group, so per-image outputs
are independent of batch composition and exactly invariant to positive
per-image affine intensity rescalings of the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import (
    BBox,
    ConfigError,
    Detection,
    ImagePlane,
    OutOfRange,
    ParamStore,
    ShapeMismatch,
    WrongChannelCount,
    bbox_area,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import iou

STRIDE = 8
_EXP_CLAMP = 8.0


@dataclass(frozen=True)
class DetectorConfig:
    width: int = 16
    n_classes: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.width, int) or self.width < 1:
            raise ConfigError(f"width must be a positive integer, got {self.width}")
        if not isinstance(self.n_classes, int) or self.n_classes < 1:
            raise ConfigError(f"n_classes must be a positive integer, got {self.n_classes}")

    @property
    def n_categories(self) -> int:
        return self.n_classes + 1

    def descriptor(self) -> dict:
        return {
            "kind": "detector",
            "width": self.width,
            "n_classes": self.n_classes,
            "stride": STRIDE,
        }


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(1, cout),
        nn.ReLU(),
    )


class DetectorNet(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        w = cfg.width
        self.trunk = nn.Sequential(
            _conv_block(3, w, stride=2),
            _conv_block(w, w),
            _conv_block(w, 2 * w, stride=2),
            _conv_block(2 * w, 2 * w),
            _conv_block(2 * w, 4 * w, stride=2),
            _conv_block(4 * w, 4 * w),
        )
        self.cls_tower = _conv_block(4 * w, 4 * w)
        self.reg_tower = _conv_block(4 * w, 4 * w)
        self.cls_head = nn.Conv2d(4 * w, cfg.n_categories, 3, padding=1)
        self.reg_head = nn.Conv2d(4 * w, 4, 3, padding=1)
        self.cnt_head = nn.Conv2d(4 * w, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        feats = self.trunk(x)
        cls_logits = self.cls_head(self.cls_tower(feats))
        reg_feats = self.reg_tower(feats)
        distances = torch.exp(self.reg_head(reg_feats).clamp(-_EXP_CLAMP, _EXP_CLAMP))
        cnt_logits = self.cnt_head(reg_feats).squeeze(1)
        return cls_logits, distances, cnt_logits


@dataclass
class DetectorOutputs:
    """Per-image raw head outputs on the stride-8 grid."""

    cls_logits: torch.Tensor  # (K, Hs, Ws)
    box_reg: torch.Tensor  # (4, Hs, Ws) distances l, t, r, b in pixels, > 0
    centerness_logits: torch.Tensor  # (Hs, Ws)
    stride: int
    image_hw: tuple[int, int]


@dataclass
class TargetAssignment:
    """Per-cell training targets on the feature grid."""

    cls_target: torch.Tensor  # (Hs, Ws) long, 0 = background
    box_target: torch.Tensor  # (Hs, Ws, 4) distances l, t, r, b
    centerness_target: torch.Tensor  # (Hs, Ws)
    pos_mask: torch.Tensor  # (Hs, Ws) bool


class Detector:
    """A config plus a parameter set, wrapped around the torch module."""

    def __init__(self, cfg: DetectorConfig, params: ParamStore | None = None):
        self.config = cfg
        self.module = DetectorNet(cfg)
        self.module.eval()
        if params is not None:
            load_params(self.module, params)

    @property
    def params(self) -> ParamStore:
        return params_from_module(self.module)

    @property
    def digest(self) -> str:
        return self.params.digest


def params_from_module(module: nn.Module) -> ParamStore:
    return ParamStore(
        {name: p.detach().cpu().numpy() for name, p in module.named_parameters()}
    )


def load_params(module: nn.Module, store: ParamStore) -> None:
    names = [name for name, _ in module.named_parameters()]
    if list(store) != names:
        raise ConfigError(
            "parameter store layout does not match the module "
            f"(store has {len(store)} entries, module expects {len(names)})"
        )
    with torch.no_grad():
        for name, p in module.named_parameters():
            arr = store[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeMismatch(f"parameter {name}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()))


def init_module(module: nn.Module, rng: np.random.Generator) -> None:
    """Deterministic init driven entirely by the given numpy generator:
    conv weights are fan-in-scaled uniform, norms are identity, biases 0."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("weight") and p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                bound = float(np.sqrt(6.0 / fan_in))
                vals = rng.uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.from_numpy(vals.astype(np.float32)))
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def init_detector(cfg: DetectorConfig, rng: np.random.Generator) -> ParamStore:
    """Fresh detector parameters: generic init plus head priors (background
    strongly favored at the start, initial box extent ~16 px)."""
    net = DetectorNet(cfg)
    init_module(net, rng)
    with torch.no_grad():
        net.cls_head.bias.fill_(-2.0)
        net.cls_head.bias[0] = 2.0
        net.reg_head.bias.fill_(float(np.log(16.0)))
        net.cnt_head.bias.zero_()
    return params_from_module(net)


def _plane_to_tensor(plane: ImagePlane) -> torch.Tensor:
    arr = np.transpose(plane.data, (2, 0, 1)).astype(np.float32)
    return torch.from_numpy(arr)


def detector_forward(detector: Detector, plane: ImagePlane) -> DetectorOutputs:
    if plane.channels != 3:
        raise WrongChannelCount(
            f"the detector consumes 3-channel planes, got {plane.channels}"
        )
    with torch.no_grad():
        cls_logits, distances, cnt_logits = detector.module(
            _plane_to_tensor(plane).unsqueeze(0)
        )
    return DetectorOutputs(
        cls_logits=cls_logits[0],
        box_reg=distances[0],
        centerness_logits=cnt_logits[0],
        stride=STRIDE,
        image_hw=(plane.height, plane.width),
    )


def grid_shape(image_hw: tuple[int, int], stride: int = STRIDE) -> tuple[int, int]:
    h, w = image_hw
    return (-(-h // stride), -(-w // stride))


def grid_centers(grid_hw: tuple[int, int], stride: int = STRIDE) -> tuple[np.ndarray, np.ndarray]:
    hs, ws = grid_hw
    cy = (np.arange(hs, dtype=np.float64) + 0.5) * stride
    cx = (np.arange(ws, dtype=np.float64) + 0.5) * stride
    return cy, cx


def assign_targets(
    boxes: tuple[BBox, ...] | list[BBox],
    grid_hw: tuple[int, int],
    n_classes: int,
    stride: int = STRIDE,
) -> TargetAssignment:
    """Cell targets: a cell is positive when its center lies strictly inside
    a box; among covering boxes the smallest area wins, equal areas resolve
    to the lowest box index. Centerness is sqrt of the product of the two
    min/max distance ratios."""
    hs, ws = grid_hw
    cy, cx = grid_centers(grid_hw, stride)
    cls_t = np.zeros((hs, ws), dtype=np.int64)
    box_t = np.zeros((hs, ws, 4), dtype=np.float64)
    cnt_t = np.zeros((hs, ws), dtype=np.float64)
    for b in boxes:
        if b.cls > n_classes:
            raise ConfigError(f"box cls {b.cls} exceeds n_classes={n_classes}")
    # Write in descending (area, index) order so the last writer per cell is
    # the smallest-area box, with the lowest index winning area ties.
    order = sorted(range(len(boxes)), key=lambda i: (-bbox_area(boxes[i]), -i))
    for i in order:
        b = boxes[i]
        left = cx[None, :] - b.x
        top = cy[:, None] - b.y
        right = b.x2 - cx[None, :]
        bottom = b.y2 - cy[:, None]
        inside = (left > 0) & (top > 0) & (right > 0) & (bottom > 0)
        if not inside.any():
            continue
        lr_min = np.minimum(left, right)
        lr_max = np.maximum(left, right)
        tb_min = np.minimum(top, bottom)
        tb_max = np.maximum(top, bottom)
        # Only read where inside; outside cells may divide by <= 0.
        with np.errstate(invalid="ignore", divide="ignore"):
            cnt = np.sqrt((lr_min / lr_max) * (tb_min / tb_max))
        cls_t[inside] = b.cls
        stacked = np.stack(
            [
                np.broadcast_to(left, (hs, ws)),
                np.broadcast_to(top, (hs, ws)),
                np.broadcast_to(right, (hs, ws)),
                np.broadcast_to(bottom, (hs, ws)),
            ],
            axis=2,
        )
        box_t[inside] = stacked[inside]
        cnt_t[inside] = cnt[inside]
    return TargetAssignment(
        cls_target=torch.from_numpy(cls_t),
        box_target=torch.from_numpy(box_t.astype(np.float32)),
        centerness_target=torch.from_numpy(cnt_t.astype(np.float32)),
        pos_mask=torch.from_numpy(cls_t > 0),
    )


def _as_batched(t: torch.Tensor, ndim: int) -> torch.Tensor:
    return t if t.ndim == ndim else t.unsqueeze(0)


def classification_loss(cls_logits: torch.Tensor, cls_target: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy over K categories (background included),
    scaled by 1/K per cell and averaged over all cells. Uniform predictions
    over K=2 give ln(2)/2."""
    logits = _as_batched(cls_logits, 4)
    target = _as_batched(cls_target, 3)
    k = logits.shape[1]
    logp = torch.log_softmax(logits, dim=1)
    nll = -logp.gather(1, target.unsqueeze(1)).squeeze(1)
    return nll.mean() / k


def regression_loss(
    box_reg: torch.Tensor,
    box_target: torch.Tensor,
    pos_mask: torch.Tensor,
    kind: str = "l1",
) -> torch.Tensor:
    """Sum of per-component absolute (l1) or squared (l2) distance errors
    over positive cells, divided by the positive count; 0 without
    positives."""
    if kind not in ("l1", "l2"):
        raise ConfigError(f"regression kind must be 'l1' or 'l2', got {kind!r}")
    reg = _as_batched(box_reg, 4)
    target = box_target if box_target.ndim == 4 else box_target.unsqueeze(0)
    target = target.permute(0, 3, 1, 2)  # (B, Hs, Ws, 4) -> (B, 4, Hs, Ws)
    mask = _as_batched(pos_mask, 3)
    n_pos = int(mask.sum())
    if n_pos == 0:
        return reg.sum() * 0.0
    diff = reg - target
    per_cell = diff.abs().sum(dim=1) if kind == "l1" else (diff ** 2).sum(dim=1)
    return per_cell[mask].sum() / n_pos


def centerness_loss(cnt_logits: torch.Tensor, cnt_target: torch.Tensor, pos_mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy against centerness targets over positive
    cells; 0 without positives. Probability 0.5 against target 1 gives ln 2."""
    logits = _as_batched(cnt_logits, 3)
    target = _as_batched(cnt_target, 3)
    mask = _as_batched(pos_mask, 3)
    if int(mask.sum()) == 0:
        return logits.sum() * 0.0
    return nn.functional.binary_cross_entropy_with_logits(
        logits[mask], target[mask], reduction="mean"
    )


def detection_loss(
    cls_logits: torch.Tensor,
    box_reg: torch.Tensor,
    cnt_logits: torch.Tensor,
    assignment: TargetAssignment | tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
    weights,
    reg_kind: str = "l1",
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the three terms; the dict reports unweighted values."""
    if isinstance(assignment, TargetAssignment):
        cls_t, box_t, cnt_t, mask = (
            assignment.cls_target,
            assignment.box_target,
            assignment.centerness_target,
            assignment.pos_mask,
        )
    else:
        cls_t, box_t, cnt_t, mask = assignment
    l_cls = classification_loss(cls_logits, cls_t)
    l_reg = regression_loss(box_reg, box_t, mask, kind=reg_kind)
    l_cnt = centerness_loss(cnt_logits, cnt_t, mask)
    total = weights.lambda_cls * l_cls + weights.lambda_reg * l_reg + weights.lambda_star * l_cnt
    terms = {
        "cls": float(l_cls.detach()),
        "reg": float(l_reg.detach()),
        "cnt": float(l_cnt.detach()),
    }
    return total, terms


def decode_detections(
    outputs: DetectorOutputs,
    score_threshold: float = 0.05,
    max_detections: int = 100,
) -> list[Detection]:
    """Boxes from cells: score = class probability x centerness probability,
    thresholded, clipped to the canvas, sorted by descending score (ties
    break on class then cell index), capped at max_detections."""
    if not 0.0 <= score_threshold <= 1.0:
        raise OutOfRange(f"score_threshold must lie in [0, 1], got {score_threshold}")
    if max_detections < 1:
        raise OutOfRange(f"max_detections must be >= 1, got {max_detections}")
    k, hs, ws = outputs.cls_logits.shape
    h, w = outputs.image_hw
    probs = torch.softmax(outputs.cls_logits.detach().double(), dim=0).numpy()
    cnt_prob = torch.sigmoid(outputs.centerness_logits.detach().double()).numpy()
    dists = outputs.box_reg.detach().double().numpy()
    cy, cx = grid_centers((hs, ws), outputs.stride)
    dets: list[tuple[float, int, int, int, Detection]] = []
    for cls in range(1, k):
        score_map = probs[cls] * cnt_prob
        ii, jj = np.nonzero(score_map >= score_threshold)
        for i, j in zip(ii.tolist(), jj.tolist()):
            x1 = max(cx[j] - dists[0, i, j], 0.0)
            y1 = max(cy[i] - dists[1, i, j], 0.0)
            x2 = min(cx[j] + dists[2, i, j], float(w))
            y2 = min(cy[i] + dists[3, i, j], float(h))
            if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
                continue
            det = Detection(
                BBox(x1, y1, x2 - x1, y2 - y1, cls), float(score_map[i, j])
            )
            dets.append((det.score, cls, i, j, det))
    dets.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    return [d for _, _, _, _, d in dets[:max_detections]]


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy class-aware suppression: walk detections by descending score
    (stable in input order) and drop any that overlaps a kept same-class
    detection at or above the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise OutOfRange(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if any(k.box.cls == d.box.cls and iou(k.box, d.box) >= iou_threshold for k in kept):
            continue
        kept.append(d)
    return kept


def save_detector(path, detector: Detector) -> None:
    save_checkpoint(path, detector.params, detector.config.descriptor())


def load_detector(path) -> Detector:
    store, desc = load_checkpoint(path)
    if desc.get("kind") != "detector":
        raise ConfigError(f"{path}: checkpoint kind {desc.get('kind')!r} is not a detector")
    if desc.get("stride") != STRIDE:
        raise ConfigError(f"{path}: unsupported stride {desc.get('stride')}")
    cfg = DetectorConfig(width=int(desc["width"]), n_classes=int(desc["n_classes"]))
    return Detector(cfg, store)
