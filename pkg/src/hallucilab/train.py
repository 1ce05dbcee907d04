"""Training loops, the frozen-detector translation objective, evaluation,
and a finite-difference gradient checker.

Determinism contract: every stochastic choice (init, shuffling, splits,
probe selection) draws from counter-based streams derived from the config
seed, no framework RNG state is consumed, and public evaluation always
runs images one at a time, so identical configs reproduce identical
parameter digests and AP values.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .classic import gray_to_3ch
from .data import nested_subset_indices
from .core import (
    BadFraction,
    ConfigError,
    EmptyDataset,
    FrozenParamViolation,
    LossWeights,
    OutOfRange,
    PairedSample,
    ParamStore,
    ShapeMismatch,
    STREAM_INIT,
    STREAM_PROBE,
    STREAM_SHUFFLE,
    STREAM_SPLIT,
    TrainingDiverged,
    derive_rng,
)
from .detector import (
    Detector,
    DetectorConfig,
    DetectorNet,
    DetectorOutputs,
    STRIDE,
    TargetAssignment,
    assign_targets,
    decode_detections,
    detection_loss,
    detector_forward,
    grid_shape,
    init_detector,
    init_module,
    load_params,
    nms,
    params_from_module,
)
from .hallucinet import HalluciNet, HalluciNetConfig, Translator, init_translator
from .metrics import average_precision_at_50


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError(f"score_threshold must lie in [0, 1], got {self.score_threshold}")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou must lie in (0, 1], got {self.nms_iou}")
        if self.max_detections < 1:
            raise ConfigError(f"max_detections must be >= 1, got {self.max_detections}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    reg_kind: str = "l1"
    seed: int = 0
    train_fraction: float = 1.0
    val_fraction: float = 0.2
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be finite and > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.reg_kind not in ("l1", "l2"):
            raise ConfigError(f"reg_kind must be 'l1' or 'l2', got {self.reg_kind!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise BadFraction(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


@dataclass
class TrainReport:
    kind: str
    seed: int
    n_train: int
    n_val: int
    epochs: list[dict]
    best_epoch: int
    best_val_score: float | None
    digest_before: str
    digest_after: str
    frozen_digest_before: str | None
    frozen_digest_after: str | None
    wall_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Splits and batching


def split_train_val(
    samples: Sequence[PairedSample], val_fraction: float, seed: int
) -> tuple[list[PairedSample], list[PairedSample]]:
    """Deterministic shuffled split; the validation share rounds to the
    nearest count, clamped so training keeps at least one sample."""
    n = len(samples)
    if n == 0:
        raise EmptyDataset("cannot split an empty sample list")
    perm = derive_rng(seed, STREAM_SPLIT).permutation(n)
    if val_fraction == 0.0 or n == 1:
        n_val = 0
    else:
        n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    val_idx = set(perm[:n_val].tolist())
    train = [samples[i] for i in range(n) if i not in val_idx]
    val = [samples[i] for i in sorted(val_idx)]
    return train, val


def _plane_tensor(plane) -> torch.Tensor:
    return torch.from_numpy(np.transpose(plane.data, (2, 0, 1)).astype(np.float32))


@dataclass
class _Prepared:
    ir: torch.Tensor  # (1, H, W)
    rgb: torch.Tensor  # (3, H, W)
    assignment: TargetAssignment


def _prepare(samples: Sequence[PairedSample], n_classes: int) -> list[_Prepared]:
    prepared = []
    hw = None
    for s in samples:
        if hw is None:
            hw = (s.ir.height, s.ir.width)
        elif (s.ir.height, s.ir.width) != hw:
            raise ShapeMismatch(
                "batched training requires uniform image sizes; "
                f"got {hw} and {(s.ir.height, s.ir.width)}"
            )
        asn = assign_targets(s.boxes, grid_shape(hw), n_classes)
        prepared.append(_Prepared(_plane_tensor(s.ir), _plane_tensor(s.rgb), asn))
    return prepared

def _stack_assignments(items: list[_Prepared]) -> tuple[torch.Tensor, ...]:
    return (
        torch.stack([p.assignment.cls_target for p in items]),
        torch.stack([p.assignment.box_target for p in items]),
        torch.stack([p.assignment.centerness_target for p in items]),
        torch.stack([p.assignment.pos_mask for p in items]),
    )


def _make_optimizer(cfg: TrainConfig, params) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


def _epoch_order(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.permutation(n)


def _check_finite(loss: torch.Tensor, context: str) -> None:
    if not bool(torch.isfinite(loss)):
        raise TrainingDiverged(f"non-finite loss during {context}")


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_pipeline(
    translator,
    detector: Detector,
    samples: Sequence[PairedSample],
    eval_cfg: EvalConfig = EvalConfig(),
    source: str = "ir",
) -> float:
    """AP@50 of detector o translator over samples.

    source "ir" feeds translated IR planes (translator None means plain
    gray replication); source "rgb" feeds the RGB planes directly.
    """
    if source not in ("ir", "rgb"):
        raise ConfigError(f"source must be 'ir' or 'rgb', got {source!r}")
    pairs = []
    for s in samples:
        if source == "rgb":
            plane = s.rgb
        elif translator is None:
            plane = gray_to_3ch(s.ir)
        else:
            plane = translator(s.ir)
        outs = detector_forward(detector, plane)
        dets = nms(
            decode_detections(outs, eval_cfg.score_threshold, eval_cfg.max_detections),
            eval_cfg.nms_iou,
        )
        pairs.append((dets, list(s.boxes)))
    return average_precision_at_50(pairs)


# ---------------------------------------------------------------------------
# Detector training (RGB pretraining and IR fine-tuning)


def _train_detector(
    samples: Sequence[PairedSample],
    det_cfg: DetectorConfig,
    cfg: TrainConfig,
    init_params: ParamStore | None,
    source: str,
    kind: str,
) -> tuple[ParamStore, TrainReport]:
    t0 = time.monotonic()
    train, val = split_train_val(samples, cfg.val_fraction, cfg.seed)
    if cfg.train_fraction < 1.0:
        keep = nested_subset_indices(len(train), cfg.train_fraction, cfg.seed)
        train = [train[i] for i in keep]
    if not train:
        raise EmptyDataset("no training samples after split/subset")
    prep = _prepare(train, det_cfg.n_classes)

    module = DetectorNet(det_cfg)
    if init_params is None:
        load_params(module, init_detector(det_cfg, derive_rng(cfg.seed, STREAM_INIT)))
    else:
        load_params(module, init_params)
    digest_before = params_from_module(module).digest

    opt = _make_optimizer(cfg, module.parameters())
    shuffle_rng = derive_rng(cfg.seed, STREAM_SHUFFLE)
    epochs_log: list[dict] = []
    best_score: float | None = None
    best_epoch = 0
    best_state = params_from_module(module)

    for epoch in range(1, cfg.epochs + 1):
        module.train()
        order = _epoch_order(shuffle_rng, len(prep))
        batch_losses = []
        term_sums = {"cls": 0.0, "reg": 0.0, "cnt": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            items = [prep[i] for i in order[start : start + cfg.batch_size]]
            x = torch.stack([it.rgb if source == "rgb" else it.ir.expand(3, -1, -1) for it in items])
            cls_logits, distances, cnt_logits = module(x)
            loss, terms = detection_loss(
                cls_logits, distances, cnt_logits, _stack_assignments(items), cfg.weights, cfg.reg_kind
            )
            _check_finite(loss, f"{kind} epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
            for k in term_sums:
                term_sums[k] += terms[k]
        module.eval()
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            **{f"loss_{k}": term_sums[k] / len(batch_losses) for k in term_sums},
        }
        if val:
            det = Detector(det_cfg, params_from_module(module))
            ap = evaluate_pipeline(None, det, val, cfg.eval, source=source)
            entry["val_ap50"] = ap
            if best_score is None or ap > best_score:
                best_score, best_epoch, best_state = ap, epoch, det.params
        else:
            best_epoch, best_state = epoch, params_from_module(module)
        epochs_log.append(entry)

    report = TrainReport(
        kind=kind,
        seed=cfg.seed,
        n_train=len(train),
        n_val=len(val),
        epochs=epochs_log,
        best_epoch=best_epoch,
        best_val_score=best_score,
        digest_before=digest_before,
        digest_after=best_state.digest,
        frozen_digest_before=None,
        frozen_digest_after=None,
        wall_seconds=time.monotonic() - t0,
    )
    return best_state, report


def pretrain_rgb_detector(
    samples: Sequence[PairedSample], det_cfg: DetectorConfig, cfg: TrainConfig
) -> tuple[ParamStore, TrainReport]:
    """Train a detector on the RGB planes; model selection by validation
    AP@50 (best epoch wins, earliest on ties)."""
    return _train_detector(samples, det_cfg, cfg, None, "rgb", "pretrain_rgb")


def finetune_ir_detector(
    init_params: ParamStore,
    samples: Sequence[PairedSample],
    det_cfg: DetectorConfig,
    cfg: TrainConfig,
) -> tuple[ParamStore, TrainReport]:
    """Continue training all detector parameters on gray-replicated IR.
    Zero epochs returns parameters with an unchanged digest."""
    return _train_detector(samples, det_cfg, cfg, init_params, "ir", "finetune_ir")


# ---------------------------------------------------------------------------
# Translator training


def train_hallucidet(
    frozen_params: ParamStore,
    det_cfg: DetectorConfig,
    samples: Sequence[PairedSample],
    hall_cfg: HalluciNetConfig,
    cfg: TrainConfig,
) -> tuple[ParamStore, TrainReport]:
    """Train the translator through the frozen detector using only the
    detection loss; raises FrozenParamViolation if the detector's digest
    changes. Model selection by validation AP@50 of the full pipeline."""
    t0 = time.monotonic()
    train, val = split_train_val(samples, cfg.val_fraction, cfg.seed)
    if cfg.train_fraction < 1.0:
        keep = nested_subset_indices(len(train), cfg.train_fraction, cfg.seed)
        train = [train[i] for i in keep]
    if not train:
        raise EmptyDataset("no training samples after split/subset")
    prep = _prepare(train, det_cfg.n_classes)

    det_module = DetectorNet(det_cfg)
    load_params(det_module, frozen_params)
    det_module.eval()
    for p in det_module.parameters():
        p.requires_grad_(False)
    frozen_before = params_from_module(det_module).digest

    net = HalluciNet(hall_cfg)
    load_params(net, init_translator(hall_cfg, derive_rng(cfg.seed, STREAM_INIT)))
    digest_before = params_from_module(net).digest

    opt = _make_optimizer(cfg, net.parameters())
    shuffle_rng = derive_rng(cfg.seed, STREAM_SHUFFLE)
    epochs_log: list[dict] = []
    best_score: float | None = None
    best_epoch = 0
    best_state = params_from_module(net)

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = _epoch_order(shuffle_rng, len(prep))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            items = [prep[i] for i in order[start : start + cfg.batch_size]]
            x = torch.stack([it.ir for it in items])
            translated = net(x)
            cls_logits, distances, cnt_logits = det_module(translated)
            loss, _ = detection_loss(
                cls_logits, distances, cnt_logits, _stack_assignments(items), cfg.weights, cfg.reg_kind
            )
            _check_finite(loss, f"hallucidet epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
        net.eval()
        entry = {"epoch": epoch, "train_loss": float(np.mean(batch_losses))}
        if val:
            det = Detector(det_cfg, params_from_module(det_module))
            tr = Translator(hall_cfg, params_from_module(net))
            ap = evaluate_pipeline(tr, det, val, cfg.eval, source="ir")
            entry["val_ap50"] = ap
            if best_score is None or ap > best_score:
                best_score, best_epoch, best_state = ap, epoch, tr.params
        else:
            best_epoch, best_state = epoch, params_from_module(net)
        epochs_log.append(entry)

    frozen_after = params_from_module(det_module).digest
    if frozen_after != frozen_before:
        raise FrozenParamViolation(
            "detector parameters changed during translator training "
            f"({frozen_before[:12]} -> {frozen_after[:12]})"
        )

    report = TrainReport(
        kind="hallucidet",
        seed=cfg.seed,
        n_train=len(train),
        n_val=len(val),
        epochs=epochs_log,
        best_epoch=best_epoch,
        best_val_score=best_score,
        digest_before=digest_before,
        digest_after=best_state.digest,
        frozen_digest_before=frozen_before,
        frozen_digest_after=frozen_after,
        wall_seconds=time.monotonic() - t0,
    )
    return best_state, report


def train_reconstruction_translator(
    samples: Sequence[PairedSample],
    hall_cfg: HalluciNetConfig,
    cfg: TrainConfig,
) -> tuple[ParamStore, TrainReport]:
    """Train the same translator architecture by mean-absolute-error
    against the paired RGB planes, blind to any detector. Model selection
    by lowest validation reconstruction loss."""
    t0 = time.monotonic()
    train, val = split_train_val(samples, cfg.val_fraction, cfg.seed)
    if cfg.train_fraction < 1.0:
        keep = nested_subset_indices(len(train), cfg.train_fraction, cfg.seed)
        train = [train[i] for i in keep]
    if not train:
        raise EmptyDataset("no training samples after split/subset")
    prep = _prepare(train, n_classes=1)
    val_prep = _prepare(val, n_classes=1) if val else []

    net = HalluciNet(hall_cfg)
    load_params(net, init_translator(hall_cfg, derive_rng(cfg.seed, STREAM_INIT)))
    digest_before = params_from_module(net).digest

    opt = _make_optimizer(cfg, net.parameters())
    shuffle_rng = derive_rng(cfg.seed, STREAM_SHUFFLE)
    epochs_log: list[dict] = []
    best_score: float | None = None
    best_epoch = 0
    best_state = params_from_module(net)

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = _epoch_order(shuffle_rng, len(prep))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            items = [prep[i] for i in order[start : start + cfg.batch_size]]
            x = torch.stack([it.ir for it in items])
            target = torch.stack([it.rgb for it in items])
            loss = (net(x) - target).abs().mean()
            _check_finite(loss, f"reconstruction epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
        net.eval()
        entry = {"epoch": epoch, "train_loss": float(np.mean(batch_losses))}
        if val_prep:
            with torch.no_grad():
                errs = [
                    float((net(it.ir.unsqueeze(0)) - it.rgb.unsqueeze(0)).abs().mean())
                    for it in val_prep
                ]
            score = float(np.mean(errs))
            entry["val_recon"] = score
            if best_score is None or score < best_score:
                best_score, best_epoch, best_state = score, epoch, params_from_module(net)
        else:
            best_epoch, best_state = epoch, params_from_module(net)
        epochs_log.append(entry)

    report = TrainReport(
        kind="reconstruction",
        seed=cfg.seed,
        n_train=len(train),
        n_val=len(val),
        epochs=epochs_log,
        best_epoch=best_epoch,
        best_val_score=best_score,
        digest_before=digest_before,
        digest_after=best_state.digest,
        frozen_digest_before=None,
        frozen_digest_after=None,
        wall_seconds=time.monotonic() - t0,
    )
    return best_state, report


# ---------------------------------------------------------------------------
# Gradient checking

LossAndGrad = Callable[[Mapping[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def gradient_check(
    loss_and_grad: LossAndGrad,
    params: Mapping[str, np.ndarray],
    n_probes: int = 64,
    step: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over randomly probed parameter entries.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator so
    entries where both sides vanish do not divide by zero. Callers should
    evaluate the loss in float64; the default step is sized for that.
    """
    if n_probes < 1:
        raise ConfigError(f"n_probes must be >= 1, got {n_probes}")
    if not np.isfinite(step) or step <= 0:
        raise ConfigError(f"step must be finite and > 0, got {step}")
    rng = rng if rng is not None else derive_rng(0, STREAM_PROBE)
    theta0 = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    _, grads = loss_and_grad(theta0)
    names = list(theta0)
    sizes = np.array([theta0[k].size for k in names], dtype=np.float64)
    probs = sizes / sizes.sum()
    worst = 0.0
    for _ in range(n_probes):
        name = names[int(rng.choice(len(names), p=probs))]
        flat_idx = int(rng.integers(theta0[name].size))
        h = step * max(1.0, abs(theta0[name].flat[flat_idx]))
        for sign in (+1.0, -1.0):
            perturbed = {k: v.copy() for k, v in theta0.items()}
            perturbed[name].flat[flat_idx] += sign * h
            if sign > 0:
                up, _ = loss_and_grad(perturbed)
            else:
                down, _ = loss_and_grad(perturbed)
        numeric = (up - down) / (2.0 * h)
        analytic = float(grads[name].flat[flat_idx])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def detection_loss_closure(
    det_params: ParamStore,
    det_cfg: DetectorConfig,
    sample: PairedSample,
    weights: LossWeights,
    reg_kind: str = "l1",
    plane=None,
) -> tuple[LossAndGrad, dict[str, np.ndarray]]:
    """Float64 closure: detection loss and its gradient w.r.t. detector
    parameters on one image (its RGB plane unless another is given)."""
    module = DetectorNet(det_cfg).double()
    load_params_f64(module, det_params)
    src = plane if plane is not None else sample.rgb
    x = torch.from_numpy(np.transpose(src.data, (2, 0, 1)).copy()).unsqueeze(0)
    asn = assign_targets(sample.boxes, grid_shape((src.height, src.width)), det_cfg.n_classes)
    asn64 = (
        asn.cls_target.unsqueeze(0),
        asn.box_target.double().unsqueeze(0),
        asn.centerness_target.double().unsqueeze(0),
        asn.pos_mask.unsqueeze(0),
    )

    def fn(vals: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(torch.from_numpy(np.asarray(vals[name], dtype=np.float64)))
        for p in module.parameters():
            p.requires_grad_(True)
        module.zero_grad()
        cls_logits, distances, cnt_logits = module(x)
        loss, _ = detection_loss(cls_logits, distances, cnt_logits, asn64, weights, reg_kind)
        loss.backward()
        grads = {
            name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(p.shape))
            for name, p in module.named_parameters()
        }
        return float(loss.detach()), grads

    init = {
        name: p.detach().numpy().astype(np.float64).copy()
        for name, p in module.named_parameters()
    }
    return fn, init


def hallucination_loss_closure(
    det_params: ParamStore,
    det_cfg: DetectorConfig,
    hall_params: ParamStore,
    hall_cfg: HalluciNetConfig,
    sample: PairedSample,
    weights: LossWeights,
    reg_kind: str = "l1",
) -> tuple[LossAndGrad, dict[str, np.ndarray]]:
    """Float64 closure: detection loss of detector(translator(ir)) and its
    gradient w.r.t. translator parameters, detector frozen."""
    det_module = DetectorNet(det_cfg).double()
    load_params_f64(det_module, det_params)
    for p in det_module.parameters():
        p.requires_grad_(False)
    net = HalluciNet(hall_cfg).double()
    load_params_f64(net, hall_params)
    x = torch.from_numpy(np.transpose(sample.ir.data, (2, 0, 1)).copy()).unsqueeze(0)
    asn = assign_targets(
        sample.boxes, grid_shape((sample.ir.height, sample.ir.width)), det_cfg.n_classes
    )
    asn64 = (
        asn.cls_target.unsqueeze(0),
        asn.box_target.double().unsqueeze(0),
        asn.centerness_target.double().unsqueeze(0),
        asn.pos_mask.unsqueeze(0),
    )

    def fn(vals: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.copy_(torch.from_numpy(np.asarray(vals[name], dtype=np.float64)))
        for p in net.parameters():
            p.requires_grad_(True)
        net.zero_grad()
        cls_logits, distances, cnt_logits = det_module(net(x))
        loss, _ = detection_loss(cls_logits, distances, cnt_logits, asn64, weights, reg_kind)
        loss.backward()
        grads = {
            name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(p.shape))
            for name, p in net.named_parameters()
        }
        return float(loss.detach()), grads

    init = {
        name: p.detach().numpy().astype(np.float64).copy() for name, p in net.named_parameters()
    }
    return fn, init


def load_params_f64(module, store: ParamStore) -> None:
    names = [name for name, _ in module.named_parameters()]
    if list(store) != names:
        raise ConfigError("parameter store layout does not match the module")
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.from_numpy(store[name].astype(np.float64)))
