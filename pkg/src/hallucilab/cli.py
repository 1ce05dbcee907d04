"""Command-line interface: every experiment in the lab as a subcommand.

Workflow: `pretrain` fits per-seed detectors on RGB and records the RGB
ceiling and the no-adaptation IR floor; `baseline`, `recon`, `hallucidet`,
and `finetune` each evaluate one adaptation route against those frozen
detectors; `sweep-*` runs the fraction/weighting/capacity ablations;
`report` aggregates the metrics CSV; `panel` renders qualitative grids.

Every run writes its fully resolved configuration next to its outputs,
appends rows to one append-only metrics CSV (atomic replace), and is
deterministic: rerunning any command with an identical spec reproduces
identical CSV values.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 acceptance-threshold failure (--check-min-ap). Failures print a
machine-readable JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch
from dataclasses import dataclass, field
from pathlib import Path

from .classic import classic_method_keys, translator_from_key
from .core import (
    ConfigError,
    FrozenParamViolation,
    HalluciLabError,
    LossWeights,
    TrainingDiverged,
)
from .data import Dataset, SceneConfig, generate_dataset, load_external
from .detector import Detector, DetectorConfig, load_detector, save_detector
from .hallucinet import (
    HalluciNetConfig,
    Translator,
    count_params,
    load_translator,
    save_translator,
)
from .metrics import (
    MetricsRow,
    append_metrics_rows,
    read_metrics_rows,
    summarize_rows,
    write_summary,
)
from .panel import render_panel, render_sweep_plot
from .train import (
    EvalConfig,
    TrainConfig,
    evaluate_pipeline,
    finetune_ir_detector,
    pretrain_rgb_detector,
    train_hallucidet,
    train_reconstruction_translator,
)

ENV_OUT = "HALLUCILAB_OUT"
SCHEMA_VERSION = 1

_COMMANDS = (
    "pretrain",
    "finetune",
    "hallucidet",
    "baseline",
    "recon",
    "eval",
    "sweep-fraction",
    "sweep-lambda",
    "sweep-capacity",
    "report",
    "panel",
)

# Detector pretraining and fine-tuning balance all three loss terms; the
# translator objective defaults to the strongest ablation-grid weighting.
_DETECTOR_LAMBDAS = (1.0, 1.0, 1.0)
_TRANSLATOR_LAMBDAS = (0.01, 0.1, 0.1)

_EPOCH_DEFAULTS = {
    "pretrain": 14,
    "finetune": 10,
    "hallucidet": 8,
    # Reconstruction gets twice the epoch budget of detection-supervised
    # training: pixel regression through the halo is slower to fit, and the
    # comparison should not hinge on under-training the baseline.
    "recon": 16,
    "sweep-fraction": 6,
    "sweep-lambda": 6,
    "sweep-capacity": 6,
}

DEFAULT_LAMBDA_GRID = "0,1,1;1,0,0;0.01,0.1,0.1;0.1,0.01,0.01"
DEFAULT_WIDTH_GRID = "8,16,32;16,32,64;24,48,96"


class AcceptanceFailure(HalluciLabError):
    pass


@dataclass
class ExperimentSpec:
    command: str
    out_root: Path
    experiment: str
    scene: SceneConfig
    n_train: int
    n_test: int
    external_train: Path | None
    external_test: Path | None
    det_cfg: DetectorConfig
    hall_cfg: HalluciNetConfig
    epochs: int
    batch_size: int
    learning_rate: float
    optimizer: str
    momentum: float
    lambdas: tuple[float, float, float]
    reg_kind: str
    train_fraction: float
    val_fraction: float
    eval_cfg: EvalConfig
    seeds: list[int]
    check_min_ap: float | None
    method: str | None = None
    fractions: list[float] = field(default_factory=list)
    lambda_grid: list[tuple[float, float, float]] = field(default_factory=list)
    widths_grid: list[tuple[int, ...]] = field(default_factory=list)
    eval_detector: Path | None = None
    eval_translator: Path | None = None
    eval_source: str = "ir"
    eval_label: str | None = None
    eval_seed: int = 0
    panel_rows: list[str] = field(default_factory=list)
    panel_samples: int = 6
    panel_seed: int | None = None

    @property
    def exp_dir(self) -> Path:
        return self.out_root / self.experiment

    @property
    def metrics_path(self) -> Path:
        return self.exp_dir / "metrics.csv"

    @property
    def detector_label(self) -> str:
        return f"af-w{self.det_cfg.width}"

    def detector_path(self, seed: int) -> Path:
        return self.exp_dir / "detectors" / f"seed{seed}.ckpt"

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        kwargs = dict(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            momentum=self.momentum,
            weights=LossWeights(*self.lambdas),
            reg_kind=self.reg_kind,
            seed=seed,
            train_fraction=self.train_fraction,
            val_fraction=self.val_fraction,
            eval=self.eval_cfg,
        )
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    def resolved(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "experiment": self.experiment,
            "dataset": {
                **self.scene.to_dict(),
                "n_train": self.n_train,
                "n_test": self.n_test,
                "external_train": str(self.external_train) if self.external_train else None,
                "external_test": str(self.external_test) if self.external_test else None,
            },
            "detector": {"width": self.det_cfg.width, "n_classes": self.det_cfg.n_classes},
            "translator": self.hall_cfg.descriptor(),
            "train": {
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
                "optimizer": self.optimizer,
                "momentum": self.momentum,
                "lambda_cls": self.lambdas[0],
                "lambda_reg": self.lambdas[1],
                "lambda_star": self.lambdas[2],
                "reg_kind": self.reg_kind,
                "train_fraction": self.train_fraction,
                "val_fraction": self.val_fraction,
            },
            "eval": {
                "score_threshold": self.eval_cfg.score_threshold,
                "nms_iou": self.eval_cfg.nms_iou,
                "max_detections": self.eval_cfg.max_detections,
            },
            "seeds": self.seeds,
            "method": self.method,
            "fractions": self.fractions,
            "lambda_grid": [list(g) for g in self.lambda_grid],
            "widths_grid": [list(g) for g in self.widths_grid],
            "check_min_ap": self.check_min_ap,
        }


# ---------------------------------------------------------------------------
# Spec resolution: defaults < config file < command-line flags


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what} {text!r}: {exc}") from exc


def _parse_float_list(text: str, what: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what} {text!r}: {exc}") from exc


def _parse_triple_grid(text: str) -> list[tuple[float, float, float]]:
    grid = []
    for part in text.split(";"):
        if not part.strip():
            continue
        vals = _parse_float_list(part, "lambda triple")
        if len(vals) != 3:
            raise ConfigError(f"each lambda grid entry needs 3 values, got {part!r}")
        grid.append((vals[0], vals[1], vals[2]))
    if not grid:
        raise ConfigError("lambda grid is empty")
    return grid


def _parse_width_grid(text: str) -> list[tuple[int, ...]]:
    grid = []
    for part in text.split(";"):
        if not part.strip():
            continue
        grid.append(tuple(_parse_int_list(part, "width list")))
    if not grid:
        raise ConfigError("width grid is empty")
    return grid


_CONFIG_SECTIONS = {"schema_version", "dataset", "detector", "translator", "train", "eval", "seeds"}
_DATASET_KEYS = {
    "image_size",
    "n_persons",
    "n_distractors",
    "light_level",
    "noise_sigma",
    "seed",
    "n_train",
    "n_test",
    "external_train",
    "external_test",
}
_TRAIN_KEYS = {
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "momentum",
    "lambda_cls",
    "lambda_reg",
    "lambda_star",
    "reg_kind",
    "train_fraction",
    "val_fraction",
}
_EVAL_KEYS = {"score_threshold", "nms_iou", "max_detections"}


def _load_config_file(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(cfg) - _CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    if cfg.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: unsupported schema_version {cfg.get('schema_version')}, expected {SCHEMA_VERSION}"
        )
    for section, allowed in (
        ("dataset", _DATASET_KEYS),
        ("train", _TRAIN_KEYS),
        ("eval", _EVAL_KEYS),
        ("detector", {"width", "n_classes"}),
        ("translator", {"encoder_widths", "use_attention"}),
    ):
        extra = set(cfg.get(section, {})) - allowed
        if extra:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(extra)}")
    return cfg


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    cfg = _load_config_file(Path(args.config)) if args.config else {}
    ds = dict(cfg.get("dataset", {}))
    tr = dict(cfg.get("train", {}))
    ev = dict(cfg.get("eval", {}))
    dt = dict(cfg.get("detector", {}))
    hl = dict(cfg.get("translator", {}))

    def pick(flag_value, cfg_value, default):
        if flag_value is not None:
            return flag_value
        if cfg_value is not None:
            return cfg_value
        return default

    out_root = Path(args.out if args.out else os.environ.get(ENV_OUT, "runs"))
    image_size = (
        tuple(_parse_int_list(args.image_size, "image size"))
        if args.image_size
        else tuple(ds.get("image_size", (96, 128)))
    )
    if len(image_size) != 2:
        raise ConfigError(f"image_size needs exactly HxW, got {image_size}")
    scene = SceneConfig(
        image_size=image_size,  # type: ignore[arg-type]
        n_persons=tuple(ds.get("n_persons", (1, 3))),
        n_distractors=tuple(ds.get("n_distractors", (1, 3))),
        light_level=float(pick(args.light_level, ds.get("light_level"), 0.35)),
        noise_sigma=float(pick(args.noise_sigma, ds.get("noise_sigma"), 0.02)),
        seed=int(pick(args.dataset_seed, ds.get("seed"), 1234)),
    )
    det_cfg = DetectorConfig(
        width=int(pick(args.det_width, dt.get("width"), 16)),
        n_classes=int(pick(None, dt.get("n_classes"), 1)),
    )
    widths = (
        tuple(_parse_int_list(args.unet_widths, "encoder widths"))
        if args.unet_widths
        else tuple(hl.get("encoder_widths", (16, 32, 64)))
    )
    if args.no_attention is not None:
        use_attention = not args.no_attention
    else:
        use_attention = bool(hl.get("use_attention", True))
    hall_cfg = HalluciNetConfig(encoder_widths=widths, use_attention=use_attention)

    command = args.command
    default_lambdas = (
        _DETECTOR_LAMBDAS if command in ("pretrain", "finetune") else _TRANSLATOR_LAMBDAS
    )
    lambdas = (
        float(pick(args.lambda_cls, tr.get("lambda_cls"), default_lambdas[0])),
        float(pick(args.lambda_reg, tr.get("lambda_reg"), default_lambdas[1])),
        float(pick(args.lambda_star, tr.get("lambda_star"), default_lambdas[2])),
    )
    eval_cfg = EvalConfig(
        score_threshold=float(pick(args.score_threshold, ev.get("score_threshold"), 0.05)),
        nms_iou=float(pick(args.nms_iou, ev.get("nms_iou"), 0.5)),
        max_detections=int(pick(args.max_dets, ev.get("max_detections"), 100)),
    )
    seeds = (
        _parse_int_list(args.seeds, "seeds")
        if args.seeds
        else [int(s) for s in cfg.get("seeds", (0, 1, 2))]
    )
    if not seeds:
        raise ConfigError("need at least one seed")

    spec = ExperimentSpec(
        command=command,
        out_root=out_root,
        experiment=args.exp,
        scene=scene,
        n_train=int(pick(args.n_train, ds.get("n_train"), 400)),
        n_test=int(pick(args.n_test, ds.get("n_test"), 100)),
        external_train=Path(ds["external_train"]) if ds.get("external_train") else None,
        external_test=Path(ds["external_test"]) if ds.get("external_test") else None,
        det_cfg=det_cfg,
        hall_cfg=hall_cfg,
        epochs=int(pick(args.epochs, tr.get("epochs"), _EPOCH_DEFAULTS.get(command, 8))),
        batch_size=int(pick(args.batch_size, tr.get("batch_size"), 8)),
        learning_rate=float(pick(args.lr, tr.get("learning_rate"), 1e-3)),
        optimizer=str(pick(args.optimizer, tr.get("optimizer"), "adam")),
        momentum=float(pick(args.momentum, tr.get("momentum"), 0.9)),
        lambdas=lambdas,
        reg_kind=str(pick(args.reg_kind, tr.get("reg_kind"), "l1")),
        train_fraction=float(pick(args.train_fraction, tr.get("train_fraction"), 1.0)),
        val_fraction=float(pick(args.val_fraction, tr.get("val_fraction"), 0.2)),
        eval_cfg=eval_cfg,
        seeds=seeds,
        check_min_ap=args.check_min_ap,
    )
    if command == "baseline":
        if not args.method:
            raise ConfigError("baseline requires --method (e.g. one of "
                              f"{classic_method_keys()} or an op chain like invert+stretch)")
        spec.method = args.method
    if command == "eval":
        if not args.detector:
            raise ConfigError("eval requires --detector CKPT")
        spec.eval_detector = Path(args.detector)
        spec.eval_translator = Path(args.translator) if args.translator else None
        spec.method = args.method
        spec.eval_source = args.source
        spec.eval_label = args.label
        spec.eval_seed = args.seed if args.seed is not None else 0
        if spec.eval_translator and spec.method:
            raise ConfigError("eval takes --translator or --method, not both")
        if spec.eval_source == "rgb" and (spec.eval_translator or spec.method):
            raise ConfigError("eval on the rgb source takes no translator")
    if command == "sweep-fraction":
        spec.fractions = (
            _parse_float_list(args.fractions, "fractions")
            if args.fractions
            else [0.1, 0.25, 0.5, 1.0]
        )
    if command == "sweep-lambda":
        spec.lambda_grid = _parse_triple_grid(args.grid or DEFAULT_LAMBDA_GRID)
    if command == "sweep-capacity":
        spec.widths_grid = _parse_width_grid(args.widths_grid or DEFAULT_WIDTH_GRID)
    if command == "panel":
        spec.panel_rows = (
            [tok.strip() for tok in args.rows.split(",") if tok.strip()]
            if args.rows
            else ["rgb", "none", "invert", "hallucidet"]
        )
        spec.panel_samples = args.samples
        spec.panel_seed = args.seed
    return spec


# ---------------------------------------------------------------------------
# Data and artifact helpers


def _load_data(spec: ExperimentSpec) -> tuple[list, list]:
    if spec.external_train or spec.external_test:
        if not (spec.external_train and spec.external_test):
            raise ConfigError("external datasets need both external_train and external_test")
        return list(load_external(spec.external_train)), list(load_external(spec.external_test))
    train, test = generate_dataset(spec.scene, spec.n_train, spec.n_test)
    return list(train), list(test)


def _write_resolved(spec: ExperimentSpec) -> None:
    path = spec.exp_dir / "resolved" / f"{spec.command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(spec.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_report(spec: ExperimentSpec, name: str, payload: dict) -> None:
    path = spec.exp_dir / "reports" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit_rows(spec: ExperimentSpec, rows: list[MetricsRow]) -> None:
    append_metrics_rows(spec.metrics_path, rows)
    write_summary(
        spec.exp_dir / "summary.json", summarize_rows(read_metrics_rows(spec.metrics_path))
    )


def _require_detector(spec: ExperimentSpec, seed: int) -> Detector:
    path = spec.detector_path(seed)
    if not path.exists():
        raise ConfigError(
            f"missing detector checkpoint {path}; run `hallucilab pretrain` for this experiment first"
        )
    det = load_detector(path)
    if det.config != spec.det_cfg:
        raise ConfigError(
            f"{path}: checkpoint detector config {det.config} does not match spec {spec.det_cfg}"
        )
    return det


def _check_gate(spec: ExperimentSpec, rows: list[MetricsRow], method: str) -> None:
    if spec.check_min_ap is None:
        return
    vals = [r.ap50 for r in rows if r.method == method or method == "*"]
    mean = sum(vals) / len(vals)
    if mean < spec.check_min_ap:
        raise AcceptanceFailure(
            f"mean ap50 {mean:.4f} over {len(vals)} run(s) of {method!r} "
            f"is below the required {spec.check_min_ap}"
        )


# ---------------------------------------------------------------------------
# Commands


def cmd_pretrain(spec: ExperimentSpec) -> list[MetricsRow]:
    train, test = _load_data(spec)
    rows = []
    for seed in spec.seeds:
        params, report = pretrain_rgb_detector(train, spec.det_cfg, spec.train_config(seed))
        det = Detector(spec.det_cfg, params)
        save_detector(spec.detector_path(seed), det)
        ap_rgb = evaluate_pipeline(None, det, test, spec.eval_cfg, source="rgb")
        ap_none = evaluate_pipeline(None, det, test, spec.eval_cfg, source="ir")
        rows.append(MetricsRow(spec.experiment, spec.detector_label, "rgb", seed, ap_rgb))
        rows.append(MetricsRow(spec.experiment, spec.detector_label, "none", seed, ap_none))
        _write_report(
            spec,
            f"pretrain_seed{seed}",
            {**report.to_dict(), "test_ap50_rgb": ap_rgb, "test_ap50_none": ap_none},
        )
        print(f"pretrain seed {seed}: test rgb ap50={ap_rgb:.4f}, no-adaptation ir ap50={ap_none:.4f}")
    _emit_rows(spec, rows)
    _check_gate(spec, rows, "rgb")
    return rows


def cmd_finetune(spec: ExperimentSpec) -> list[MetricsRow]:
    train, test = _load_data(spec)
    rows = []
    for seed in spec.seeds:
        det = _require_detector(spec, seed)
        params, report = finetune_ir_detector(
            det.params, train, spec.det_cfg, spec.train_config(seed)
        )
        tuned = Detector(spec.det_cfg, params)
        save_detector(spec.exp_dir / "finetuned" / f"seed{seed}.ckpt", tuned)
        ap = evaluate_pipeline(None, tuned, test, spec.eval_cfg, source="ir")
        rows.append(MetricsRow(spec.experiment, spec.detector_label, "finetune", seed, ap))
        _write_report(spec, f"finetune_seed{seed}", {**report.to_dict(), "test_ap50": ap})
        print(f"finetune seed {seed}: test ir ap50={ap:.4f}")
    _emit_rows(spec, rows)
    _check_gate(spec, rows, "finetune")
    return rows


def cmd_hallucidet(spec: ExperimentSpec) -> list[MetricsRow]:
    train, test = _load_data(spec)
    rows = []
    for seed in spec.seeds:
        det = _require_detector(spec, seed)
        rgb_before = evaluate_pipeline(None, det, test, spec.eval_cfg, source="rgb")
        params, report = train_hallucidet(
            det.params, spec.det_cfg, train, spec.hall_cfg, spec.train_config(seed)
        )
        rgb_after = evaluate_pipeline(None, det, test, spec.eval_cfg, source="rgb")
        if rgb_after != rgb_before:
            raise FrozenParamViolation(
                f"detector RGB AP drifted during translator training: "
                f"{rgb_before!r} -> {rgb_after!r}"
            )
        translator = Translator(spec.hall_cfg, params)
        save_translator(spec.exp_dir / "translators" / f"hallucidet_seed{seed}.ckpt", translator)
        ap = evaluate_pipeline(translator, det, test, spec.eval_cfg, source="ir")
        rows.append(MetricsRow(spec.experiment, spec.detector_label, "hallucidet", seed, ap))
        _write_report(
            spec,
            f"hallucidet_seed{seed}",
            {
                **report.to_dict(),
                "test_ap50": ap,
                "rgb_ap50_before": rgb_before,
                "rgb_ap50_after": rgb_after,
            },
        )
        print(f"hallucidet seed {seed}: test ir ap50={ap:.4f} (frozen rgb ap50={rgb_after:.4f})")
    _emit_rows(spec, rows)
    _check_gate(spec, rows, "hallucidet")
    return rows


def cmd_baseline(spec: ExperimentSpec) -> list[MetricsRow]:
    translator = translator_from_key(spec.method)
    _, test = _load_data(spec)
    rows = []
    for seed in spec.seeds:
        det = _require_detector(spec, seed)
        ap = evaluate_pipeline(translator, det, test, spec.eval_cfg, source="ir")
        rows.append(MetricsRow(spec.experiment, spec.detector_label, spec.method, seed, ap))
        print(f"baseline {spec.method} seed {seed}: test ir ap50={ap:.4f}")
    _emit_rows(spec, rows)
    _check_gate(spec, rows, spec.method)
    return rows


def cmd_recon(spec: ExperimentSpec) -> list[MetricsRow]:
    train, test = _load_data(spec)
    rows = []
    for seed in spec.seeds:
        det = _require_detector(spec, seed)
        params, report = train_reconstruction_translator(
            train, spec.hall_cfg, spec.train_config(seed)
        )
        translator = Translator(spec.hall_cfg, params)
        save_translator(spec.exp_dir / "translators" / f"recon_seed{seed}.ckpt", translator)
        ap = evaluate_pipeline(translator, det, test, spec.eval_cfg, source="ir")
        rows.append(MetricsRow(spec.experiment, spec.detector_label, "recon", seed, ap))
        _write_report(spec, f"recon_seed{seed}", {**report.to_dict(), "test_ap50": ap})
        print(f"recon seed {seed}: test ir ap50={ap:.4f}")
    _emit_rows(spec, rows)
    _check_gate(spec, rows, "recon")
    return rows


def cmd_eval(spec: ExperimentSpec) -> list[MetricsRow]:
    _, test = _load_data(spec)
    if not spec.eval_detector.exists():
        raise ConfigError(f"detector checkpoint not found: {spec.eval_detector}")
    det = load_detector(spec.eval_detector)
    translator = None
    label = spec.eval_label
    if spec.eval_translator:
        if not spec.eval_translator.exists():
            raise ConfigError(f"translator checkpoint not found: {spec.eval_translator}")
        translator = load_translator(spec.eval_translator)
        label = label or f"eval-{spec.eval_translator.stem}"
    elif spec.method:
        translator = translator_from_key(spec.method)
        label = label or f"eval-{spec.method}"
    else:
        label = label or ("eval-rgb" if spec.eval_source == "rgb" else "eval-none")
    ap = evaluate_pipeline(translator, det, test, spec.eval_cfg, source=spec.eval_source)
    detector_label = f"af-w{det.config.width}"
    rows = [MetricsRow(spec.experiment, detector_label, label, spec.eval_seed, ap)]
    print(f"eval {label}: ap50={ap:.4f}")
    _emit_rows(spec, rows)
    _check_gate(spec, rows, label)
    return rows


def cmd_sweep_fraction(spec: ExperimentSpec) -> list[MetricsRow]:
    train, test = _load_data(spec)
    rows = []
    series: dict[str, list[tuple[float, float]]] = {}
    for fraction in spec.fractions:
        for seed in spec.seeds:
            det = _require_detector(spec, seed)
            cfg = spec.train_config(seed, train_fraction=fraction)
            params, report = train_hallucidet(det.params, spec.det_cfg, train, spec.hall_cfg, cfg)
            translator = Translator(spec.hall_cfg, params)
            save_translator(
                spec.exp_dir / "translators" / f"hallucidet_f{fraction:g}_seed{seed}.ckpt",
                translator,
            )
            ap = evaluate_pipeline(translator, det, test, spec.eval_cfg, source="ir")
            method = f"hallucidet@f={fraction:g}"
            rows.append(MetricsRow(spec.experiment, spec.detector_label, method, seed, ap))
            series.setdefault(f"seed{seed}", []).append((fraction, ap))
            _write_report(
                spec,
                f"sweep_fraction_f{fraction:g}_seed{seed}",
                {**report.to_dict(), "fraction": fraction, "test_ap50": ap},
            )
            print(f"sweep-fraction f={fraction:g} seed {seed}: ap50={ap:.4f}")
    by_fraction: dict[float, list[float]] = {}
    for row in rows:
        frac = float(row.method.split("=", 1)[1])
        by_fraction.setdefault(frac, []).append(row.ap50)
    series["mean"] = [(f, sum(v) / len(v)) for f, v in sorted(by_fraction.items())]
    render_sweep_plot(series, spec.exp_dir / "panels" / "sweep_fraction.png", "train fraction")
    _emit_rows(spec, rows)
    _check_gate(spec, rows, "*")
    return rows


def cmd_sweep_lambda(spec: ExperimentSpec) -> list[MetricsRow]:
    train, test = _load_data(spec)
    rows = []
    series: dict[str, list[tuple[float, float]]] = {}
    for g_idx, lambdas in enumerate(spec.lambda_grid):
        for seed in spec.seeds:
            det = _require_detector(spec, seed)
            cfg = spec.train_config(seed, weights=LossWeights(*lambdas))
            params, report = train_hallucidet(det.params, spec.det_cfg, train, spec.hall_cfg, cfg)
            translator = Translator(spec.hall_cfg, params)
            tag = ":".join(f"{v:g}" for v in lambdas)
            save_translator(
                spec.exp_dir / "translators" / f"hallucidet_l{tag.replace(':', '-')}_seed{seed}.ckpt",
                translator,
            )
            ap = evaluate_pipeline(translator, det, test, spec.eval_cfg, source="ir")
            method = f"hallucidet@l={tag}"
            rows.append(MetricsRow(spec.experiment, spec.detector_label, method, seed, ap))
            series.setdefault(f"seed{seed}", []).append((float(g_idx), ap))
            _write_report(
                spec,
                f"sweep_lambda_{tag.replace(':', '-')}_seed{seed}",
                {**report.to_dict(), "lambdas": list(lambdas), "test_ap50": ap},
            )
            print(f"sweep-lambda ({tag}) seed {seed}: ap50={ap:.4f}")
    render_sweep_plot(series, spec.exp_dir / "panels" / "sweep_lambda.png", "grid row")
    _emit_rows(spec, rows)
    _check_gate(spec, rows, "*")
    return rows


def cmd_sweep_capacity(spec: ExperimentSpec) -> list[MetricsRow]:
    train, test = _load_data(spec)
    rows = []
    series: dict[str, list[tuple[float, float]]] = {}
    capacities = {}
    for widths in spec.widths_grid:
        hall_cfg = HalluciNetConfig(encoder_widths=widths, use_attention=spec.hall_cfg.use_attention)
        n_params = count_params(hall_cfg)
        tag = "-".join(str(v) for v in widths)
        capacities[tag] = n_params
        for seed in spec.seeds:
            det = _require_detector(spec, seed)
            cfg = spec.train_config(seed)
            params, report = train_hallucidet(det.params, spec.det_cfg, train, hall_cfg, cfg)
            translator = Translator(hall_cfg, params)
            save_translator(
                spec.exp_dir / "translators" / f"hallucidet_w{tag}_seed{seed}.ckpt", translator
            )
            ap = evaluate_pipeline(translator, det, test, spec.eval_cfg, source="ir")
            method = f"hallucidet@w={tag}"
            rows.append(MetricsRow(spec.experiment, spec.detector_label, method, seed, ap))
            series.setdefault(f"seed{seed}", []).append((float(n_params), ap))
            _write_report(
                spec,
                f"sweep_capacity_w{tag}_seed{seed}",
                {**report.to_dict(), "encoder_widths": list(widths), "n_params": n_params, "test_ap50": ap},
            )
            print(f"sweep-capacity w={tag} ({n_params} params) seed {seed}: ap50={ap:.4f}")
    render_sweep_plot(series, spec.exp_dir / "panels" / "sweep_capacity.png", "translator params")
    _write_report(spec, "sweep_capacity_params", capacities)
    _emit_rows(spec, rows)
    _check_gate(spec, rows, "*")
    return rows


def cmd_report(spec: ExperimentSpec) -> list[MetricsRow]:
    rows = read_metrics_rows(spec.metrics_path)
    summary = summarize_rows(rows)
    write_summary(spec.exp_dir / "summary.json", summary)
    for experiment, methods in summary.items():
        print(f"experiment {experiment}:")
        for method, stats in sorted(methods.items(), key=lambda kv: -kv[1]["mean_ap50"]):
            print(
                f"  {method:<28} ap50 {stats['mean_ap50']:.4f} +/- {stats['std_ap50']:.4f}"
                f"  (n={stats['n_seeds']})"
            )
    if spec.check_min_ap is not None:
        candidates = [
            (m, s["mean_ap50"]) for methods in summary.values() for m, s in methods.items()
        ]
        if not candidates:
            raise AcceptanceFailure("no recorded runs to check against --check-min-ap")
        best_method, best = max(candidates, key=lambda kv: kv[1])
        if best < spec.check_min_ap:
            raise AcceptanceFailure(
                f"best method {best_method!r} mean ap50 {best:.4f} is below "
                f"the required {spec.check_min_ap}"
            )
    return rows


def cmd_panel(spec: ExperimentSpec) -> list[MetricsRow]:
    _, test = _load_data(spec)
    samples = test[: spec.panel_samples]
    if not samples:
        raise ConfigError("no test samples available for the panel")
    seed = spec.panel_seed if spec.panel_seed is not None else spec.seeds[0]
    rows = []
    for name in spec.panel_rows:
        if name == "rgb":
            rows.append(("rgb + ground truth", "rgb_gt", None, None))
            continue
        if name == "finetune":
            path = spec.exp_dir / "finetuned" / f"seed{seed}.ckpt"
            if not path.exists():
                raise ConfigError(f"panel row 'finetune' needs {path}; run finetune first")
            rows.append((f"finetune (seed {seed})", "pred", None, load_detector(path)))
            continue
        det = _require_detector(spec, seed)
        if name == "none":
            rows.append(("no adaptation", "pred", None, det))
        elif name in ("hallucidet", "recon"):
            path = spec.exp_dir / "translators" / f"{name}_seed{seed}.ckpt"
            if not path.exists():
                raise ConfigError(f"panel row {name!r} needs {path}; run {name} first")
            rows.append((f"{name} (seed {seed})", "pred", load_translator(path), det))
        else:
            rows.append((name, "pred", translator_from_key(name), det))
    out = spec.exp_dir / "panels" / "panel.png"
    render_panel(samples, rows, out)
    print(f"panel written to {out}")
    return []


_DISPATCH = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "hallucidet": cmd_hallucidet,
    "baseline": cmd_baseline,
    "recon": cmd_recon,
    "eval": cmd_eval,
    "sweep-fraction": cmd_sweep_fraction,
    "sweep-lambda": cmd_sweep_lambda,
    "sweep-capacity": cmd_sweep_capacity,
    "report": cmd_report,
    "panel": cmd_panel,
}


def run(spec: ExperimentSpec) -> int:
    spec.exp_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(spec)
    _DISPATCH[spec.command](spec)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output root (default: ${ENV_OUT} or ./runs)")
    common.add_argument("--exp", default="bench", help="experiment name (default: bench)")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seeds", help="comma-separated training seeds (default: 0,1,2)")
    common.add_argument("--n-train", type=int, dest="n_train")
    common.add_argument("--n-test", type=int, dest="n_test")
    common.add_argument("--image-size", dest="image_size", help="H,W")
    common.add_argument("--light-level", type=float, dest="light_level")
    common.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    common.add_argument("--dataset-seed", type=int, dest="dataset_seed")
    common.add_argument("--det-width", type=int, dest="det_width")
    common.add_argument("--unet-widths", dest="unet_widths", help="comma-separated encoder widths")
    common.add_argument("--no-attention", action="store_true", default=None, dest="no_attention")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int, dest="batch_size")
    common.add_argument("--lr", type=float)
    common.add_argument("--optimizer", choices=("adam", "sgd"))
    common.add_argument("--momentum", type=float)
    common.add_argument("--lambda-cls", type=float, dest="lambda_cls")
    common.add_argument("--lambda-reg", type=float, dest="lambda_reg")
    common.add_argument("--lambda-star", type=float, dest="lambda_star")
    common.add_argument("--reg-kind", choices=("l1", "l2"), dest="reg_kind")
    common.add_argument("--train-fraction", type=float, dest="train_fraction")
    common.add_argument("--val-fraction", type=float, dest="val_fraction")
    common.add_argument("--score-threshold", type=float, dest="score_threshold")
    common.add_argument("--nms-iou", type=float, dest="nms_iou")
    common.add_argument("--max-dets", type=int, dest="max_dets")
    common.add_argument(
        "--check-min-ap",
        type=float,
        dest="check_min_ap",
        help="exit 4 unless mean ap50 meets this bar (training/eval commands gate "
        "their own runs; report gates the best recorded method)",
    )

    parser = argparse.ArgumentParser(
        prog="hallucilab",
        description="Desk-scale lab for detection-guided IR-to-RGB translation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train per-seed detectors on RGB")
    sub.add_parser("finetune", parents=[common], help="fine-tune pretrained detectors on gray IR")
    sub.add_parser("hallucidet", parents=[common], help="train translators through frozen detectors")
    p = sub.add_parser("baseline", parents=[common], help="evaluate a classical pixel translation")
    p.add_argument("--method", help="canonical method key, e.g. invert or invert+stretch")
    sub.add_parser("recon", parents=[common], help="train reconstruction-only translators")
    p = sub.add_parser("eval", parents=[common], help="evaluate explicit checkpoints")
    p.add_argument("--detector", help="detector checkpoint path")
    p.add_argument("--translator", help="translator checkpoint path")
    p.add_argument("--method", help="classical method key instead of a checkpoint")
    p.add_argument("--source", choices=("ir", "rgb"), default="ir")
    p.add_argument("--label", help="method label for the CSV row")
    p.add_argument("--seed", type=int, help="seed label for the CSV row")
    p = sub.add_parser("sweep-fraction", parents=[common], help="training-set fraction ablation")
    p.add_argument("--fractions", help="comma-separated fractions (default 0.1,0.25,0.5,1.0)")
    p = sub.add_parser("sweep-lambda", parents=[common], help="loss-weight ablation")
    p.add_argument("--grid", help=f"semicolon-separated triples (default {DEFAULT_LAMBDA_GRID})")
    p = sub.add_parser("sweep-capacity", parents=[common], help="translator capacity ablation")
    p.add_argument("--widths-grid", dest="widths_grid",
                   help=f"semicolon-separated width lists (default {DEFAULT_WIDTH_GRID})")
    sub.add_parser("report", parents=[common], help="aggregate the metrics CSV")
    p = sub.add_parser("panel", parents=[common], help="render a qualitative panel")
    p.add_argument("--rows", help="comma-separated rows (default rgb,none,invert,hallucidet)")
    p.add_argument("--samples", type=int, default=6)
    p.add_argument("--seed", type=int, help="which seed's checkpoints to render")
    return parser


def _error_json(exit_code: int, exc: Exception) -> None:
    print(
        json.dumps(
            {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code}
        ),
        file=sys.stderr,
    )


def main(argv: list[str] | None = None) -> int:
    # Single-threaded torch keeps floating-point reductions reproducible
    # across runs and avoids oversubscription on small machines.
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = resolve_spec(args)
        return run(spec)
    except TrainingDiverged as exc:
        _error_json(3, exc)
        return 3
    except AcceptanceFailure as exc:
        _error_json(4, exc)
        return 4
    except (HalluciLabError, FileNotFoundError) as exc:
        _error_json(2, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
