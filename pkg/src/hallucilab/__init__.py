"""hallucilab: a desk-scale lab for detection-guided IR-to-RGB translation.

The package trains a small image-translation network through a frozen
RGB detector using only detection losses, and compares that route
against classical pixel manipulations, reconstruction-trained
translation, and detector fine-tuning under one bit-exact AP@50
protocol.
"""

from .classic import (
    classic_method_keys,
    compose_chain,
    gaussian_blur,
    gray_to_3ch,
    hist_equalize,
    hist_stretch,
    invert,
    parallel_combination,
    translator_from_key,
)
from .core import (
    BBox,
    ChecksumError,
    ConfigError,
    Detection,
    EmptyList,
    FrozenParamViolation,
    HalluciLabError,
    ImagePlane,
    LossWeights,
    MalformedAnnotation,
    MissingPair,
    Modality,
    NoGroundTruth,
    PairedSample,
    ParamStore,
    TrainingDiverged,
    bbox_area,
    derive_rng,
    load_checkpoint,
    load_png,
    planes_equal,
    quantize_u8,
    read_annotations,
    save_checkpoint,
    save_png,
    write_annotations,
)
from .data import Dataset, SceneConfig, export_dataset, generate_dataset, load_external
from .detector import (
    Detector,
    DetectorConfig,
    assign_targets,
    decode_detections,
    detection_loss,
    detector_forward,
    grid_centers,
    grid_shape,
    init_detector,
    load_detector,
    nms,
    save_detector,
)
from .hallucinet import (
    HalluciNetConfig,
    Translator,
    count_params,
    hallucinate,
    init_translator,
    load_translator,
    reconstruction_loss,
    save_translator,
)
from .metrics import (
    MetricsRow,
    aggregate_seeds,
    append_metrics_rows,
    average_precision_at_50,
    greedy_match,
    iou,
    read_metrics_rows,
    summarize_rows,
    write_summary,
)
from .panel import read_plot_points, render_panel, render_sweep_plot
from .train import (
    EvalConfig,
    TrainConfig,
    TrainReport,
    detection_loss_closure,
    evaluate_pipeline,
    finetune_ir_detector,
    gradient_check,
    hallucination_loss_closure,
    pretrain_rgb_detector,
    split_train_val,
    train_hallucidet,
    train_reconstruction_translator,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "ChecksumError",
    "ConfigError",
    "Dataset",
    "Detection",
    "Detector",
    "DetectorConfig",
    "EmptyList",
    "EvalConfig",
    "FrozenParamViolation",
    "HalluciLabError",
    "HalluciNetConfig",
    "ImagePlane",
    "LossWeights",
    "MalformedAnnotation",
    "MetricsRow",
    "MissingPair",
    "Modality",
    "NoGroundTruth",
    "PairedSample",
    "ParamStore",
    "SceneConfig",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "Translator",
    "aggregate_seeds",
    "append_metrics_rows",
    "assign_targets",
    "average_precision_at_50",
    "bbox_area",
    "classic_method_keys",
    "compose_chain",
    "count_params",
    "decode_detections",
    "derive_rng",
    "detection_loss",
    "detection_loss_closure",
    "detector_forward",
    "evaluate_pipeline",
    "export_dataset",
    "finetune_ir_detector",
    "gaussian_blur",
    "generate_dataset",
    "gradient_check",
    "gray_to_3ch",
    "greedy_match",
    "grid_centers",
    "grid_shape",
    "hallucinate",
    "hallucination_loss_closure",
    "hist_equalize",
    "hist_stretch",
    "init_detector",
    "init_translator",
    "invert",
    "iou",
    "load_checkpoint",
    "load_detector",
    "load_external",
    "load_png",
    "load_translator",
    "nms",
    "parallel_combination",
    "planes_equal",
    "pretrain_rgb_detector",
    "quantize_u8",
    "read_annotations",
    "read_metrics_rows",
    "read_plot_points",
    "reconstruction_loss",
    "render_panel",
    "render_sweep_plot",
    "save_checkpoint",
    "save_detector",
    "save_png",
    "save_translator",
    "split_train_val",
    "summarize_rows",
    "train_hallucidet",
    "train_reconstruction_translator",
    "translator_from_key",
    "write_annotations",
    "write_summary",
]
