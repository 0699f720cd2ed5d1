"""Skeleton action recognition with spatial topology gating MLPs, on a small
numpy autodiff engine."""

from .data import (
    DatasetManifest,
    ModalityKind,
    SkeletonGraph,
    SkeletonSequence,
    default_graph,
    derive_modality,
    load_arrays,
    preprocess,
    read_sample,
    synth_generate,
    write_sample,
)
from .estimator import ModalityTransformer, SitMlpClassifier, SkeletonPreprocessor
from .exceptions import ConfigError, ContractError, DataError, FormatError, ShapeError, SitMlpError, StateError
from .network import ModelConfig, SitMlpModel, count_flops, count_params, load_config
from .stgu import StguAblation, StguBlock, apply_ablation, export_attention
from .train import (
    EvalReport,
    TrainConfig,
    ensemble,
    evaluate,
    fit,
    load_model,
    lr_at,
    save_model,
    sgd_step,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DatasetManifest",
    "EvalReport",
    "FormatError",
    "ModalityKind",
    "ModalityTransformer",
    "ModelConfig",
    "ShapeError",
    "SitMlpClassifier",
    "SitMlpError",
    "SitMlpModel",
    "SkeletonGraph",
    "SkeletonPreprocessor",
    "SkeletonSequence",
    "StateError",
    "StguAblation",
    "StguBlock",
    "TrainConfig",
    "apply_ablation",
    "count_flops",
    "count_params",
    "default_graph",
    "derive_modality",
    "ensemble",
    "evaluate",
    "export_attention",
    "fit",
    "load_arrays",
    "load_config",
    "load_model",
    "lr_at",
    "preprocess",
    "read_sample",
    "save_model",
    "sgd_step",
    "synth_generate",
    "write_sample",
]
