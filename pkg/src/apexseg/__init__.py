"""Anatomy-guided pathology segmentation: dual query decoders over shared pixel embeddings."""

from .ablation import AblationConfig, ConfigError, build_model, grid, row_config
from .autodiff import GradientTape, NonFiniteError, ShapeError, Tensor, grad_check, no_grad
from .data import GeneratorConfig, SampleRecord, generate_sample, kfold_split, read_dataset, write_dataset
from .losses import hungarian_match, multitask_loss, segmentation_loss
from .metrics import aggregate_folds, boundary_iou, instance_map, iou
from .mixing import QueryMixer, attended_anatomy_report, mix
from .model import SegModel

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "ConfigError",
    "GeneratorConfig",
    "GradientTape",
    "NonFiniteError",
    "QueryMixer",
    "SampleRecord",
    "SegModel",
    "ShapeError",
    "Tensor",
    "aggregate_folds",
    "attended_anatomy_report",
    "boundary_iou",
    "build_model",
    "generate_sample",
    "grad_check",
    "grid",
    "hungarian_match",
    "instance_map",
    "iou",
    "kfold_split",
    "mix",
    "multitask_loss",
    "no_grad",
    "read_dataset",
    "row_config",
    "segmentation_loss",
    "write_dataset",
]
