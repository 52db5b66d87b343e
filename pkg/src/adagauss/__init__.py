"""Exemplar-free class-incremental learning with adapted Gaussian class memories."""

from .classifier import ClassifierConfig, classify
from .config import RunConfig, load_config, parse_config
from .data import SyntheticSpec, TaskStream, generate_synthetic, load_csv_dataset, split_incremental
from .errors import AdaGaussError
from .memory import ClassGaussian, GaussianMemory, adapt_all, memorize_task
from .runner import AblationConfig, HyperParams, RunReport, run

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "AdaGaussError",
    "ClassGaussian",
    "ClassifierConfig",
    "GaussianMemory",
    "HyperParams",
    "RunConfig",
    "RunReport",
    "SyntheticSpec",
    "TaskStream",
    "adapt_all",
    "classify",
    "generate_synthetic",
    "load_config",
    "load_csv_dataset",
    "memorize_task",
    "parse_config",
    "run",
    "split_incremental",
]
