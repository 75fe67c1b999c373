"""Knowledge tracing with disentangled counterfactual abilities and cognitive-bias diagnostics."""

from .data import (
    ConfigurationError,
    DataError,
    Dataset,
    DifficultyTable,
    Interaction,
    StudentSequence,
    bias_partition,
    compute_difficulty,
    kfold_split,
    parse_csv,
    preprocess,
    simulate,
)
from .metrics import MetricsReport, PredictionDump, report
from .model import ABLATIONS, DisentangledKT, ForwardTrace, ModelConfig
from .training import TrainConfig, fit, gradient_check, load_checkpoint, predict_dump, save_checkpoint

__version__ = "0.1.0"
