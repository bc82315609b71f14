"""Unsupervised image-complexity representations at desk scale.

Heuristic complexity metrics, complexity-preserving view generation, a
momentum dual-encoder contrastive trainer with an entropy-prior auxiliary
loss, and correlation-based evaluation, all on top of a small numpy
autodiff core.
"""

from .config import TrainConfig, load_config, parse_config
from .encoder import EncoderState, encode, init_encoder, momentum_update
from .errors import (
    ClicError,
    ContractError,
    DataError,
    DegenerateSeriesError,
    NormalizationError,
    NumericFailure,
    ParameterError,
)
from .evaluation import gen_synthetic, pcc, probe, run_study, srcc
from .metrics import compression_ratio, edge_density, global_entropy, icd_stats, uae
from .trainer import NegativeQueue, cal_loss, fine_tune, info_nce, total_loss, train
from .views import crop_and_merge, make_pair, make_view

__version__ = "0.1.0"

__all__ = [
    "ClicError",
    "ContractError",
    "DataError",
    "DegenerateSeriesError",
    "EncoderState",
    "NegativeQueue",
    "NormalizationError",
    "NumericFailure",
    "ParameterError",
    "TrainConfig",
    "cal_loss",
    "compression_ratio",
    "crop_and_merge",
    "edge_density",
    "encode",
    "fine_tune",
    "gen_synthetic",
    "global_entropy",
    "icd_stats",
    "info_nce",
    "init_encoder",
    "load_config",
    "make_pair",
    "make_view",
    "momentum_update",
    "parse_config",
    "pcc",
    "probe",
    "run_study",
    "srcc",
    "total_loss",
    "train",
    "uae",
]
