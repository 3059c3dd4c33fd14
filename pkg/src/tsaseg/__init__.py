"""Semi-supervised segmentation with statistic-guided feature augmentation.

The package trains a small convolutional pixel classifier on a partially
labeled two-domain dataset. A teacher copy of the network (exponential moving
average of the student) pseudo-labels the unlabeled domain; per-class feature
statistics from both domains drive a closed-form augmented cross-entropy that
nudges labeled-domain features toward the unlabeled domain without sampling.
"""

from .config import ConfigError, RunConfig, parse_config, render_config
from .estimator import TsaSegmenter
from .metrics import MetricsRow, class_metrics, dice, jaccard
from .mixer import mix_in, mix_out, sample_mask
from .network import SegNetParams, ema_teacher_update, forward, init_params, sgd_step
from .numerics import FactorizationError, Rng, SymMat, cholesky
from .stats_bank import DIRECTIONS, StatsBank, batch_class_stats, confident_pixels
from .synth_data import (
    DomainSpec,
    FileFormatError,
    Sample,
    gen_dataset,
    gen_sample,
    read_manifest,
    read_sample,
    write_sample,
)
from .trainer import (
    TrainConfig,
    evaluate,
    init_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
    supervised_loss,
    train_step,
)
from .tsa_loss import (
    ClassifierHead,
    TsaConfig,
    alpha_at,
    augmented_logits,
    mc_bound_tightness,
    mc_explicit_loss,
    softmax_cross_entropy,
    tsa_loss,
)

__version__ = "0.1.0"

__all__ = [
    "ClassifierHead",
    "ConfigError",
    "DIRECTIONS",
    "DomainSpec",
    "FactorizationError",
    "FileFormatError",
    "MetricsRow",
    "Rng",
    "RunConfig",
    "Sample",
    "SegNetParams",
    "StatsBank",
    "SymMat",
    "TrainConfig",
    "TsaConfig",
    "TsaSegmenter",
    "alpha_at",
    "augmented_logits",
    "batch_class_stats",
    "cholesky",
    "class_metrics",
    "confident_pixels",
    "dice",
    "ema_teacher_update",
    "evaluate",
    "forward",
    "gen_dataset",
    "gen_sample",
    "init_params",
    "init_state",
    "jaccard",
    "load_checkpoint",
    "mc_bound_tightness",
    "mc_explicit_loss",
    "mix_in",
    "mix_out",
    "parse_config",
    "read_manifest",
    "read_sample",
    "render_config",
    "run_training",
    "sample_mask",
    "save_checkpoint",
    "sgd_step",
    "softmax_cross_entropy",
    "supervised_loss",
    "train_step",
    "tsa_loss",
    "write_sample",
]
