"""Source-free semi-supervised domain adaptation at desk scale.

A patch-transformer classifier is pretrained on a synthetic source
domain, then adapted to a shifted target domain without source data,
combining probability-space contrastive learning, reliability-filtered
patch mixup, and EMA-prediction regularization.
"""

from .backbone import (
    AdaptableClassifier,
    EncoderConfig,
    ForwardOutput,
    MixSpec,
    lambda_hat,
    load_checkpoint,
    mix_patches,
    save_checkpoint,
)
from .config import load_run_config, write_default_config
from .data import (
    AugmentedPair,
    ConfigError,
    DatasetSplit,
    Sample,
    ShiftConfig,
    export_split,
    generate_synthetic_shift,
    make_batches,
    strong_augment,
)
from .engine import (
    PredictionStore,
    ReliableSet,
    RunConfig,
    adapt_target,
    assemble_mixed_batch,
    build_reliable_set,
    evaluate,
    pretrain_source,
    pseudo_label,
)
from .losses import (
    LossWeights,
    NonFiniteLossError,
    adaptive_weight,
    base_loss,
    mixup_ce_loss,
    mixup_contrastive_loss,
    pr_loss,
    pwc_loss,
    rmc_loss,
    total_loss,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
