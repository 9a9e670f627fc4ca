"""gda-kit - Grouped Differential Attention

A numpy implementation of differential attention with unbalanced
signal/noise head groups, plus the tooling around it: a byte-level
language model, finite-difference gradient certification, AdamW/WSD
pretraining, and function-preserving model growth.

Usage:
    # As a module
    python -m gda_kit alloc --heads 48

    # Via the console script
    gda-kit gradcheck --seeds 10
    gda-kit grow --ckpt final.gda --factor 2 --target-ratio 3 --audit --out grown/
"""

__version__ = "0.1.0"

from .accounting import allocation_table, flops_estimate, lm_param_count, param_count
from .attention import (
    AttentionParams,
    attention_maps,
    gda_backward,
    gda_forward,
    gda_forward_cached,
    init_attention_params,
    kv_partner,
    noise_partner,
)
from .checkpoint import Checkpoint
from .config import GdaConfig, LmConfig, TrainConfig, load_run_config, preset
from .corpus import ByteTokenizer, CorpusStream, ingest
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    CorpusError,
    DimensionError,
    GdaError,
    HeadIndexError,
    NonFiniteError,
    PlanError,
    TokenRangeError,
    TrainingAbort,
)
from .gradcheck import run_gradcheck, run_lm_gradcheck
from .growth import GrowthPlan, apply_plan, group_diff_grow, hyperclone_model, make_plan, verify_preservation
from .lm import generate, lm_forward
from .training import adamw_step, train, wsd_lr

__all__ = [
    "allocation_table",
    "flops_estimate",
    "lm_param_count",
    "param_count",
    "AttentionParams",
    "attention_maps",
    "gda_backward",
    "gda_forward",
    "gda_forward_cached",
    "init_attention_params",
    "kv_partner",
    "noise_partner",
    "Checkpoint",
    "GdaConfig",
    "LmConfig",
    "TrainConfig",
    "load_run_config",
    "preset",
    "ByteTokenizer",
    "CorpusStream",
    "ingest",
    "CheckpointError",
    "ConfigurationError",
    "CorpusError",
    "DimensionError",
    "GdaError",
    "HeadIndexError",
    "NonFiniteError",
    "PlanError",
    "TokenRangeError",
    "TrainingAbort",
    "run_gradcheck",
    "run_lm_gradcheck",
    "GrowthPlan",
    "apply_plan",
    "group_diff_grow",
    "hyperclone_model",
    "make_plan",
    "verify_preservation",
    "generate",
    "lm_forward",
    "adamw_step",
    "train",
    "wsd_lr",
]
