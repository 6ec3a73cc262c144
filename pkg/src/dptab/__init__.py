"""Differentially private tabular data synthesis with a small language model.

The pipeline: serialize tabular records as short natural-language sentences,
fine-tune a compact transformer in two stages (format learning on random
schema-valid rows, then DP-SGD on the sensitive rows with a format-aware
loss), sample new sentences, and decode them back into schema-valid rows.
Includes an RDP privacy accountant, fairness-controlled sampling, and
fidelity / privacy / downstream evaluation utilities.
"""

from .accountant import (
    DEFAULT_ORDERS,
    PrivacyLedger,
    PrivacySpec,
    calibrate_sigma,
    epsilon_floor,
    rdp_epsilon,
    rdp_to_epsilon,
    step_rdp,
)
from .checkpoint import CheckpointBundle, CheckpointError, load_checkpoint, save_checkpoint
from .codec import DecodeError, DecodeTally, decode_text, encode_record
from .config import ConfigError, RunConfig, read_config_file
from .evaluate import (
    BinningSpec,
    DCRResult,
    DownstreamResult,
    FairnessResult,
    TVDResult,
    dcr_histogram,
    fairness_metrics,
    gbt_downstream,
    kway_tvd,
)
from .gbt import GBTModel, GBTParams, auc_score, cross_validate_gbt, design_matrix, train_gbt
from .losses import (
    LossSpec,
    build_lambda_map,
    combined_loss,
    default_lambda_map,
    greedy_decode_number,
    nul,
    squared_error,
    stage1_ce,
    wcel,
)
from .model import ModelConfig, ModelState, forward, forward_batch, init_model, stage_trainable
from .sampler import (
    FairnessPlan,
    PromptSpec,
    SamplingReport,
    plan_fairness_quota,
    sample_fair_mixture,
    sample_rows,
)
from .schema import (
    FeatureSpec,
    Schema,
    SchemaError,
    Table,
    generate_random_table,
    infer_schema,
    load_csv,
    load_schema,
    save_csv,
    save_schema,
    split_table,
)
from .tokenizer import TokenizedExample, Vocab, build_vocab, detokenize, tokenize
from .trainer import (
    StageOneConfig,
    StageTwoConfig,
    TrainConfig,
    TrainResult,
    TrainingReport,
    measure_perplexity,
    two_stage_finetune,
)

__version__ = "0.1.0"

__all__ = [
    "BinningSpec",
    "CheckpointBundle",
    "CheckpointError",
    "ConfigError",
    "DCRResult",
    "DEFAULT_ORDERS",
    "DecodeError",
    "DecodeTally",
    "DownstreamResult",
    "FairnessPlan",
    "FairnessResult",
    "FeatureSpec",
    "GBTModel",
    "GBTParams",
    "LossSpec",
    "ModelConfig",
    "ModelState",
    "PrivacyLedger",
    "PrivacySpec",
    "PromptSpec",
    "RunConfig",
    "SamplingReport",
    "Schema",
    "SchemaError",
    "StageOneConfig",
    "StageTwoConfig",
    "TVDResult",
    "Table",
    "TokenizedExample",
    "TrainConfig",
    "TrainResult",
    "TrainingReport",
    "Vocab",
    "auc_score",
    "build_lambda_map",
    "build_vocab",
    "calibrate_sigma",
    "combined_loss",
    "cross_validate_gbt",
    "dcr_histogram",
    "decode_text",
    "default_lambda_map",
    "design_matrix",
    "detokenize",
    "encode_record",
    "epsilon_floor",
    "fairness_metrics",
    "forward",
    "forward_batch",
    "gbt_downstream",
    "generate_random_table",
    "greedy_decode_number",
    "infer_schema",
    "init_model",
    "kway_tvd",
    "load_checkpoint",
    "load_csv",
    "load_schema",
    "measure_perplexity",
    "nul",
    "plan_fairness_quota",
    "rdp_epsilon",
    "rdp_to_epsilon",
    "read_config_file",
    "sample_fair_mixture",
    "sample_rows",
    "save_checkpoint",
    "save_csv",
    "save_schema",
    "split_table",
    "squared_error",
    "stage1_ce",
    "stage_trainable",
    "step_rdp",
    "tokenize",
    "train_gbt",
    "two_stage_finetune",
    "wcel",
]
