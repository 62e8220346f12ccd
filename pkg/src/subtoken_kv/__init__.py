"""Sub-token KV cache compression on a small numpy transformer.

Values are split into contiguous groups that can be dropped, reconstructed
(query-independent routing), or selected per query (query-aware top-M), with
routed low-rank adapters making the frozen base compression-aware.
"""

from .checkpoint import load_model, load_predictors, read_arrays, save_model, save_predictors, write_arrays
from .data import BOS_ID, EOS_ID, VOCAB_SIZE, CorpusStream, encode_chunk, write_synthetic_corpus
from .errors import CheckpointError, ConfigError, GradCheckError, TrainingDiverged
from .evaluation import (
    AgreementRecord,
    DiagnosticsResult,
    predictor_mask_overlap,
    qa_agreement,
    qa_budget_sweep,
    run_diagnostics,
)
from .gradcheck import GRAD_TOL, run_gradcheck_suite
from .model import ForwardResult, KVSnapshot, ModelConfig, TransformerModel
from .qa_selector import (
    DiagnosticSelector,
    FixedSelection,
    PredictorSelector,
    ScorePredictor,
    Selection,
    SelectionContext,
    TokenPredictor,
    combined_selection,
    diagnostic_alpha,
    fixed_k_mask,
    global_topm_mask,
    group_major_values,
    mask_overlap,
    pair_scores,
    token_keep_set,
)
from .routed_lora import RoutedLora, route_scores, routed_projection, sparse_topk_normalize
from .training import (
    AdamW,
    MetricsWriter,
    TrainConfig,
    collect_predictor_targets,
    evaluate_val_loss,
    loss_aux,
    loss_lm,
    loss_load_balance,
    loss_predictor,
    lr_at,
    pretrain_base,
    train_predictors,
    train_qi,
)
from .value_groups import (
    BudgetSpec,
    GroupRouter,
    Reconstructor,
    RetentionInfo,
    SelectionMask,
    kv_retention_fraction,
    partition_value,
    reconstruct_value,
    select_keep_groups,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AgreementRecord",
    "BOS_ID",
    "BudgetSpec",
    "CheckpointError",
    "ConfigError",
    "CorpusStream",
    "DiagnosticSelector",
    "DiagnosticsResult",
    "EOS_ID",
    "FixedSelection",
    "ForwardResult",
    "GRAD_TOL",
    "GradCheckError",
    "GroupRouter",
    "KVSnapshot",
    "MetricsWriter",
    "ModelConfig",
    "PredictorSelector",
    "Reconstructor",
    "RetentionInfo",
    "RoutedLora",
    "ScorePredictor",
    "Selection",
    "SelectionContext",
    "SelectionMask",
    "TokenPredictor",
    "TrainConfig",
    "TrainingDiverged",
    "TransformerModel",
    "VOCAB_SIZE",
    "collect_predictor_targets",
    "combined_selection",
    "diagnostic_alpha",
    "encode_chunk",
    "evaluate_val_loss",
    "fixed_k_mask",
    "global_topm_mask",
    "group_major_values",
    "kv_retention_fraction",
    "load_model",
    "load_predictors",
    "loss_aux",
    "loss_lm",
    "loss_load_balance",
    "loss_predictor",
    "lr_at",
    "mask_overlap",
    "pair_scores",
    "partition_value",
    "predictor_mask_overlap",
    "pretrain_base",
    "qa_agreement",
    "qa_budget_sweep",
    "read_arrays",
    "reconstruct_value",
    "route_scores",
    "routed_projection",
    "run_diagnostics",
    "run_gradcheck_suite",
    "save_model",
    "save_predictors",
    "select_keep_groups",
    "sparse_topk_normalize",
    "token_keep_set",
    "train_predictors",
    "train_qi",
    "write_arrays",
    "write_synthetic_corpus",
]
