"""Difficulty-focused contrastive learning toolkit for knowledge tracing."""

from .augmentation import AugmentationConfig, AugmentationContext, apply_pipeline, make_views
from .data import (
    ColumnMap,
    DataSplit,
    Dataset,
    EmptyDatasetError,
    Interaction,
    SchemaError,
    Seq,
    SequenceBatch,
    Vocab,
    load_interactions,
    load_texts,
    make_batches,
    make_windows,
    sequences_to_batch,
    split_dataset,
)
from .difficulty import (
    DifficultySource,
    DifficultyTable,
    compute_ctt,
    dequantize,
    hard_negative,
    lookup,
    quantize,
)
from .metrics import PredictionRecord, UndefinedMetricError, auc, auc_from_arrays, rmse, rmse_from_arrays
from .model import EmbeddingTables, KTModel, ModelConfig, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate_dataset
from .textdiff import (
    TextDiffModel,
    TextModelConfig,
    TextPair,
    char_length_analysis,
    evaluate_difficulty_prediction,
    fill_unseen,
    fit_text_model,
    predict_difficulty,
)
from .training import (
    ContrastiveViews,
    DivergenceError,
    TrainingConfig,
    bce_loss,
    contrastive_loss,
    evaluate_model,
    info_nce_similarity,
    k_fold_cv,
    total_loss,
    train,
)

__version__ = "0.1.0"
