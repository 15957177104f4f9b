"""Multi-task popularity and aesthetic-quality prediction for AI-generated
songs, plus a pairwise preference evaluation pipeline."""

from .datamodel import (DatasetSplit, FilterRules, SegmentEmbeddingSet, SongRecord,
                        filter_songs, load_embeddings, load_manifest, save_embeddings,
                        save_manifest, stratified_downsample, stratified_split)
from .losses import LossStrategy, combine_losses, task_mse
from .metrics import (aggregate_song_predictions, auc, f1, mse_mae, pearson,
                      spearman)
from .network import (ArchConfig, ModelParams, aggregate_layers, backward,
                      forward, init_model, load_checkpoint, save_checkpoint)
from .preference import (Battle, ScoreVector, battle_features, combined_scores,
                         cross_validate, logreg_fit, logreg_predict, naive_rule,
                         stratified_kfold)
from .scores import (LabelVector, ScoreTransformConfig, build_labels,
                     percentile_ranks, power_transform)
from .trainer import (GridAxes, SongSample, TrainConfig, TrainReport, adamw_step,
                      build_inputs, cosine_lr, run_grid, train)

__version__ = "0.1.0"
