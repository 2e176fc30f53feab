"""Sparse multi-anchor word embeddings with context-aware reweighting.

Words are weighted combinations of a small shared pool of anchor
vectors; a grouped positional encoding gives all anchors of a word one
position, and a single attention layer reweights anchor contributions
in context before pooling and classification.
"""

from .codebook import (AnchorMatrix, CompressionReport, FlattenedEmbedding,
                       GroupedSequence, SparseCodebook, build_vp, compose,
                       compression_report, expand_slots, flatten_codebook,
                       load_codebook, lookup, save_codebook, unflatten)
from .data import (BayesReport, Corpus, SynthTaskSpec, Vocab, build_vocab,
                   encode, encode_corpus, enumerate_bayes, load_csv,
                   synth_polysemy)
from .distill import (DistillConfig, TeacherEmbedding, distill_loss,
                      learn_anchors, load_teacher, mean_cosine, save_teacher,
                      solve_codes, synthetic_teacher)
from .errors import (AdeError, ConfigurationError, CorruptionError, DataError,
                     DimensionError, GradientCheckError, MaskError,
                     TrainingError)
from .estimators import AdeClassifier, AnchorDistiller
from .evalbench import (MetricsReport, SweepConfig, SweepResult,
                        classification_metrics, evaluate_model, latency_bench,
                        run_ablation_sweep)
from .gpe import PositionalTable, grouped_pe, pos_indices, sinusoidal_pe
from .numcore import Tape, Var, finite_diff_check
from .pipeline import (AdeConfig, AdeModel, TrainConfig, build_model,
                       checkpoint_load, checkpoint_save, forward,
                       forward_no_sat, loss_and_grads, padding_mask,
                       predict_logits, train_classifier)
from .rng import SplitMix64
from .sat import (HeadParams, PoolerParams, SatParams, attention, classify,
                  count_params, pool, sat_forward)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
