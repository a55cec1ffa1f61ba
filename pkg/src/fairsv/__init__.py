"""Speaker-verification backends on pre-extracted embeddings, with
group-balanced training and calibration-sensitive fairness evaluation."""

from .data import (EmbeddingSet, GroupAssignment, ScoreSet, TrialList,
                   build_group_assignment, load_embeddings, load_scores,
                   load_trials, save_embeddings_binary, save_embeddings_text,
                   save_scores, save_trials)
from .errors import DataError, FairsvError, NumericalError
from .generative import (GenerativeBackend, PldaBackend,
                         compute_balancing_weights, fit_calibration, fit_lda,
                         fit_plda, length_normalize, plda_llr,
                         sample_calibration_trials, score_pipeline,
                         two_cov_llr_params)
from .discriminative import (ConditionCalibrator, DcapldaBackend,
                             DiscriminativeBackend, DpldaBackend, TrainConfig,
                             dcaplda_score, dplda_score, gradient_check,
                             init_from_generative, make_balanced_batches, train)
from .metrics import (GroupMetrics, MetricsReport, bayes_threshold,
                      bootstrap_ci, error_rates, evaluate, fdr,
                      fit_affine_calibration, min_cllr_affine, score_histograms,
                      weighted_cllr)
from .model_io import load_model, model_summary, save_model
from .synthetic import (SynthConfig, generate, inject_skew, oracle_llr,
                        oracle_llr_set)
from .trials import (Chunk, ChunkPlan, build_trials, load_speech_regions,
                     plan_chunks, sample_training_durations, save_chunk_plans)

__version__ = "0.1.0"
