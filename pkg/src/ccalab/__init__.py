"""Condition contrastive alignment and guidance on exactly enumerable toy sequence models."""
from .alignment import (AlignmentBatch, CCAHyperparams, DPOPairs, Objective, ResidualEstimator, TrainTrajectory,
                        cca_loss, dpo_loss, exact_loss_and_grad, make_negative_batch, mask_dropout, mle_loss, nce_loss,
                        train, train_nce, unlearn_loss)
from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .errors import CCALabError, ConfigurationError, DomainError, InputError, NumericalError
from .guidance import (GuidanceSpec, TabularClassifier, cfg_logits, classifier_guided_sequence_distribution,
                       guided_next_token_distribution, guided_sequence_distribution, sample_guided, train_classifier)
from .kernels import BACKEND
from .metrics import MetricsRecord, evaluate_policy, fidelity_and_diversity, kl_divergence, tv_distance
from .model import TabularARModel, model_distribution, sample_sequence
from .oracle import (TrueDistributionSpec, conditional_residual, lambda_c, make_spec, marginal_x, posterior,
                     target_distribution)
from .pipeline import run_pipeline
from .plotdata import emit_plot_data
from .space import SequenceDistribution, SequenceSpace, enumerate_sequences

__version__ = "0.1.0"
