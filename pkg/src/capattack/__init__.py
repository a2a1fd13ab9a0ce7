"""Targeted partial-caption adversarial attacks on a small trainable
image captioner, with exact expectation and margin machinery for the
latent (unconstrained) caption positions.
"""

__version__ = "0.1.0"

from .baselines import BaselineConfig, logit_margin_attack, logits_attack, untargeted_attack
from .data import SyntheticDataset, default_vocab, gen_synthetic, load_dataset, save_dataset
from .errors import (
    CapAttackError,
    ContractError,
    DimensionError,
    GuardError,
    InputError,
    NumericalError,
    TrainingError,
)
from .gem import ElboReport, GemConfig, e_step, elbo, gem_attack, m_step
from .harness import (
    AttackMetrics,
    AttackOutcome,
    ExperimentReport,
    compute_metrics,
    kendall_tau,
    lambda_sweep,
    make_partial_targets,
    run_experiment,
    select_eval_pairs,
)
from .inference import (
    FactorizedPosterior,
    PartialCaption,
    greedy_decode,
    latent_completion,
    loss_augmented_infer,
    marginal_logprob_oracle,
)
from .lssvm import LssvmConfig, lssvm_attack, structured_loss
from .model import (
    BOS,
    EOS,
    AdversarialState,
    CaptionModel,
    ModelConfig,
    ModelParams,
    Vocab,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sequence_logprob,
    train_toy,
)
from .numerics.kernels import BACKEND

__all__ = [
    "__version__",
    "BACKEND",
    "BOS",
    "EOS",
    "AdversarialState",
    "AttackMetrics",
    "AttackOutcome",
    "BaselineConfig",
    "CapAttackError",
    "CaptionModel",
    "ContractError",
    "DimensionError",
    "ElboReport",
    "ExperimentReport",
    "FactorizedPosterior",
    "GemConfig",
    "GuardError",
    "InputError",
    "LssvmConfig",
    "ModelConfig",
    "ModelParams",
    "NumericalError",
    "PartialCaption",
    "SyntheticDataset",
    "TrainingError",
    "Vocab",
    "compute_metrics",
    "default_vocab",
    "e_step",
    "elbo",
    "gem_attack",
    "gen_synthetic",
    "greedy_decode",
    "init_params",
    "kendall_tau",
    "lambda_sweep",
    "latent_completion",
    "load_checkpoint",
    "load_dataset",
    "logit_margin_attack",
    "logits_attack",
    "loss_augmented_infer",
    "lssvm_attack",
    "m_step",
    "make_partial_targets",
    "marginal_logprob_oracle",
    "run_experiment",
    "save_checkpoint",
    "save_dataset",
    "select_eval_pairs",
    "sequence_logprob",
    "structured_loss",
    "train_toy",
    "untargeted_attack",
]
