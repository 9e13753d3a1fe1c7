"""Robust sparse ensembles: adversarial pruning, diversity-driven team selection and
dynamic early-exit inference, on a small numpy network engine."""
from .netcore import Batch, Model, build_model, forward, init_model, mlp_arch
from .attacks import AttackConfig, FailureMatrix, build_failure_matrix, fgsm_attack, pgd_attack
from .importance import METRICS, ImportanceScores, compute_scores
from .pruning import PruneConfig, adversarial_prune, make_mask
from .ensemble import (EedLossConfig, EnsembleTeam, PoolSpec, build_pool, eed_loss,
                       enumerate_teams, robust_diversity, select_team, train_ensemble)
from .die import DieConfig, die_evaluate, die_predict, optimal_stop
from .config import ExperimentConfig, load_config
from .report import MetricsReport, emit_report
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = [
    "Batch", "Model", "build_model", "forward", "init_model", "mlp_arch",
    "AttackConfig", "FailureMatrix", "build_failure_matrix", "fgsm_attack", "pgd_attack",
    "METRICS", "ImportanceScores", "compute_scores",
    "PruneConfig", "adversarial_prune", "make_mask",
    "EedLossConfig", "EnsembleTeam", "PoolSpec", "build_pool", "eed_loss", "enumerate_teams",
    "robust_diversity", "select_team", "train_ensemble",
    "DieConfig", "die_evaluate", "die_predict", "optimal_stop",
    "ExperimentConfig", "load_config", "MetricsReport", "emit_report", "run_pipeline",
]
