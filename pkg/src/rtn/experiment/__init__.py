"""Configuration, training protocol, metrics and reports."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config_text, render_config
from .metrics import accuracy, auc, auc_pairwise, negative_recall
from .report import IndexDistribution, index_distribution, read_episode_log
from .runner import (
    AblationTable,
    MetricsReport,
    RunResult,
    evaluate,
    run_ablation_grid,
    run_folds,
    run_two_stage,
    train_agent,
    train_tmil,
)

__all__ = [
    "AblationTable",
    "ConfigError",
    "ExperimentConfig",
    "IndexDistribution",
    "MetricsReport",
    "RunResult",
    "accuracy",
    "auc",
    "auc_pairwise",
    "evaluate",
    "index_distribution",
    "load_config",
    "negative_recall",
    "parse_config_text",
    "read_episode_log",
    "render_config",
    "run_ablation_grid",
    "run_folds",
    "run_two_stage",
    "train_agent",
    "train_tmil",
]
