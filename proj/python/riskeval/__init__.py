"""Rare-event risk estimation for scenario-based simulation.

Thin re-export of the compiled core: scenario spaces with latent-space
sampling, plain Monte Carlo and adaptive multilevel splitting estimators,
a normalizing-flow proposal with defensive importance sampling, and
failure-mode analysis (PCA, k-means, cluster likelihoods).
"""

from ._core import (
    Config,
    FlowModel,
    __version__,
    cluster_likelihoods,
    derive_seed,
    estimate_importance,
    estimate_naive,
    fit_flow,
    kmeans_cluster,
    load_config,
    mixture_log_weight,
    normal_cdf,
    normal_quantile,
    parse_config,
    pca_project,
    required_samples,
    run_ams,
    simulate_highway,
    wilson_interval,
)

__all__ = [
    "Config",
    "FlowModel",
    "__version__",
    "cluster_likelihoods",
    "derive_seed",
    "estimate_importance",
    "estimate_naive",
    "fit_flow",
    "kmeans_cluster",
    "load_config",
    "mixture_log_weight",
    "normal_cdf",
    "normal_quantile",
    "parse_config",
    "pca_project",
    "required_samples",
    "run_ams",
    "simulate_highway",
    "wilson_interval",
]
