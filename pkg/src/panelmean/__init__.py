"""Bayesian proportional mean model for recurrent events seen as panel binary data."""
from .model import (
    DataError,
    ModelParams,
    PanelBinaryDataset,
    PriorSpec,
    SubjectRecord,
    TimeGrid,
    baseline_mean,
    build_time_grid,
    conditional_mean,
    delta_m,
    interval_load,
    log_likelihood,
    log_posterior,
    log_prior,
)
from .sampler import (
    PosteriorSamples,
    SamplerConfig,
    SamplerError,
    bayes_estimate_beta,
    bayes_estimate_rho,
    credible_interval,
    estimate_baseline_mean,
    estimate_mean_function,
    find_map,
    observed_information,
    run_chain,
    run_chains,
)

__version__ = "0.1.0"
