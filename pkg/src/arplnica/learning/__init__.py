from .elbo import GradientBundle, PSI_FLOOR, elbo, elbo_batch, elbo_grad, elbo_terms, elbo_value_and_grad
from .mstep import MStepResult, SufficientStats, mstep_closed_form, sufficient_stats
from .optim import AdamConfig, AdamState, adam_step, clip_by_global_norm, project_gamma_columns
from .vem import (FitConfig, FitState, dataset_elbo, fit_proxies, fit_vem, init_model, init_source_proxy,
                  load_fit_state, save_fit_state)

__all__ = [
    "GradientBundle", "PSI_FLOOR", "elbo", "elbo_batch", "elbo_grad", "elbo_terms", "elbo_value_and_grad",
    "MStepResult", "SufficientStats", "mstep_closed_form", "sufficient_stats",
    "AdamConfig", "AdamState", "adam_step", "clip_by_global_norm", "project_gamma_columns",
    "FitConfig", "FitState", "dataset_elbo", "fit_proxies", "fit_vem", "init_model", "init_source_proxy",
    "load_fit_state", "save_fit_state",
]
