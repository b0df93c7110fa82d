"""Deconfounding with causally-constrained normalizing flows.

Fits an exact-likelihood flow with a Gaussian-mixture base to observed
(cause, effect) data under a causal-order constraint, then estimates
interventional expectations by resampling the recovered effect-side latent.
"""

from .adjust import (
    DoEstimate,
    LatentSample,
    adjusted_slopes,
    controlled_slopes,
    do_expectation,
    do_expectations,
    encode_dataset,
    naive_slopes,
)
from .evaluation import (
    CellSpec,
    EvalReport,
    mutual_information,
    mutual_information_labels,
    nadaraya_watson,
    rmse_do,
    rmse_naive,
    run_sweep,
)
from .flow import (
    FlowModel,
    extract_linear_slope,
    model_forward,
    model_inverse,
    model_log_likelihood,
    reparameterize_effect_latent,
)
from .gmm import GmmParams, gmm_init, gmm_log_density, gmm_sample
from .simulate import (
    SimScenario,
    invert_tau1,
    load_scenario,
    make_scenario,
    sample_confounder_joint,
    save_scenario,
    simulate,
    theta_star,
)
from .training import TrainConfig, TrainLog, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CellSpec", "DoEstimate", "EvalReport", "FlowModel", "GmmParams",
    "LatentSample", "SimScenario", "TrainConfig", "TrainLog",
    "adjusted_slopes", "controlled_slopes", "do_expectation", "do_expectations",
    "encode_dataset", "extract_linear_slope", "fit", "gmm_init",
    "gmm_log_density", "gmm_sample", "invert_tau1", "load_checkpoint",
    "load_scenario", "make_scenario", "model_forward", "model_inverse",
    "model_log_likelihood", "mutual_information", "mutual_information_labels",
    "naive_slopes", "nadaraya_watson", "reparameterize_effect_latent",
    "rmse_do", "rmse_naive", "run_sweep", "sample_confounder_joint",
    "save_checkpoint", "save_scenario", "simulate", "theta_star",
]
