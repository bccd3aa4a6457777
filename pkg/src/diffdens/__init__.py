"""Diffusion-model log-density estimation on Gaussian-mixture benchmarks.

Two interchangeable estimators over one trained model: a Monte-Carlo
path-integral lower bound (embarrassingly parallel, near-constant per-sample
cost) and the probability-flow ODE (sequential, adaptive). Plus the ground
truth, training, and benchmarking needed to compare them.
"""

from . import _tuning

_tuning.apply()

from .analytic import (
    exact_em_field,
    exact_flow_divergence,
    exact_reverse_drift,
    exact_score_field,
    gaussian_log_density,
    gaussian_marginal,
)
from .gmm import (
    GaussianComponent,
    GaussianMixture,
    benchmark_mixture,
    gmm_log_density,
    gmm_sample,
    gmm_score,
    load_mixture,
    save_mixture,
)
from .nn import (
    MlpParams,
    batched_eps_divergence,
    forward,
    grad_input_dot,
    grad_params,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .pathint import EstimateConfig, LogDensityEstimate, control, integrand, log_density
from .pfode import OdeConfig, OdeResult, flow_field, log_density_ode
from .sde import (
    DiffusionProcess,
    TransitionKernel,
    diffusion_coef,
    drift,
    kernel_score,
    perturb,
    prior_log_density,
    reverse_sample,
    transition,
)
from .train import LossRecord, TrainConfig, denoising_target, loss_minibatch, train

__version__ = "0.1.0"
