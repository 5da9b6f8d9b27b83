"""Bayesian low-rank matrix completion with geodesic HMC on Stiefel manifolds."""

from .manifold import (expm, geodesic_step, project_to_tangent, sample_tangent_momentum,
                       uniform_stiefel_sample)
from .models import (ABState, Hyperparams, ModelKind, ObservationSet, SvdState, b_svd,
                     log_likelihood, log_posterior_unnorm, predict_entry)
from .samplers import (ChainSpec, HmcConfig, MemorySink, gibbs_sweep_ab, gibbs_sweep_svd,
                       hmc_euclidean_step, hmc_stiefel_step, run_chain)

__all__ = [
    "expm", "geodesic_step", "project_to_tangent", "sample_tangent_momentum",
    "uniform_stiefel_sample", "ABState", "Hyperparams", "ModelKind", "ObservationSet",
    "SvdState", "b_svd", "log_likelihood", "log_posterior_unnorm", "predict_entry",
    "ChainSpec", "HmcConfig", "MemorySink", "gibbs_sweep_ab", "gibbs_sweep_svd",
    "hmc_euclidean_step", "hmc_stiefel_step", "run_chain",
]
__version__ = "0.1.0"
