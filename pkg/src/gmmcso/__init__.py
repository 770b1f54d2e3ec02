"""Contextual stochastic optimization with Gaussian mixtures.

Submodules
----------
gmm        joint mixtures, closed-form conditioning, EM and AIC selection
flow       separable affine autoregressive flows with a mixture base
transport  Gaussian and discrete optimal transport, radius calculators
dro        conic programs, SAA and type-2 Wasserstein DRO solvers
multistage density-ratio weights, scenario-tree recursion and SDDP
bench      synthetic generators and experiment runners
"""

from .gmm import GaussianMixture, Partition, condition, fit_em, log_pdf, sample, select_k_aic

__version__ = "0.1.0"

__all__ = ["GaussianMixture", "Partition", "condition", "fit_em", "log_pdf", "sample", "select_k_aic", "__version__"]
