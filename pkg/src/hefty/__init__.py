"""Estimation of treatment effects on heavy-tailed responses.

Modules
-------
tail_model
    Zero / truncated-exponential / Pareto mixture: fitting, sampling, lift injection.
linear_models
    Least squares, Huber and logistic regression.
estimators
    Naive, winsorized and Huber estimators, exact binomial intervals.
causal
    Post-stratification, propensity weighting, doubly robust and double/debiased estimators.
simharness
    Deterministic Monte-Carlo suites and percentile grid search.
"""

from .errors import *  # noqa: F401,F403
from .estimators import (
    Dataset,
    EstimateResult,
    WinsorPolicy,
    clopper_pearson_ci,
    huber_ate,
    huber_per_arm,
    naive_estimate,
    winsorized_estimate,
)
from .linear_models import DesignMatrix, LinearFit, default_delta, huber_fit, logistic_fit, ols_fit
from .tail_model import (
    MixtureParams,
    fit_mixture,
    inject_lift,
    mixture_mean,
    sample_mixture,
)

__version__ = "0.1.0"
