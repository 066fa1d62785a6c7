"""Covariate-free treatment effect estimators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError, VarianceUndefinedError
from .linear_models import DesignMatrix, default_delta, huber_fit

WINSOR_MODES = ("separate", "unified_union", "unified_average")


@dataclass(frozen=True)
class Dataset:
    """Response, 0/1 assignment and optional covariates for one experiment."""

    response: np.ndarray
    assignment: np.ndarray
    covariates: Optional[np.ndarray] = None
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.response, dtype=float).ravel()
        t = np.asarray(self.assignment).ravel()
        if y.size != t.size:
            raise DomainError(f"response has {y.size} rows, assignment {t.size}")
        if not np.all(np.isfinite(y)):
            raise DomainError("response contains non-finite values")
        if not np.all((t == 0) | (t == 1)):
            raise DomainError("assignment must be 0 or 1")
        t = t.astype(np.int8)
        if t.min() == t.max():
            raise DomainError("both arms must be non-empty")
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "assignment", t)

        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != y.size:
                raise DomainError(f"covariates have {x.shape[0]} rows, response {y.size}")
            if not np.all(np.isfinite(x)):
                raise DomainError("covariates contain non-finite values")
            names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
            if len(names) != x.shape[1]:
                raise DomainError(f"{len(names)} covariate names for {x.shape[1]} columns")
            object.__setattr__(self, "covariates", x)
            object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.response.size

    @property
    def treated(self) -> np.ndarray:
        return self.response[self.assignment == 1]

    @property
    def control(self) -> np.ndarray:
        return self.response[self.assignment == 0]

    def with_response(self, response) -> "Dataset":
        return Dataset(response, self.assignment, self.covariates, self.covariate_names)

    @classmethod
    def from_arms(cls, treatment: Sequence[float], control: Sequence[float]) -> "Dataset":
        treatment = np.asarray(treatment, dtype=float)
        control = np.asarray(control, dtype=float)
        y = np.concatenate([treatment, control])
        t = np.concatenate([np.ones(treatment.size, np.int8), np.zeros(control.size, np.int8)])
        return cls(y, t)


@dataclass(frozen=True)
class EstimateResult:
    """Point estimate with its significance test.

    ``lift`` is ``effect_abs`` divided by the method's control-arm reference
    level; the test statistic is always on the absolute scale.
    """

    method: str
    effect_abs: float
    lift: float
    std_err: float
    z_stat: float
    p_value: float
    details: dict = field(default_factory=dict)

    @classmethod
    def from_effect(cls, method: str, effect: float, std_err: float, reference: float, **details):
        z = z_statistic(effect, std_err)
        lift = effect / reference if reference != 0 else float("nan")
        details["reference"] = float(reference)
        return cls(method, float(effect), float(lift), float(std_err), z, two_sided_p(z), details)


def z_statistic(effect: float, std_err: float) -> float:
    if std_err > 0:
        return float(effect / std_err)
    if effect == 0:
        return 0.0
    return float(np.copysign(np.inf, effect))


def two_sided_p(z: float) -> float:
    """Two-sided standard-normal p-value, ``2 * (1 - Phi(|z|))``."""
    return float(2.0 * stats.norm.sf(abs(z)))


def naive_estimate(data: Dataset, method: str = "naive") -> EstimateResult:
    """Difference in arm means with a Welch standard error."""
    yt, yc = data.treated, data.control
    if yt.size < 2 or yc.size < 2:
        raise VarianceUndefinedError(
            f"each arm needs at least 2 observations (treatment {yt.size}, control {yc.size})"
        )
    mean_t, mean_c = yt.mean(), yc.mean()
    se = float(np.sqrt(yt.var(ddof=1) / yt.size + yc.var(ddof=1) / yc.size))
    return EstimateResult.from_effect(method, mean_t - mean_c, se, mean_c)


def winsorize(values, threshold: float) -> np.ndarray:
    """Cap values from above at `threshold`."""
    if not np.isfinite(threshold):
        raise DomainError(f"winsorization threshold must be finite, got {threshold}")
    return np.minimum(np.asarray(values, dtype=float), threshold)


@dataclass(frozen=True)
class WinsorPolicy:
    mode: str = "unified_union"
    percentile: float = 0.99

    def __post_init__(self):
        if self.mode not in WINSOR_MODES:
            raise DomainError(f"unknown winsorization mode {self.mode!r}; expected one of {WINSOR_MODES}")
        if not (0.0 < self.percentile <= 1.0):
            raise DomainError(f"percentile must lie in (0, 1], got {self.percentile}")


def resolve_thresholds(data: Dataset, policy: WinsorPolicy) -> tuple:
    """Capping thresholds ``(treatment, control)`` under `policy`.

    Percentiles interpolate linearly between order statistics.
    """
    q = policy.percentile
    if policy.mode == "unified_union":
        a = float(np.quantile(data.response, q))
        return a, a
    a_t = float(np.quantile(data.treated, q))
    a_c = float(np.quantile(data.control, q))
    if policy.mode == "separate":
        return a_t, a_c
    a = (a_t + a_c) / 2.0
    return a, a


def winsorized_estimate(data: Dataset, policy: WinsorPolicy = WinsorPolicy()) -> EstimateResult:
    a_t, a_c = resolve_thresholds(data, policy)
    t = data.assignment == 1
    capped = np.where(t, np.minimum(data.response, a_t), np.minimum(data.response, a_c))
    res = naive_estimate(data.with_response(capped), method=f"winsorized_{policy.mode}")
    res.details.update(
        threshold_treatment=a_t, threshold_control=a_c, percentile=policy.percentile, mode=policy.mode
    )
    return res


def huber_ate(data: Dataset, delta_mode: str = "raw_sd", max_iter: int = 100, tol: float = 1e-8) -> EstimateResult:
    """Treatment coefficient of a Huber regression on (intercept, T).

    One tuning constant, derived from the pooled response, serves both arms.
    Lift is relative to the fitted intercept.
    """
    delta = default_delta(data.response, delta_mode)
    design = DesignMatrix.from_columns({"intercept": 1.0, "treatment": data.assignment})
    fit = huber_fit(design, data.response, delta, max_iter=max_iter, tol=tol)
    return EstimateResult.from_effect(
        "huber",
        fit.coef("treatment"),
        fit.std_err("treatment"),
        fit.coef("intercept"),
        delta=delta,
        delta_mode=delta_mode,
        iterations=fit.iterations,
        converged=fit.converged,
    )


def huber_location(values, delta: float):
    """Intercept-only Huber fit; returns (location, std_err)."""
    values = np.asarray(values, dtype=float)
    fit = huber_fit(DesignMatrix(np.ones((values.size, 1)), ("intercept",)), values, delta)
    return fit.coef("intercept"), fit.std_err("intercept")


def huber_per_arm(data: Dataset, delta_mode: str = "raw_sd") -> EstimateResult:
    """Separate Huber location per arm compared with a two-sample z-test.

    Each arm gets its own tuning constant. This design does not control the
    false-positive rate on heavy-tailed data; it exists for comparison with
    :func:`huber_ate`.
    """
    delta_t = default_delta(data.treated, delta_mode)
    delta_c = default_delta(data.control, delta_mode)
    loc_t, se_t = huber_location(data.treated, delta_t)
    loc_c, se_c = huber_location(data.control, delta_c)
    return EstimateResult.from_effect(
        "huber_per_arm", loc_t - loc_c, float(np.hypot(se_t, se_c)), loc_c, delta_treatment=delta_t, delta_control=delta_c
    )


def clopper_pearson_ci(successes: int, trials: int, confidence: float = 0.95) -> tuple:
    """Exact binomial confidence interval from Beta quantiles."""
    if trials < 1 or not (0 <= successes <= trials):
        raise DomainError(f"need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}")
    tail = (1.0 - confidence) / 2.0
    low = 0.0 if successes == 0 else float(stats.beta.ppf(tail, successes, trials - successes + 1))
    high = 1.0 if successes == trials else float(stats.beta.ppf(1.0 - tail, successes + 1, trials - successes))
    return low, high
