"""Covariate-assisted treatment effect estimators.

Post-stratification, inverse propensity weighting, doubly robust (AIPW)
estimation and double/debiased learning with K-fold cross-fitting. The
learners are fixed: a linear outcome model and a logistic propensity model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CovariateError, DomainError, PlanError
from .estimators import Dataset, EstimateResult
from .linear_models import DesignMatrix, default_delta, huber_fit, logistic_fit, ols_fit

DEFAULT_CLIP = 0.01


def usable_covariates(data: Dataset):
    """Covariate columns with nonzero spread, and their names.

    Constant columns duplicate the intercept and are dropped.
    """
    if data.covariates is None or data.covariates.shape[1] == 0:
        raise CovariateError("method requires covariates but the dataset has none")
    x = data.covariates
    keep = np.ptp(x, axis=0) > 0
    return x[:, keep], tuple(n for n, k in zip(data.covariate_names, keep) if k)


def _design(columns: dict, x: np.ndarray, names) -> DesignMatrix:
    cols = dict(columns)
    for j, name in enumerate(names):
        cols[name] = x[:, j]
    return DesignMatrix.from_columns(cols)


def post_stratification(data: Dataset, loss: str = "squared", delta_mode: str = "raw_sd") -> EstimateResult:
    """Regression of the response on (intercept, T, covariates).

    Lift is relative to the mean fitted control-arm prediction.
    """
    x, names = usable_covariates(data)
    n = data.n
    design = _design({"intercept": 1.0, "treatment": data.assignment}, x, names)
    if loss == "squared":
        fit = ols_fit(design, data.response)
        extra = {}
    elif loss == "huber":
        delta = default_delta(data.response, delta_mode)
        fit = huber_fit(design, data.response, delta)
        extra = {"delta": delta, "iterations": fit.iterations, "converged": fit.converged}
    else:
        raise DomainError(f"unknown loss {loss!r}")
    control = data.assignment == 0
    counterfactual = design.values[control].copy()
    counterfactual[:, 1] = 0.0
    reference = float(np.mean(counterfactual @ fit.coefficients))
    method = "post_strat" if loss == "squared" else "post_strat_huber"
    return EstimateResult.from_effect(
        method, fit.coef("treatment"), fit.std_err("treatment"), reference,
        covariates=list(names), n=n, **extra,
    )


def fit_propensity(data: Dataset, clip: float = DEFAULT_CLIP) -> np.ndarray:
    """Logistic model of assignment on covariates, clamped to [clip, 1 - clip]."""
    if not (0.0 <= clip < 0.5):
        raise DomainError(f"clip must lie in [0, 0.5), got {clip}")
    x, names = usable_covariates(data)
    design = _design({"intercept": 1.0}, x, names)
    fit = logistic_fit(design, data.assignment)
    return np.clip(fit.predict(design), clip, 1.0 - clip)


def _weighted_mean_and_var(y: np.ndarray, w: np.ndarray):
    omega = w / w.sum()
    m = float(omega @ y)
    return m, float(np.sum(omega**2 * (y - m) ** 2))


def psm_estimate(data: Dataset, clip: float = DEFAULT_CLIP, propensity=None) -> EstimateResult:
    """Inverse-propensity weighted difference of arm means.

    `propensity` overrides the fitted scores (it is still clamped).
    """
    g = fit_propensity(data, clip) if propensity is None else np.clip(
        np.broadcast_to(np.asarray(propensity, dtype=float), (data.n,)), clip, 1.0 - clip
    )
    t = data.assignment == 1
    w = np.where(t, 1.0 / g, 1.0 / (1.0 - g))
    m_t, v_t = _weighted_mean_and_var(data.response[t], w[t])
    m_c, v_c = _weighted_mean_and_var(data.response[~t], w[~t])
    return EstimateResult.from_effect(
        "psm", m_t - m_c, float(np.sqrt(v_t + v_c)), m_c, weight_min=float(w.min()), weight_max=float(w.max())
    )


def doubly_robust(data: Dataset, clip: float = DEFAULT_CLIP, propensity=None, outcome=None) -> EstimateResult:
    """Augmented inverse-propensity weighted estimate.

    Parameters
    ----------
    data : Dataset
        Must carry covariates unless both nuisances are supplied.
    clip : float
        Propensity clamp.
    propensity : array_like, optional
        Assignment probabilities to use instead of the logistic fit.
    outcome : tuple of array_like, optional
        ``(tau0, tau1)`` predicted responses under control and treatment, used
        instead of the joint linear outcome model.

    Notes
    -----
    The per-row contribution is
    ``tau1 - tau0 + T (Y - tau1) / g - (1 - T)(Y - tau0) / (1 - g)``; the
    estimate is its mean and the standard error its sample standard
    deviation over ``sqrt(n)``.
    """
    y, t = data.response, data.assignment.astype(float)
    if outcome is None:
        x, names = usable_covariates(data)
        design = _design({"intercept": 1.0, "treatment": t}, x, names)
        fit = ols_fit(design, y)
        v = design.values.copy()
        v[:, 1] = 0.0
        tau0 = v @ fit.coefficients
        v[:, 1] = 1.0
        tau1 = v @ fit.coefficients
    else:
        tau0, tau1 = (np.broadcast_to(np.asarray(a, dtype=float), y.shape) for a in outcome)
    if propensity is None:
        g = fit_propensity(data, clip)
    else:
        g = np.clip(np.broadcast_to(np.asarray(propensity, dtype=float), y.shape), clip, 1.0 - clip)

    control_part = tau0 + (1.0 - t) * (y - tau0) / (1.0 - g)
    treated_part = tau1 + t * (y - tau1) / g
    phi = treated_part - control_part
    se = float(np.std(phi, ddof=1) / np.sqrt(y.size))
    return EstimateResult.from_effect("doubly_robust", float(phi.mean()), se, float(control_part.mean()))


@dataclass(frozen=True)
class CrossFitPlan:
    """Assignment of rows to cross-fitting folds."""

    k_folds: int
    fold_assignment: np.ndarray
    seed: int = 0

    def validate(self, assignment) -> None:
        assignment = np.asarray(assignment)
        if self.k_folds < 2:
            raise PlanError(f"need at least 2 folds, got {self.k_folds}")
        if self.fold_assignment.size != assignment.size:
            raise PlanError(f"plan covers {self.fold_assignment.size} rows, data has {assignment.size}")
        for j in range(self.k_folds):
            arms = assignment[self.fold_assignment == j]
            if arms.size == 0 or arms.min() == arms.max():
                raise PlanError(f"fold {j} does not contain both arms")


def make_crossfit_plan(n: int, assignment, k_folds: int = 5, seed: int = 0) -> CrossFitPlan:
    """Random partition into `k_folds` folds, stratified by arm.

    Rows of each arm are shuffled and dealt round-robin, continuing the
    deal across arms, so fold sizes differ by at most one.
    """
    assignment = np.asarray(assignment).ravel()
    if assignment.size != n:
        raise PlanError(f"assignment has {assignment.size} rows, expected {n}")
    if k_folds < 2:
        raise PlanError(f"need at least 2 folds, got {k_folds}")
    if n < 2 * k_folds:
        raise PlanError(f"{n} rows cannot fill {k_folds} folds with both arms")
    treated = np.flatnonzero(assignment == 1)
    control = np.flatnonzero(assignment == 0)
    if min(treated.size, control.size) < k_folds:
        raise PlanError(
            f"smallest arm has {min(treated.size, control.size)} rows; cannot stratify into {k_folds} folds"
        )
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    folds[rng.permutation(treated)] = np.arange(treated.size) % k_folds
    folds[rng.permutation(control)] = (treated.size + np.arange(control.size)) % k_folds
    return CrossFitPlan(k_folds, folds, seed)


@dataclass(frozen=True)
class ResidualPair:
    eps_y: np.ndarray
    eps_t: np.ndarray
    fold_summaries: tuple = ()


def orthogonal_residuals(data: Dataset, plan: CrossFitPlan, clip: float = DEFAULT_CLIP, propensity_model: str = "logistic") -> ResidualPair:
    """Cross-fitted residuals of the response and the assignment.

    For each fold the outcome model (least squares of Y on intercept and
    covariates) and the propensity model are fitted on the other folds and
    evaluated on the fold. ``propensity_model="constant"`` replaces the
    logistic fit with the training-fold treatment share.
    """
    plan.validate(data.assignment)
    x, names = usable_covariates(data)
    y, t = data.response, data.assignment.astype(float)
    design = _design({"intercept": 1.0}, x, names)
    eps_y = np.empty(data.n)
    eps_t = np.empty(data.n)
    summaries = []
    for j in range(plan.k_folds):
        test = plan.fold_assignment == j
        train = ~test
        train_design = DesignMatrix(design.values[train], design.column_labels)
        test_design = DesignMatrix(design.values[test], design.column_labels)
        outcome = ols_fit(train_design, y[train])
        if propensity_model == "logistic":
            prop = logistic_fit(train_design, t[train])
            g = prop.predict(test_design)
            prop_coef = prop.coefficients.tolist()
        elif propensity_model == "constant":
            g = np.full(int(test.sum()), t[train].mean())
            prop_coef = [float(t[train].mean())]
        else:
            raise DomainError(f"unknown propensity model {propensity_model!r}")
        g = np.clip(g, clip, 1.0 - clip)
        eps_y[test] = y[test] - outcome.predict(test_design)
        eps_t[test] = t[test] - g
        summaries.append(
            {"fold": j, "n_train": int(train.sum()), "outcome_coef": outcome.coefficients.tolist(), "propensity_coef": prop_coef}
        )
    return ResidualPair(eps_y, eps_t, tuple(summaries))


def dml_estimate(
    data: Dataset,
    plan: CrossFitPlan,
    final_loss: str = "squared",
    clip: float = DEFAULT_CLIP,
    propensity_model: str = "logistic",
    aggregation: str = "pooled",
    delta_mode: str = "raw_sd",
) -> EstimateResult:
    """Double/debiased estimate from cross-fitted orthogonal residuals.

    The response residuals are regressed on the assignment residuals with
    no intercept, by least squares or Huber loss. With
    ``aggregation="pooled"`` (default) one regression is run on the residuals
    of all folds; ``"per_fold"`` fits each fold separately and averages the
    slopes and variances. Lift is relative to the control-arm sample mean.
    """
    if aggregation not in ("pooled", "per_fold"):
        raise DomainError(f"unknown aggregation {aggregation!r}")
    res = orthogonal_residuals(data, plan, clip, propensity_model)

    def final_fit(ey, et):
        design = DesignMatrix(et[:, None], ("eps_t",))
        if final_loss == "squared":
            return ols_fit(design, ey), None
        if final_loss == "huber":
            delta = default_delta(ey, delta_mode)
            return huber_fit(design, ey, delta), delta
        raise DomainError(f"unknown final loss {final_loss!r}")

    if aggregation == "pooled":
        fit, delta = final_fit(res.eps_y, res.eps_t)
        effect, se = fit.coef("eps_t"), fit.std_err("eps_t")
    else:
        slopes, variances = [], []
        for j in range(plan.k_folds):
            m = plan.fold_assignment == j
            fit, delta = final_fit(res.eps_y[m], res.eps_t[m])
            slopes.append(fit.coef("eps_t"))
            variances.append(fit.covariance[0, 0])
        effect = float(np.mean(slopes))
        se = float(np.sqrt(np.sum(variances)) / plan.k_folds)

    method = "dml" if final_loss == "squared" else "dml_huber"
    details = {"k_folds": plan.k_folds, "aggregation": aggregation, "folds": list(res.fold_summaries)}
    if delta is not None:
        details["delta"] = delta
    return EstimateResult.from_effect(method, effect, se, float(data.control.mean()), **details)
