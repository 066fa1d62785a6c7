"""Least squares, Huber and logistic regression with coefficient covariances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import DegenerateScaleError, DomainError, SeparationError, SingularDesignError

HUBER_K = 1.345
MAD_TO_SD = 1.4826
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class DesignMatrix:
    """Regressor matrix with one label per column."""

    values: np.ndarray
    column_labels: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DomainError("design values must be a 2-D array")
        rows, cols = values.shape
        if rows < cols:
            raise DomainError(f"design has {rows} rows but {cols} columns")
        if not np.all(np.isfinite(values)):
            raise DomainError("design contains non-finite entries")
        labels = tuple(self.column_labels)
        if len(labels) != cols:
            raise DomainError(f"{len(labels)} labels for {cols} columns")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_labels", labels)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def columns(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_columns(cls, columns: dict) -> "DesignMatrix":
        n = max(np.size(v) for v in columns.values())
        cols = [np.full(n, 1.0) if np.isscalar(v) else np.asarray(v, dtype=float) for v in columns.values()]
        return cls(np.column_stack(cols), tuple(columns))


@dataclass(frozen=True)
class LinearFit:
    """Result of any solver in this module.

    ``objective_path`` holds the per-iteration objective for iterative
    solvers (Huber loss sum, or negative log-likelihood for logistic).
    """

    coefficients: np.ndarray
    covariance: np.ndarray
    scale: float
    iterations: int
    converged: bool
    column_labels: tuple = ()
    link: str = "identity"
    objective_path: tuple = ()
    extra: dict = field(default_factory=dict)

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.column_labels.index(label)])

    def std_err(self, label: str) -> float:
        j = self.column_labels.index(label)
        return float(np.sqrt(self.covariance[j, j]))

    def predict(self, design) -> np.ndarray:
        x = _as_design(design).values
        eta = x @ self.coefficients
        return expit(eta) if self.link == "logit" else eta


def _as_design(design) -> DesignMatrix:
    if isinstance(design, DesignMatrix):
        return design
    values = np.asarray(design, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return DesignMatrix(values, tuple(f"x{j}" for j in range(values.shape[1])))


def _as_response(response, n: int) -> np.ndarray:
    y = np.asarray(response, dtype=float).ravel()
    if y.size != n:
        raise DomainError(f"response has {y.size} entries, design has {n} rows")
    if not np.all(np.isfinite(y)):
        raise DomainError("response contains non-finite values")
    return y


def _qr_solve(x: np.ndarray, y: np.ndarray, labels: Sequence[str]):
    """Least-squares solve via column-pivoted QR.

    Returns the coefficients and ``(X'X)^-1``. Raises when a diagonal entry
    of R decays below RANK_RTOL relative to the first.
    """
    q, r, piv = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise SingularDesignError("design matrix is zero", column=labels[0] if labels else None)
    bad = np.nonzero(diag < RANK_RTOL * diag[0])[0]
    if bad.size:
        col = labels[piv[bad[0]]]
        raise SingularDesignError(f"design is rank deficient: column {col!r} is linearly dependent", column=col)
    p = x.shape[1]
    beta_piv = linalg.solve_triangular(r, q.T @ y)
    r_inv = linalg.solve_triangular(r, np.eye(p))
    xtx_inv_piv = r_inv @ r_inv.T
    beta = np.empty(p)
    beta[piv] = beta_piv
    xtx_inv = np.empty((p, p))
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_piv
    return beta, xtx_inv


def ols_fit(design, response) -> LinearFit:
    """Ordinary least squares with the classical covariance ``s^2 (X'X)^-1``."""
    d = _as_design(design)
    y = _as_response(response, d.rows)
    beta, xtx_inv = _qr_solve(d.values, y, d.column_labels)
    resid = y - d.values @ beta
    dof = d.rows - d.columns
    sigma2 = float(resid @ resid / dof) if dof > 0 else float("nan")
    cov = sigma2 * xtx_inv
    return LinearFit(
        coefficients=beta,
        covariance=(cov + cov.T) / 2.0,
        scale=float(np.sqrt(sigma2)),
        iterations=1,
        converged=True,
        column_labels=d.column_labels,
    )


def huber_loss(residual, delta: float):
    """Quadratic within ``[-delta, delta]``, linear with slope `delta` outside."""
    a = np.abs(np.asarray(residual, dtype=float))
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_weights(residual, delta: float) -> np.ndarray:
    a = np.abs(np.asarray(residual, dtype=float))
    return np.where(a <= delta, 1.0, delta / np.maximum(a, delta))


def huber_fit(design, response, delta: float, max_iter: int = 100, tol: float = 1e-8) -> LinearFit:
    """Huber regression by iteratively reweighted least squares.

    Parameters
    ----------
    design : DesignMatrix or array_like
        Regressors, full column rank.
    response : array_like
        Response vector.
    delta : float
        Tuning constant where the loss turns from quadratic to linear.
    max_iter : int
        Iteration cap. Hitting it flags ``converged=False`` rather than raising.
    tol : float
        Stop once the largest coefficient change, relative to the largest
        coefficient magnitude, falls below this value.

    Returns
    -------
    LinearFit
        Covariance is the sandwich
        ``(X'WX)^-1 X' diag(psi^2) X (X'WX)^-1 * n/(n-p) / mbar^2`` with
        ``psi`` the clipped residual and ``mbar`` the share of residuals in
        the quadratic zone.
    """
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    d = _as_design(design)
    x = d.values
    y = _as_response(response, d.rows)
    n, p = x.shape

    beta, _ = _qr_solve(x, y, d.column_labels)
    objective = [float(huber_loss(y - x @ beta, delta).sum())]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        w = huber_weights(y - x @ beta, delta)
        sw = np.sqrt(w)
        new_beta, _ = _qr_solve(x * sw[:, None], y * sw, d.column_labels)
        change = np.max(np.abs(new_beta - beta)) / max(np.max(np.abs(new_beta)), np.finfo(float).tiny)
        beta = new_beta
        objective.append(float(huber_loss(y - x @ beta, delta).sum()))
        if change < tol:
            converged = True
            break

    resid = y - x @ beta
    w = huber_weights(resid, delta)
    psi = np.clip(resid, -delta, delta)
    m_bar = float(np.mean(np.abs(resid) <= delta))
    xw = x * w[:, None]
    bread = linalg.inv(x.T @ xw)
    meat = (x * (psi * psi)[:, None]).T @ x
    if m_bar > 0 and n > p:
        factor = n / (n - p) / m_bar**2
    else:
        factor = float("inf")
    cov = factor * bread @ meat @ bread
    return LinearFit(
        coefficients=beta,
        covariance=(cov + cov.T) / 2.0,
        scale=float(delta / HUBER_K),
        iterations=iterations,
        converged=converged,
        column_labels=d.column_labels,
        objective_path=tuple(objective),
        extra={"delta": float(delta), "share_quadratic": m_bar, "weights_min": float(w.min())},
    )


def default_delta(response, mode: str = "raw_sd") -> float:
    """Huber tuning constant: 1.345 times a scale estimate of `response`.

    ``raw_sd`` uses the sample standard deviation; ``robust_scale`` uses the
    normal-consistent median absolute deviation.
    """
    y = np.asarray(response, dtype=float).ravel()
    if y.size < 2 or np.all(y == y[0]):
        raise DegenerateScaleError("response needs at least two distinct values")
    if mode == "raw_sd":
        scale = float(np.std(y, ddof=1))
    elif mode == "robust_scale":
        scale = MAD_TO_SD * float(np.median(np.abs(y - np.median(y))))
    else:
        raise DomainError(f"unknown delta mode {mode!r}")
    if scale <= 0.0:
        raise DegenerateScaleError(f"{mode} scale of the response is zero")
    return HUBER_K * scale


def _neg_loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^eta) - y*eta, computed stably
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta))


def logistic_fit(design, labels, max_iter: int = 100, tol: float = 1e-10) -> LinearFit:
    """Logistic regression by Newton-Raphson with step halving.

    Raises SeparationError when the likelihood has no finite maximizer, i.e.
    the fitted probabilities reproduce the labels or the coefficient norm
    keeps growing.
    """
    d = _as_design(design)
    x = d.values
    y = _as_response(labels, d.rows)
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    if y.min() == y.max():
        raise DomainError("labels contain a single class")
    _qr_solve(x, y, d.column_labels)  # rank check

    beta = np.zeros(x.shape[1])
    eta = x @ beta
    nll = _neg_loglik(eta, y)
    path = [nll]
    norms = [0.0]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        prob = expit(eta)
        v = prob * (1.0 - prob)
        grad = x.T @ (y - prob)
        info = x.T @ (x * v[:, None])
        try:
            step = linalg.solve(info, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SeparationError("information matrix became singular; labels are separable") from None
        t = 1.0
        while True:
            cand = beta + t * step
            cand_eta = x @ cand
            cand_nll = _neg_loglik(cand_eta, y)
            if cand_nll <= nll + 1e-12 * abs(nll) or t < 1e-10:
                break
            t *= 0.5
        change = np.max(np.abs(cand - beta)) / max(np.max(np.abs(cand)), 1.0)
        beta, eta, nll = cand, cand_eta, cand_nll
        path.append(nll)
        norms.append(float(np.max(np.abs(beta))))

        prob = expit(eta)
        if np.max(np.abs(y - prob)) < 1e-6 or (len(norms) > 10 and norms[-1] > 25.0 and all(
            b > a for a, b in zip(norms[-10:-1], norms[-9:])
        )):
            raise SeparationError(
                f"coefficients diverge (max |beta| = {norms[-1]:.3g} after {iterations} iterations); "
                "labels are perfectly separated"
            )
        if change < tol:
            converged = True
            break

    prob = expit(eta)
    info = x.T @ (x * (prob * (1.0 - prob))[:, None])
    cov = linalg.inv(info)
    return LinearFit(
        coefficients=beta,
        covariance=(cov + cov.T) / 2.0,
        scale=1.0,
        iterations=iterations,
        converged=converged,
        column_labels=d.column_labels,
        link="logit",
        objective_path=tuple(path),
    )
