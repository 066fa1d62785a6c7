"""Three-piece heavy-tailed response model.

A response is zero with probability ``p_nonconv``, drawn from an exponential
distribution truncated to ``(0, C)`` with probability ``p_torso``, and drawn
from a type-I Pareto with scale ``C`` and shape ``alpha`` with probability
``p_tail``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .errors import AttainabilityError, DomainError, FitError, InfiniteMeanError, NumericalError

LAMBDA_BRACKET = (1e-12, 1e6)
LAMBDA_RTOL = 1e-10

_JSON_KEYS = ("p_nonconv", "p_torso", "p_tail", "lambda", "cutoff_c", "alpha")


@dataclass(frozen=True)
class MixtureParams:
    """Parameters of the zero / truncated-exponential / Pareto mixture.

    Attributes
    ----------
    p_nonconv, p_torso, p_tail : float
        Segment probabilities; must sum to one.
    lam : float
        Rate of the truncated exponential torso (serialized as ``lambda``).
    cutoff_c : float
        Torso upper bound and Pareto scale.
    alpha : float
        Pareto shape.
    """

    p_nonconv: float
    p_torso: float
    p_tail: float
    lam: float
    cutoff_c: float
    alpha: float

    def __post_init__(self):
        probs = (self.p_nonconv, self.p_torso, self.p_tail)
        for name, p in zip(("p_nonconv", "p_torso", "p_tail"), probs):
            if not (0.0 <= p <= 1.0):
                raise DomainError(f"{name}={p} is not a probability")
        if abs(math.fsum(probs) - 1.0) > 1e-12:
            raise DomainError(f"segment probabilities sum to {math.fsum(probs)!r}, not 1")
        for name in ("lam", "cutoff_c", "alpha"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be positive and finite, got {v}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return {k: d[k] for k in _JSON_KEYS}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureParams":
        missing = [k for k in _JSON_KEYS if k not in d]
        if missing:
            raise DomainError(f"mixture parameters missing keys: {', '.join(missing)}")
        return cls(
            p_nonconv=float(d["p_nonconv"]),
            p_torso=float(d["p_torso"]),
            p_tail=float(d["p_tail"]),
            lam=float(d["lambda"]),
            cutoff_c=float(d["cutoff_c"]),
            alpha=float(d["alpha"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MixtureParams":
        return cls.from_dict(json.loads(text))


def truncated_exp_mean(lam: float, cutoff_c: float) -> float:
    """Mean of an exponential with rate `lam` truncated to ``(0, cutoff_c)``.

    Equals ``1/lam - C/(exp(lam*C) - 1)``, evaluated without cancellation.
    """
    x = lam * cutoff_c
    if x < 1e-4:
        # series of 1/x - 1/(e^x - 1)
        return cutoff_c * (0.5 - x / 12.0 + x**3 / 720.0)
    if x > 700.0:
        return 1.0 / lam
    return 1.0 / lam - cutoff_c / math.expm1(x)


def _bisect_rate(target_mean: float, cutoff_c: float) -> float:
    """Solve ``truncated_exp_mean(lam, C) == target_mean`` for lam by bisection.

    The torso mean is strictly decreasing in lam, so the bracket is searched
    geometrically until the relative width drops below LAMBDA_RTOL.
    """
    lo, hi = LAMBDA_BRACKET
    f_lo = truncated_exp_mean(lo, cutoff_c) - target_mean
    f_hi = truncated_exp_mean(hi, cutoff_c) - target_mean
    if not (f_lo >= 0.0 >= f_hi):
        raise NumericalError(
            f"rate bisection bracket [{lo:g}, {hi:g}] does not contain a root for "
            f"torso mean {target_mean!r} (values {f_lo:g}, {f_hi:g})"
        )
    while hi / lo - 1.0 > LAMBDA_RTOL:
        mid = math.sqrt(lo * hi)
        if truncated_exp_mean(mid, cutoff_c) - target_mean > 0.0:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def hill_alpha(tail_values: np.ndarray, cutoff_c: float) -> float:
    """Hill estimate of the Pareto shape from observations at or above `cutoff_c`."""
    tail_values = np.asarray(tail_values, dtype=float)
    log_excess = np.log(tail_values / cutoff_c).sum()
    if log_excess <= 0.0:
        raise FitError("tail segment has no spread above the cutoff; Hill estimate undefined")
    return tail_values.size / log_excess


def fit_mixture(sample, cutoff_c: float) -> MixtureParams:
    """Fit the three-piece mixture by maximum likelihood at a given cutoff.

    Zeros form the point mass, values in ``(0, C)`` the torso and values
    ``>= C`` the tail. The torso rate solves the truncated-exponential
    likelihood equation by bisection; the tail shape is the Hill estimator.
    """
    y = np.asarray(sample, dtype=float).ravel()
    if y.size == 0:
        raise FitError("cannot fit an empty sample")
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise FitError("sample must contain finite, nonnegative values")
    if not (math.isfinite(cutoff_c) and cutoff_c > 0):
        raise FitError(f"cutoff_c must be positive, got {cutoff_c}")

    zeros = y == 0.0
    tail = y >= cutoff_c
    torso = ~zeros & ~tail
    n_torso, n_tail = int(torso.sum()), int(tail.sum())
    if n_torso < 2:
        raise FitError(f"torso segment (0, {cutoff_c:g}) has {n_torso} observations; need at least 2")
    if n_tail < 2:
        raise FitError(f"tail segment [{cutoff_c:g}, inf) has {n_tail} observations; need at least 2")

    n = y.size
    p_nonconv = zeros.sum() / n
    p_tail = n_tail / n
    p_torso = 1.0 - p_nonconv - p_tail

    lam = _bisect_rate(float(y[torso].mean()), cutoff_c)
    alpha = hill_alpha(y[tail], cutoff_c)
    return MixtureParams(float(p_nonconv), float(p_torso), float(p_tail), lam, float(cutoff_c), float(alpha))


def mixture_mean(params: MixtureParams) -> float:
    if params.alpha <= 1.0:
        raise InfiniteMeanError(f"mixture mean is infinite for alpha={params.alpha} <= 1")
    torso = params.p_torso * truncated_exp_mean(params.lam, params.cutoff_c)
    tail = params.p_tail * params.alpha * params.cutoff_c / (params.alpha - 1.0)
    return torso + tail


def sample_mixture(params: MixtureParams, n: int, seed) -> np.ndarray:
    """Draw `n` i.i.d. responses from the mixture.

    `seed` may be an int or a ``numpy.random.SeedSequence``; the output is a
    deterministic function of it.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    segment_u = rng.random(n)
    value_u = rng.random(n)

    out = np.zeros(n)
    torso = (segment_u >= params.p_nonconv) & (segment_u < params.p_nonconv + params.p_torso)
    tail = segment_u >= params.p_nonconv + params.p_torso
    if params.p_tail == 0.0:
        tail[:] = False

    u = value_u[torso]
    out[torso] = -np.log1p(u * math.expm1(-params.lam * params.cutoff_c)) / params.lam
    # 1 - u lies in (0, 1], keeping the Pareto draw finite
    out[tail] = params.cutoff_c * (1.0 - value_u[tail]) ** (-1.0 / params.alpha)
    return out


def inject_lift(params: MixtureParams, target_lift: float) -> MixtureParams:
    """Return params whose mean is ``(1 + target_lift)`` times the original.

    Only the torso rate changes; the tail shape, cutoff and segment
    probabilities are kept.
    """
    if target_lift == 0.0:
        return params
    base = mixture_mean(params)
    target = (1.0 + target_lift) * base
    tail_part = params.p_tail * params.alpha * params.cutoff_c / (params.alpha - 1.0)
    low, high = tail_part, tail_part + params.p_torso * params.cutoff_c / 2.0
    if params.p_torso == 0.0 or not (low < target < high):
        raise AttainabilityError(
            f"target mean {target:g} is outside the attainable interval ({low:g}, {high:g}) "
            "reachable by varying the torso rate",
            low=low,
            high=high,
        )
    lam = _bisect_rate((target - tail_part) / params.p_torso, params.cutoff_c)
    return replace(params, lam=lam)


def mixture_cdf(params: MixtureParams, y):
    """Cumulative distribution function of the mixture."""
    y = np.asarray(y, dtype=float)
    lam, c = params.lam, params.cutoff_c
    torso_cdf = np.clip(-np.expm1(-lam * np.clip(y, 0.0, c)) / -math.expm1(-lam * c), 0.0, 1.0)
    tail_cdf = np.where(y >= c, 1.0 - (c / np.maximum(y, c)) ** params.alpha, 0.0)
    out = params.p_nonconv + params.p_torso * torso_cdf + params.p_tail * tail_cdf
    return np.where(y < 0.0, 0.0, out)


def mixture_pdf(params: MixtureParams, y):
    """Density of the continuous part (the point mass at zero is excluded)."""
    y = np.asarray(y, dtype=float)
    lam, c, a = params.lam, params.cutoff_c, params.alpha
    torso = params.p_torso * lam / -math.expm1(-lam * c) * np.exp(-lam * y)
    tail = params.p_tail * a * c**a / np.maximum(y, c) ** (a + 1.0)
    return np.where((y > 0) & (y < c), torso, np.where(y >= c, tail, 0.0))


def mixture_quantile(params: MixtureParams, q):
    """Piecewise inverse CDF; `q` must lie strictly inside (0, 1)."""
    q_arr = np.asarray(q, dtype=float)
    if np.any(~((q_arr > 0.0) & (q_arr < 1.0))):
        raise DomainError("quantile probabilities must lie in (0, 1)")
    lam, c = params.lam, params.cutoff_c
    p0, p1 = params.p_nonconv, params.p_torso
    torso_top = p0 + p1

    out = np.zeros_like(q_arr)
    in_torso = (q_arr > p0) & (q_arr < torso_top)
    in_tail = q_arr >= torso_top
    if p1 > 0:
        u = (q_arr[in_torso] - p0) / p1
        out[in_torso] = -np.log1p(u * math.expm1(-lam * c)) / lam
    if params.p_tail > 0:
        surv = np.minimum((1.0 - q_arr[in_tail]) / params.p_tail, 1.0)
        out[in_tail] = c * surv ** (-1.0 / params.alpha)
    else:
        out[in_tail] = c
    return out if out.ndim else float(out)


def _segment_gap(values: np.ndarray, inverse_cdf: Callable, grid: np.ndarray) -> float:
    empirical = np.quantile(values, grid)
    return float(np.max(np.abs(empirical - inverse_cdf(grid))))


def segment_qq_deviation(sample, params: MixtureParams, n_points: int = 99) -> dict:
    """Largest absolute quantile gap per segment between data and fitted model.

    Torso observations are compared with the truncated exponential and tail
    observations with the Pareto, on the probability grid ``k/(n_points+1)``.
    """
    y = np.asarray(sample, dtype=float)
    grid = np.arange(1, n_points + 1) / (n_points + 1)
    lam, c = params.lam, params.cutoff_c
    torso = y[(y > 0) & (y < c)]
    tail = y[y >= c]

    def torso_inv(u):
        return -np.log1p(u * math.expm1(-lam * c)) / lam

    def tail_inv(u):
        return c * (1.0 - u) ** (-1.0 / params.alpha)

    return {
        "torso": _segment_gap(torso, torso_inv, grid) if torso.size else float("nan"),
        "tail": _segment_gap(tail, tail_inv, grid) if tail.size else float("nan"),
    }
