"""Monte-Carlo replication suites for the estimators.

Every replication draws its data from a seed derived from
``(master_seed, rep_index)`` alone, so results do not depend on the number
of worker processes or on the order in which replications finish, and all
methods (and all grid points of a percentile search) see the same samples.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import causal
from .errors import DomainError, SimulationFailure
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
from .tail_model import MixtureParams, inject_lift, sample_mixture

REPORT_HEADER = ("method", "n_reps", "mse", "mad_signed", "mad_abs", "fpr", "fpr_lo", "fpr_hi", "detectable_lift")
LOOKUP_HEADER = ("n_per_arm", "lift", "optimal_percentile", "min_mse")
DEFAULT_GRID = tuple(float(p) for p in np.round(np.linspace(0.95, 0.999, 10), 6))
MAX_FAILURE_SHARE = 0.01


def fmt(x) -> str:
    """Six significant digits, the format of every CSV the package writes."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


# -- methods -----------------------------------------------------------------


def _winsor(data, seed, mode="unified_union", percentile=0.99):
    return winsorized_estimate(data, WinsorPolicy(mode, percentile))


def _dml(data, seed, final_loss="squared", k_folds=5, clip=causal.DEFAULT_CLIP, aggregation="pooled"):
    plan = causal.make_crossfit_plan(data.n, data.assignment, k_folds, seed)
    return causal.dml_estimate(data, plan, final_loss, clip, aggregation=aggregation)


METHODS: dict = {
    "naive": lambda data, seed: naive_estimate(data),
    "winsorized": _winsor,
    "huber": lambda data, seed, delta_mode="raw_sd": huber_ate(data, delta_mode),
    "huber_per_arm": lambda data, seed, delta_mode="raw_sd": huber_per_arm(data, delta_mode),
    "post_strat": lambda data, seed, loss="squared": causal.post_stratification(data, loss),
    "psm": lambda data, seed, clip=causal.DEFAULT_CLIP: causal.psm_estimate(data, clip),
    "doubly_robust": lambda data, seed, clip=causal.DEFAULT_CLIP: causal.doubly_robust(data, clip),
    "dml": _dml,
}

ALIASES = {
    "winsor_separate": ("winsorized", {"mode": "separate"}),
    "winsor_unified": ("winsorized", {"mode": "unified_union"}),
    "winsor_average": ("winsorized", {"mode": "unified_average"}),
    "post_strat_huber": ("post_strat", {"loss": "huber"}),
    "dml_huber": ("dml", {"final_loss": "huber"}),
}

COVARIATE_METHODS = frozenset({"post_strat", "psm", "doubly_robust", "dml"})


@dataclass(frozen=True)
class MethodSpec:
    """One estimator configuration inside a suite.

    `kind` is a key of METHODS or ALIASES; `label` names the method in
    reports and defaults to `kind`.
    """

    kind: str
    label: str = ""
    options: tuple = ()

    def __post_init__(self):
        if self.kind not in METHODS and self.kind not in ALIASES:
            raise DomainError(f"unknown method {self.kind!r}; known: {sorted(METHODS) + sorted(ALIASES)}")
        if not self.label:
            object.__setattr__(self, "label", self.kind)
        if isinstance(self.options, dict):
            object.__setattr__(self, "options", tuple(sorted(self.options.items())))

    @classmethod
    def make(cls, kind: str, label: str = "", **options) -> "MethodSpec":
        return cls(kind, label, tuple(sorted(options.items())))

    @property
    def base_kind(self) -> str:
        return ALIASES[self.kind][0] if self.kind in ALIASES else self.kind

    @property
    def needs_covariates(self) -> bool:
        return self.base_kind in COVARIATE_METHODS

    def run(self, data: Dataset, seed: int) -> EstimateResult:
        base, opts = ALIASES.get(self.kind, (self.kind, {}))
        return METHODS[base](data, seed, **{**opts, **dict(self.options)})


def as_method(m) -> MethodSpec:
    if isinstance(m, MethodSpec):
        return m
    if isinstance(m, str):
        return MethodSpec(m)
    m = dict(m)
    kind = m.pop("kind", None) or m.pop("name")
    label = m.pop("label", "")
    return MethodSpec(kind, label, tuple(sorted(m.items())))


# The covariate comparison caps at the top of the explored percentile range.
NINE_METHODS = (
    MethodSpec("naive"),
    MethodSpec.make("winsor_unified", "winsorized", percentile=0.999),
    MethodSpec("huber"),
    MethodSpec("post_strat"),
    MethodSpec("post_strat_huber"),
    MethodSpec("psm"),
    MethodSpec("doubly_robust"),
    MethodSpec("dml"),
    MethodSpec("dml_huber"),
)


# -- specs and reports -----------------------------------------------------------


@dataclass(frozen=True)
class SimulationSpec:
    control_params: MixtureParams
    target_lift: float
    n_per_arm: int
    n_reps: int
    methods: tuple
    master_seed: int = 0
    alpha_level: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(as_method(m) for m in self.methods))
        if self.n_per_arm < 100:
            raise DomainError(f"n_per_arm must be >= 100, got {self.n_per_arm}")
        if self.n_reps < 1:
            raise DomainError(f"n_reps must be >= 1, got {self.n_reps}")
        if not self.methods:
            raise DomainError("at least one method is required")
        _check_labels(self.methods)
        if self.master_seed < 0:
            raise DomainError("master_seed must be nonnegative")


@dataclass(frozen=True)
class PairedPeriodSpec:
    """Synthetic pre/post-period units sharing a heavy-tailed latent size.

    Unit ``i`` has latent size ``s_i`` drawn from `base_params`; its
    pre-period covariate is ``s_i * u_i`` and its response
    ``s_i * v_i * (1 + target_lift * T_i)``, with ``u, v`` independent
    mean-one log-normal noise of coefficient of variation `noise_cv`.
    """

    base_params: MixtureParams
    noise_cv: float = 0.3
    target_lift: float = 0.0

    def __post_init__(self):
        if not self.noise_cv >= 0:
            raise DomainError(f"noise_cv must be >= 0, got {self.noise_cv}")


def _check_labels(methods: Sequence[MethodSpec]) -> None:
    labels = [m.label for m in methods]
    dupes = {x for x in labels if labels.count(x) > 1}
    if dupes:
        raise DomainError(f"duplicate method labels: {sorted(dupes)}")


def detectable_lift(estimates) -> float:
    """Twice the sample standard deviation of replicated lift estimates."""
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise DomainError("detectable lift needs at least 2 estimates")
    return float(2.0 * np.std(est, ddof=1))


@dataclass
class MethodSummary:
    label: str
    n_reps: int
    mse: float
    mad_signed: float
    mad_abs: float
    fpr: float
    fpr_lo: float
    fpr_hi: float
    detectable_lift: float
    estimates: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    p_values: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    failures: int = 0
    errors: list = field(default_factory=list, repr=False)

    @property
    def fpr_ci(self) -> tuple:
        return self.fpr_lo, self.fpr_hi

    def row(self) -> list:
        return [self.label] + [fmt(getattr(self, k)) for k in REPORT_HEADER[1:]]


def summarize(label: str, estimates, p_values, truth: float, alpha_level: float, errors=()) -> MethodSummary:
    est = np.asarray(estimates, dtype=float)
    pv = np.asarray(p_values, dtype=float)
    ok = np.isfinite(est) & np.isfinite(pv)
    e, p = est[ok], pv[ok]
    k = int(ok.sum())
    if k == 0:
        nan = float("nan")
        return MethodSummary(label, 0, nan, nan, nan, nan, nan, nan, nan, est, pv, int((~ok).sum()), list(errors))
    dev = e - truth
    hits = int(np.sum(p < alpha_level))
    lo, hi = clopper_pearson_ci(hits, k)
    return MethodSummary(
        label=label,
        n_reps=k,
        mse=float(np.mean(dev**2)),
        mad_signed=float(np.mean(dev)),
        mad_abs=float(np.mean(np.abs(dev))),
        fpr=hits / k,
        fpr_lo=lo,
        fpr_hi=hi,
        detectable_lift=detectable_lift(e) if k >= 2 else 0.0,
        estimates=est,
        p_values=pv,
        failures=int((~ok).sum()),
        errors=list(errors),
    )


@dataclass
class SimulationReport:
    """Per-method summaries of one suite, keyed by method label."""

    truth: float
    alpha_level: float
    methods: dict

    def __getitem__(self, label: str) -> MethodSummary:
        return self.methods[label]

    @property
    def labels(self) -> list:
        return list(self.methods)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for s in self.methods.values():
            w.writerow(s.row())
        return buf.getvalue()

    def pvalues_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("rep", "method", "p"))
        for s in self.methods.values():
            for rep, p in enumerate(s.p_values):
                w.writerow((rep, s.label, fmt(p)))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, truth: float = float("nan"), alpha_level: float = 0.1) -> "SimulationReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        methods = {}
        for r in rows:
            vals = {k: float(r[k]) for k in REPORT_HEADER[2:]}
            methods[r["method"]] = MethodSummary(r["method"], int(r["n_reps"]), **vals)
        return cls(truth, alpha_level, methods)


# -- replication engine ----------------------------------------------------------


def rep_seed_sequence(master_seed: int, rep: int) -> np.random.SeedSequence:
    """Seed material for one replication, a hash of (master_seed, rep)."""
    return np.random.SeedSequence([master_seed, rep])


def _method_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _apply_methods(data: Dataset, methods, seed: int):
    out = []
    for m in methods:
        try:
            r = m.run(data, seed)
            out.append((r.lift, r.p_value, None))
        except Exception as exc:  # a failed replication is tallied, not fatal
            out.append((float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"))
    return out


def _ab_rep(rep: int, control_params, treatment_params, n_per_arm, methods, master_seed):
    c_ss, t_ss, m_ss = rep_seed_sequence(master_seed, rep).spawn(3)
    data = Dataset.from_arms(
        sample_mixture(treatment_params, n_per_arm, t_ss), sample_mixture(control_params, n_per_arm, c_ss)
    )
    return _apply_methods(data, methods, _method_seed(m_ss))


def paired_period_dataset(spec: PairedPeriodSpec, n_per_arm: int, seed) -> Dataset:
    """Draw one experiment from the paired-period generator.

    Exactly `n_per_arm` units are randomized to each arm.
    """
    s_ss, u_ss, v_ss, t_ss = np.random.SeedSequence(seed).spawn(4) if isinstance(seed, int) else seed.spawn(4)
    n = 2 * n_per_arm
    size = sample_mixture(spec.base_params, n, s_ss)
    if spec.noise_cv > 0:
        sigma2 = math.log1p(spec.noise_cv**2)
        mu, sigma = -sigma2 / 2.0, math.sqrt(sigma2)
        u = np.random.default_rng(u_ss).lognormal(mu, sigma, n)
        v = np.random.default_rng(v_ss).lognormal(mu, sigma, n)
    else:
        u = v = np.ones(n)
    t = np.zeros(n, dtype=np.int8)
    t[np.random.default_rng(t_ss).permutation(n)[:n_per_arm]] = 1
    y = size * v * (1.0 + spec.target_lift * t)
    return Dataset(y, t, (size * u)[:, None], ("pre_period",))


def _paired_rep(rep: int, spec, n_per_arm, methods, master_seed):
    d_ss, m_ss = rep_seed_sequence(master_seed, rep).spawn(2)
    data = paired_period_dataset(spec, n_per_arm, d_ss)
    return _apply_methods(data, methods, _method_seed(m_ss))


def default_workers() -> int:
    return os.cpu_count() or 1


def _map_reps(fn: Callable, n_reps: int, workers: Optional[int]) -> list:
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or n_reps == 1:
        return [fn(r) for r in range(n_reps)]
    chunk = max(1, n_reps // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_reps), chunksize=chunk))


def _collect(results: list, methods, truth: float, alpha_level: float, strict: bool) -> SimulationReport:
    n_reps = len(results)
    summaries = {}
    worst = 0
    for j, m in enumerate(methods):
        col = [r[j] for r in results]
        errors = [(rep, c[2]) for rep, c in enumerate(col) if c[2] is not None]
        summaries[m.label] = summarize(
            m.label, [c[0] for c in col], [c[1] for c in col], truth, alpha_level, errors
        )
        worst = max(worst, summaries[m.label].failures)
    report = SimulationReport(truth, alpha_level, summaries)
    if strict and worst > MAX_FAILURE_SHARE * n_reps:
        bad = {k: s.failures for k, s in summaries.items() if s.failures}
        first = next(s.errors[0] for s in summaries.values() if s.errors)
        raise SimulationFailure(
            f"method failures exceed {MAX_FAILURE_SHARE:.0%} of {n_reps} replications: {bad}; first: rep {first[0]}: {first[1]}",
            report=report,
        )
    return report


def run_suite(spec: SimulationSpec, workers: Optional[int] = None, strict: bool = True) -> SimulationReport:
    """Replicate an A/B (or A/A when ``target_lift == 0``) experiment.

    The control arm is drawn from ``spec.control_params`` and the treatment
    arm from the same parameters with the lift injected. Errors are measured
    on the lift scale against ``target_lift``.
    """
    treatment_params = inject_lift(spec.control_params, spec.target_lift)
    for m in spec.methods:
        if m.needs_covariates:
            raise DomainError(f"method {m.label!r} needs covariates; use run_paired_suite")
    fn = partial(
        _ab_rep,
        control_params=spec.control_params,
        treatment_params=treatment_params,
        n_per_arm=spec.n_per_arm,
        methods=spec.methods,
        master_seed=spec.master_seed,
    )
    return _collect(_map_reps(fn, spec.n_reps, workers), spec.methods, spec.target_lift, spec.alpha_level, strict)


def run_paired_suite(
    spec: PairedPeriodSpec,
    n_per_arm: int,
    n_reps: int,
    methods: Iterable = NINE_METHODS,
    master_seed: int = 0,
    alpha_level: float = 0.1,
    workers: Optional[int] = None,
    strict: bool = True,
) -> SimulationReport:
    """Replicate experiments from the paired-period generator."""
    methods = tuple(as_method(m) for m in methods)
    _check_labels(methods)
    if n_reps < 1 or n_per_arm < 2 or master_seed < 0:
        raise DomainError("need n_reps >= 1, n_per_arm >= 2 and a nonnegative master_seed")
    fn = partial(_paired_rep, spec=spec, n_per_arm=n_per_arm, methods=methods, master_seed=master_seed)
    return _collect(_map_reps(fn, n_reps, workers), methods, spec.target_lift, alpha_level, strict)


# -- percentile search -------------------------------------------------------------


@dataclass
class GridSearchResult:
    n_per_arm: int
    lift: float
    percentiles: np.ndarray
    mse: np.ndarray

    @property
    def best_index(self) -> int:
        return int(np.nanargmin(self.mse))

    @property
    def argmin(self) -> float:
        return float(self.percentiles[self.best_index])

    @property
    def min_mse(self) -> float:
        return float(self.mse[self.best_index])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("percentile", "mse"))
        for p, m in zip(self.percentiles, self.mse):
            w.writerow((fmt(p), fmt(m)))
        return buf.getvalue()


def grid_methods(grid: Sequence[float]) -> tuple:
    return tuple(MethodSpec.make("winsor_unified", f"p{fmt(p)}", percentile=float(p)) for p in grid)


def grid_search_percentile(
    control_params: MixtureParams,
    target_lift: float,
    n_per_arm: int,
    grid: Sequence[float] = DEFAULT_GRID,
    n_reps: int = 200,
    seed: int = 0,
    workers: Optional[int] = None,
) -> GridSearchResult:
    """MSE of unified winsorization at each percentile of `grid`.

    One suite is run with a method per grid point, so every percentile is
    evaluated on the same replicated samples.
    """
    grid = [float(p) for p in grid]
    if not grid or any(not (0.5 < p <= 1.0) for p in grid):
        raise DomainError("grid percentiles must lie in (0.5, 1.0]")
    spec = SimulationSpec(control_params, target_lift, n_per_arm, n_reps, grid_methods(grid), seed)
    report = run_suite(spec, workers)
    mse = np.array([report[m.label].mse for m in spec.methods])
    return GridSearchResult(n_per_arm, target_lift, np.array(grid), mse)


@dataclass
class LookupTable:
    """Optimal winsorization percentile per (arm size, lift) cell."""

    cells: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOOKUP_HEADER)
        for c in self.cells:
            w.writerow((fmt(c.n_per_arm), fmt(c.lift), fmt(c.argmin), fmt(c.min_mse)))
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("n_per_arm", "lift", "percentile", "mse"))
        for c in self.cells:
            for p, m in zip(c.percentiles, c.mse):
                w.writerow((fmt(c.n_per_arm), fmt(c.lift), fmt(p), fmt(m)))
        return buf.getvalue()

    def lookup(self, n_per_arm: int, lift: float) -> float:
        for c in self.cells:
            if c.n_per_arm == n_per_arm and math.isclose(c.lift, lift):
                return c.argmin
        raise KeyError((n_per_arm, lift))

    @staticmethod
    def read_csv(text: str) -> list:
        return [
            (int(float(r["n_per_arm"])), float(r["lift"]), float(r["optimal_percentile"]), float(r["min_mse"]))
            for r in csv.DictReader(io.StringIO(text))
        ]


def build_lookup_table(
    control_params: MixtureParams,
    sizes: Sequence[int],
    lifts: Sequence[float],
    grid: Sequence[float] = DEFAULT_GRID,
    n_reps: int = 200,
    seed: int = 0,
    workers: Optional[int] = None,
) -> LookupTable:
    if not sizes or not lifts:
        raise DomainError("size and lift grids must be non-empty")
    cells = [
        grid_search_percentile(control_params, lift, int(n), grid, n_reps, seed, workers)
        for n in sizes
        for lift in lifts
    ]
    return LookupTable(cells)
