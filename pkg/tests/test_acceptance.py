"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The Monte-Carlo criteria run full-size suites and take several minutes on a
single core; ``-m "not slow"`` skips them.
"""

import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from hefty.causal import CrossFitPlan, dml_estimate, doubly_robust
from hefty.estimators import Dataset, clopper_pearson_ci, naive_estimate
from hefty.linear_models import DesignMatrix, huber_fit, ols_fit
from hefty.simharness import (
    DEFAULT_GRID,
    NINE_METHODS,
    MethodSpec,
    PairedPeriodSpec,
    SimulationSpec,
    build_lookup_table,
    grid_search_percentile,
    run_paired_suite,
    run_suite,
)
from hefty.tail_model import MixtureParams, mixture_mean, mixture_pdf

# A/A suites: 90% non-converting, exponential torso of mean 50, Pareto(1.5) tail
# beyond 5000 carrying 40% of the mean
AA_PARAMS = MixtureParams(0.9, 0.0995, 0.0005, 0.02, 5000.0, 1.5)
AA_SEED = 2019
# paired-period suites: latent unit size with a 5% Pareto(1.5) tail
PAIRED_PARAMS = MixtureParams(0.3, 0.65, 0.05, 0.002, 5000.0, 1.5)
PAIRED_SEEDS = range(1000, 1010)
N_REPS = 500


@pytest.fixture(scope="module")
def aa_report():
    methods = (
        MethodSpec("naive"),
        MethodSpec.make("winsor_unified", "unified", percentile=0.99),
        MethodSpec.make("winsor_separate", "separate", percentile=0.99),
        MethodSpec("huber"),
        MethodSpec("huber_per_arm"),
    ) + tuple(MethodSpec.make("winsor_unified", f"grid{p:g}", percentile=p) for p in DEFAULT_GRID)
    spec = SimulationSpec(AA_PARAMS, 0.0, 100_000, N_REPS, methods, master_seed=AA_SEED, alpha_level=0.1)
    return run_suite(spec)


def test_criterion_01_clopper_pearson(verdict):
    quoted = {79: (0.127, 0.193), 46: (0.068, 0.121), 93: (0.153, 0.223)}
    got = {k: tuple(round(v, 3) for v in clopper_pearson_ci(k, 500)) for k in quoted}
    assert verdict(1, got == quoted, f"intervals {got}")


def _fpr_line(s):
    return f"{s.label} fpr={s.fpr:.3f} ci=[{s.fpr_lo:.3f}, {s.fpr_hi:.3f}]"


def _exceeds(s):
    hits = round(s.fpr * s.n_reps)
    return stats.binomtest(hits, s.n_reps, 0.10, alternative="greater").pvalue


@pytest.mark.slow
def test_criterion_02_unified_winsorization_calibrated(aa_report, verdict):
    s = aa_report["unified"]
    ok = s.n_reps == N_REPS and s.fpr_lo <= 0.10 <= s.fpr_hi
    assert verdict(2, ok, _fpr_line(s))


@pytest.mark.slow
def test_criterion_03_separate_winsorization_inflated(aa_report, verdict):
    s = aa_report["separate"]
    p = _exceeds(s)
    assert verdict(3, p < 0.05, f"{_fpr_line(s)} one-sided p={p:.2g}")


@pytest.mark.slow
def test_criterion_04_huber_joint_vs_per_arm(aa_report, verdict):
    joint, per_arm = aa_report["huber"], aa_report["huber_per_arm"]
    p = _exceeds(per_arm)
    ok = joint.fpr_lo <= 0.10 <= joint.fpr_hi and p < 0.05
    assert verdict(4, ok, f"{_fpr_line(joint)}; {_fpr_line(per_arm)} one-sided p={p:.2g}")


@pytest.mark.slow
def test_criterion_05_variance_reduction(aa_report, verdict):
    naive = aa_report["naive"].mse
    grid = {p: aa_report[f"grid{p:g}"].mse for p in DEFAULT_GRID}
    best = min(grid, key=grid.get)
    r_huber, r_wins = aa_report["huber"].mse / naive, grid[best] / naive
    ok = r_huber <= 1e-2 and r_wins <= 1e-2
    detail = f"mse ratio to naive: huber={r_huber:.2e}, unified@{best:g}={r_wins:.2e}"
    assert verdict(5, ok, detail)


@pytest.mark.slow
def test_criterion_06_table2_ordering(verdict):
    spec = PairedPeriodSpec(PAIRED_PARAMS, noise_cv=0.3, target_lift=0.0)
    labels = [m.label for m in NINE_METHODS]
    chains_ok, wins = [], 0
    for seed in PAIRED_SEEDS:
        rep = run_paired_suite(spec, 5000, N_REPS, NINE_METHODS, master_seed=seed)
        mse = {k: rep[k].mse for k in labels}
        chains_ok.append(
            mse["dml_huber"] < mse["post_strat_huber"] < mse["post_strat"]
            and mse["dml_huber"] < mse["huber"] < mse["winsorized"] < mse["naive"]
        )
        wins += min(mse, key=mse.get) == "dml_huber"
    first = chains_ok[0]
    ok = first and wins >= math.ceil(0.95 * len(PAIRED_SEEDS))
    broken = [s for s, c in zip(PAIRED_SEEDS, chains_ok) if not c]
    detail = (f"ordering holds in {sum(chains_ok)}/{len(chains_ok)} suites; "
              f"dml_huber minimal in {wins}/{len(chains_ok)}; broken seeds {broken}")
    assert verdict(6, ok, detail)


@pytest.mark.slow
def test_criterion_07_grid_search_monotone(verdict):
    by_size = build_lookup_table(AA_PARAMS, [100_000, 1_000_000], [0.015], DEFAULT_GRID, N_REPS, seed=AA_SEED)
    by_lift = build_lookup_table(AA_PARAMS, [100_000], [0.01, 0.06], DEFAULT_GRID, N_REPS, seed=AA_SEED)
    small, large = by_size.lookup(100_000, 0.015), by_size.lookup(1_000_000, 0.015)
    low, high = by_lift.lookup(100_000, 0.01), by_lift.lookup(100_000, 0.06)
    ok = small <= large and low <= high
    detail = f"argmin 100k={small:.4f} <= 1M={large:.4f}; lift 1%={low:.4f} <= 6%={high:.4f}"
    assert verdict(7, ok, detail)


def test_criterion_08_oracle_equivalences(verdict):
    rng = np.random.default_rng(8)
    x = np.column_stack([np.ones(60), rng.normal(size=60)])
    y = x @ [2.0, -1.0] + rng.uniform(-5, 5, 60)
    ols, hub = ols_fit(x, y), huber_fit(x, y, 1e12)
    huber_gap = np.max(np.abs(hub.coefficients / ols.coefficients - 1))

    yy = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0])
    tt = np.array([1, 0, 1, 0, 1, 0])
    xx = np.array([0.2, -1.0, 0.7, 0.4, -0.3, 1.1])
    folds = np.array([0, 0, 1, 1, 2, 2])
    ey, et = np.empty(6), np.empty(6)
    for j in range(3):
        te = folds == j
        b = np.linalg.lstsq(np.column_stack([np.ones(4), xx[~te]]), yy[~te], rcond=None)[0]
        ey[te] = yy[te] - b[0] - b[1] * xx[te]
        et[te] = tt[te] - tt[~te].mean()
    closed = np.sum(et * ey) / np.sum(et**2)
    dml = dml_estimate(Dataset(yy, tt, xx[:, None]), CrossFitPlan(3, folds), "squared", clip=0.0,
                       propensity_model="constant").effect_abs
    dml_gap = abs(dml / closed - 1)

    d = Dataset(rng.exponential(3, 200), np.r_[np.ones(90), np.zeros(110)], rng.normal(size=(200, 1)))
    saturated = (d.control.mean(), d.treated.mean())
    dr = doubly_robust(d, propensity=0.5, outcome=saturated).effect_abs
    dr_gap = abs(dr / naive_estimate(d).effect_abs - 1)

    p = MixtureParams(0.3, 0.65, 0.05, 0.002, 5000.0, 1.5)
    c = p.cutoff_c
    f = lambda v: v * mixture_pdf(p, v)
    torso = integrate.quad(f, 0, c, epsabs=0, epsrel=1e-12, limit=200)[0]
    tail = integrate.quad(lambda u: f(c / u) * c / u**2, 0, 1, epsabs=0, epsrel=1e-12, limit=200)[0]
    mean_gap = abs(mixture_mean(p) / (torso + tail) - 1)

    ok = huber_gap < 1e-6 and dml_gap < 1e-10 and dr_gap < 1e-10 and mean_gap < 1e-6
    detail = f"rel gaps huber/ols={huber_gap:.1e} dml={dml_gap:.1e} dr/naive={dr_gap:.1e} mean={mean_gap:.1e}"
    assert verdict(8, ok, detail)


def _confounded(seed, n=2000, effect=1.5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    t = (rng.random(n) < expit(0.8 * x)).astype(int)
    y = 1.0 + 2.0 * x + effect * t + rng.normal(size=n)
    return Dataset(y, t, x[:, None], ("x",)), rng


def test_criterion_09_double_robustness(verdict):
    truth = 1.5
    bad_propensity = bad_outcome = 0
    for seed in range(100):
        d, rng = _confounded(seed + 9000)
        # correct outcome model, propensity forced to a constant
        r = doubly_robust(d, propensity=0.5)
        bad_propensity += abs(r.effect_abs - truth) < 3 * r.std_err
        # fitted propensity, outcome model fitted on shuffled covariates
        xs = rng.permutation(d.covariates[:, 0])
        fit = ols_fit(DesignMatrix.from_columns({"intercept": 1.0, "treatment": d.assignment, "x": xs}), d.response)
        tau0 = fit.coef("intercept") + fit.coef("x") * xs
        r = doubly_robust(d, outcome=(tau0, tau0 + fit.coef("treatment")))
        bad_outcome += abs(r.effect_abs - truth) < 3 * r.std_err
    ok = bad_propensity >= 95 and bad_outcome >= 95
    assert verdict(9, ok, f"within 3 SE: constant propensity {bad_propensity}/100, broken outcome {bad_outcome}/100")


@pytest.mark.slow
def test_criterion_10_determinism_across_workers(verdict):
    aa = SimulationSpec(AA_PARAMS, 0.015, 20_000, 40, ("naive", "winsor_separate", "huber", "huber_per_arm"), AA_SEED)
    paired = PairedPeriodSpec(PAIRED_PARAMS, 0.3, 0.0)
    outputs = {}
    for w in (1, 4):
        a = run_suite(aa, workers=w)
        b = run_paired_suite(paired, 1000, 20, NINE_METHODS, master_seed=7, workers=w)
        g = grid_search_percentile(AA_PARAMS, 0.015, 20_000, DEFAULT_GRID, 20, seed=3, workers=w)
        outputs[w] = (a.to_csv(), a.pvalues_csv(), b.to_csv(), b.pvalues_csv(), g.to_csv())
    same = [x.encode() == y.encode() for x, y in zip(outputs[1], outputs[4])]
    assert verdict(10, all(same), f"byte-identical outputs {sum(same)}/{len(same)} across workers 1 and 4")
