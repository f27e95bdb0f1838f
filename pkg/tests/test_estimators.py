import warnings

import numpy as np
import pytest
import scipy.optimize
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.special import expit

from doseswitch.design import CORRECT_OUTCOME, CORRECT_SELECTION, SpecError
from doseswitch.estimators import (
    REDUCTION_TOL,
    ConvergenceError,
    ExtremeWeightWarning,
    NoSwitchersError,
    estimate_effect_efficient,
    estimate_kinds,
    estimate_pi_S,
    estimate_switcher_effect,
    estimate_theta1,
    estimate_theta2_dr,
    estimate_theta2_regression,
    fit_nuisances,
)
from doseswitch.inference import Z_975
from doseswitch.simulation import FLEX_MU, FLEX_PHI, DGPSetting, generate_trial_data

from conftest import make_dataset


# -- independent oracles -------------------------------------------------------

def logistic_oracle(X, t):
    """Solve the logistic score equations with a generic root finder."""
    res = scipy.optimize.root(
        lambda g: X.T @ (t - expit(X @ g)),
        np.zeros(X.shape[1]),
        jac=lambda g: -(X.T * (expit(X @ g) * (1 - expit(X @ g)))) @ X,
        tol=1e-13,
    )
    assert np.max(np.abs(X.T @ (t - expit(X @ res.x)))) < 1e-9
    return res.x


def wls_oracle(X, y, w):
    XtW = X.T * w
    return np.linalg.solve(XtW @ X, XtW @ y)


def toy(n_flex=6, n_low=6, n_other=(3, 2, 2), seed=0, k=2):
    """Random mixed dataset: flexible p/f arms and fixed p/h/l arms."""
    rng = np.random.default_rng(seed)
    arms = [(1, "p")] * n_other[0] + [(1, "f")] * n_flex + [(0, "p")] * n_other[1] \
        + [(0, "h")] * n_other[2] + [(0, "l")] * n_low
    trial = np.array([a[0] for a in arms])
    arm = np.array([a[1] for a in arms])
    n = len(arms)
    Z = rng.normal(size=(n, k)) + 0.4 * trial[:, None]
    y = rng.normal(size=n) + Z.sum(axis=1)
    flex = (trial == 1) & (arm == "f")
    s = np.where(flex, 0.0, np.nan)
    s[np.flatnonzero(flex)[: max(1, n_flex // 2)]] = 1.0
    return make_dataset(trial, arm, y, Z, switched=s)


# -- pi_S ----------------------------------------------------------------------

def test_pi_S_counting():
    d = make_dataset([1, 1, 1, 1, 0], list("ffffl"), np.zeros(5), switched=[1, 0, 1, 1, np.nan])
    assert estimate_pi_S(d) == 0.75


def test_no_switchers():
    d = make_dataset([1, 1, 0], list("ffl"), np.zeros(3), switched=[0, 0, np.nan])
    with pytest.raises(NoSwitchersError, match="no switchers"):
        estimate_pi_S(d)
    with pytest.raises(NoSwitchersError):
        estimate_switcher_effect(d, "1", "1", "1")


# -- theta1 --------------------------------------------------------------------

def test_theta1_constant_outcome():
    d = toy(seed=1)
    y = np.where(d.flexible_arm, 4.25, d.outcome)
    d2 = make_dataset(d.trial, d.arm, y, d.covariates, switched=d.switched)
    fits = fit_nuisances(d2, "1 + Z1 + Z2", "1", "1")
    assert estimate_theta1(d2, fits) == pytest.approx(4.25, abs=1e-12)


def test_theta1_intercept_only_is_arm_mean():
    d = toy(seed=2)
    fits = fit_nuisances(d, "1", "1", "1")
    assert estimate_theta1(d, fits) == pytest.approx(d.outcome[d.flexible_arm].mean(), abs=1e-12)


def test_theta1_eight_rows_hand_average():
    # 3 flexible-arm rows with Y = 2 + 3 Z exactly; average the line over all T=1 rows
    trial = [1, 1, 1, 1, 1, 0, 0, 0]
    arm = ["p", "p", "f", "f", "f", "l", "l", "h"]
    z = np.array([0.0, 4.0, 1.0, 2.0, -1.0, 5.0, 6.0, 7.0])
    y = np.array([9.0, 9.0, 5.0, 8.0, -1.0, 0.0, 1.0, 0.0])
    d = make_dataset(trial, arm, y, z[:, None], switched=[np.nan, np.nan, 1, 0, 1, np.nan, np.nan, np.nan])
    fits = fit_nuisances(d, "1 + Z1", "1", "1")
    expected = np.mean(2 + 3 * z[:5])  # (2 + 14 + 5 + 8 - 1)/5 = 5.6
    assert expected == pytest.approx(5.6)
    assert estimate_theta1(d, fits) == pytest.approx(5.6, abs=1e-12)


# -- theta2 ----------------------------------------------------------------------

def test_theta2_dr_ten_rows_brute_force():
    d = toy(n_flex=3, n_low=4, n_other=(1, 1, 1), seed=3)
    assert len(d) == 10
    Z = d.covariates
    T = d.trial.astype(float)
    low = d.fixed_low_arm
    Xs = np.c_[np.ones(10), Z[:, 0]]
    g = logistic_oracle(Xs, T)
    w = np.exp(Xs @ g) / low.mean(where=T == 0)
    Xm = np.c_[np.ones(10), Z]
    b = wls_oracle(Xm[low], d.outcome[low], w[low])
    m = Xm @ b
    n1 = T.sum()
    augmented = (np.sum(w[low] * (d.outcome[low] - m[low])) + m[T == 1].sum()) / n1
    fits = fit_nuisances(d, "1", "1 + Z1 + Z2", "1 + Z1")
    np.testing.assert_allclose(fits.m_fit.coefficients, b, rtol=0, atol=1e-9)
    assert estimate_theta2_dr(d, fits) == pytest.approx(augmented, abs=1e-9)


def test_m_fit_six_row_oracle():
    trial = [1, 1, 0, 0, 0, 0]
    arm = ["f", "f", "l", "l", "l", "l"]
    z = np.array([[0.2], [1.0], [-0.5], [0.3], [1.4], [2.0]])
    y = np.array([1.0, 2.0, 0.5, -1.0, 3.0, 2.5])
    d = make_dataset(trial, arm, y, z, switched=[1, 0] + [np.nan] * 4)
    fits = fit_nuisances(d, "1", "1 + Z1", "1 + Z1")
    X = np.c_[np.ones(6), z]
    g = logistic_oracle(X, np.array(trial, float))
    w = np.exp(X @ g) / 1.0
    np.testing.assert_allclose(fits.m_fit.coefficients, wls_oracle(X[2:], y[2:], w[2:]), atol=1e-10)


def test_intercept_only_selection_gives_constant_weights():
    d = toy(seed=4)
    fits = fit_nuisances(d, "1 + Z1", "1 + Z1 + Z2", "1")
    n1 = int((d.trial == 1).sum())
    n_low = int(d.fixed_low_arm.sum())
    np.testing.assert_allclose(fits.weights[d.fixed_low_arm], n1 / n_low, rtol=1e-12)
    unweighted = fit_nuisances(d, "1 + Z1", "1 + Z1 + Z2", None, weighted=False)
    np.testing.assert_allclose(fits.m_fit.coefficients, unweighted.m_fit.coefficients, atol=1e-12)
    assert estimate_theta2_dr(d, fits) == pytest.approx(estimate_theta2_regression(d, "1 + Z1 + Z2"), abs=1e-12)


def test_regression_intercept_only_is_low_arm_mean():
    d = toy(seed=5)
    assert estimate_theta2_regression(d, "1") == pytest.approx(d.outcome[d.fixed_low_arm].mean(), abs=1e-12)


def test_theta2_dr_intercept_only_m_is_weighted_low_mean():
    d = toy(n_flex=20, n_low=20, seed=6)
    fits = fit_nuisances(d, "1", "1", "1 + Z1 + Z2")
    low = d.fixed_low_arm
    w = fits.weights[low]
    assert estimate_theta2_dr(d, fits) == pytest.approx(np.sum(w * d.outcome[low]) / w.sum(), abs=1e-12)


# -- full estimator ------------------------------------------------------------

def test_twelve_row_intercept_only_arithmetic():
    trial = [1] * 6 + [0] * 6
    arm = ["p", "p", "f", "f", "f", "f", "p", "h", "l", "l", "l", "h"]
    y = np.array([0, 0, 3.0, 5.0, 4.0, 8.0, 0, 0, 1.0, 2.0, 3.0, 0])
    s = [np.nan, np.nan, 1, 0, 1, 1] + [np.nan] * 6
    d = make_dataset(trial, arm, y, np.arange(12.0)[:, None], switched=s)
    # (mean_f - mean_l) / prop_switch = (5 - 2) / 0.75
    for kind in ("dr_nonparametric", "efficient_semiparametric", "regression"):
        r = estimate_switcher_effect(d, "1", "1", "1", kind)
        assert r.theta == pytest.approx(4.0, abs=1e-12), kind
    assert estimate_effect_efficient(d, "1", "1", "1").theta == pytest.approx(4.0, abs=1e-12)


def test_report_invariants(setting1_data):
    for kind, r in estimate_kinds(setting1_data, CORRECT_OUTCOME, CORRECT_OUTCOME, CORRECT_SELECTION).items():
        assert r.estimator_kind == kind
        assert abs(r.theta - (r.theta1 - r.theta2) / r.pi_S) <= 1e-12
        assert r.reduction_gap <= REDUCTION_TOL
        assert (r.n_flexible_arm, r.n_fixed_low_arm) == (100, 100)
        if kind == "dr_nonparametric":
            assert r.ci_low <= r.theta <= r.ci_high
            assert abs((r.ci_high - r.ci_low) / 2 - Z_975 * r.se) <= 1e-9
            assert abs(r.influence_mean) <= 1e-6
        else:
            assert r.se is None and r.ci_low is None and "no influence-function" in r.note


def test_null_effect():
    rng = np.random.default_rng(8)
    n = 4000
    trial = np.r_[np.ones(2 * n), np.zeros(2 * n)].astype(int)
    arm = np.r_[["p"] * n, ["f"] * n, ["p"] * n, ["l"] * n]
    z = rng.normal(size=(4 * n, 1)) + 0.5 * trial[:, None]
    y = 1 + 2 * z[:, 0] + rng.normal(size=4 * n)
    flex = (trial == 1) & (arm == "f")
    s = np.where(flex, (rng.random(4 * n) < 0.5).astype(float), np.nan)
    d = make_dataset(trial, arm, y, z, switched=s)
    r = estimate_switcher_effect(d, "1 + Z1", "1 + Z1", "1 + Z1")
    assert abs(r.theta) < 4 * r.se and abs(r.theta) < 0.15


def superset_data(seed, n):
    rng = np.random.default_rng(seed)
    while True:
        d = toy(n_flex=n, n_low=n, n_other=(n, n, n), seed=int(rng.integers(2**31)), k=3)
        if 0 < np.nansum(d.switched) < n:
            return d


@settings(max_examples=120, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.integers(8, 25),
    st.lists(st.sampled_from(["Z1", "Z2", "Z3", "Z1:Z2", "log_abs(Z3)"]), min_size=0, max_size=3, unique=True),
    st.lists(st.sampled_from(["Z1", "Z2", "Z3", "Z2:Z3"]), min_size=0, max_size=2, unique=True),
)
def test_efficient_equals_dr_when_selection_spans_outcomes(seed, n, outcome_terms, extra):
    d = superset_data(seed, n)
    out = " + ".join(["1", *outcome_terms])
    sel = " + ".join(["1", *outcome_terms, *[t for t in extra if t not in outcome_terms]])
    try:
        r = estimate_kinds(d, out, out, sel, ("dr_nonparametric", "efficient_semiparametric"))
    except ConvergenceError:
        assume(False)  # separated selection fit on a tiny sample; nothing to compare
    assert abs(r["dr_nonparametric"].theta - r["efficient_semiparametric"].theta) <= 1e-8
    assert max(x.reduction_gap for x in r.values()) <= REDUCTION_TOL


def test_efficient_differs_when_selection_is_smaller():
    d = generate_trial_data(DGPSetting.named(3, n_per_arm=40), 21)
    assert len(d) == 200
    h = m = "1 + X1 + X7 + X8"
    sel = "1 + X7"
    r = estimate_kinds(d, h, m, sel, ("dr_nonparametric", "efficient_semiparametric"))
    # independent evaluation of both formulas
    Z = d.covariates
    col = {c: Z[:, i] for i, c in enumerate(d.covariate_names)}
    T = d.trial.astype(float)
    flex, low = d.flexible_arm, d.fixed_low_arm
    n, n1 = len(d), T.sum()
    Xs = np.c_[np.ones(n), col["X7"]]
    g = logistic_oracle(Xs, T)
    pi = expit(Xs @ g)
    w = np.exp(Xs @ g) / low[T == 0].mean()
    Xo = np.c_[np.ones(n), col["X1"], col["X7"], col["X8"]]
    hp = Xo @ wls_oracle(Xo[flex], d.outcome[flex], np.ones(flex.sum()))
    mp = Xo @ wls_oracle(Xo[low], d.outcome[low], w[low])
    piS = np.nanmean(d.switched)
    dr = (hp[T == 1].mean() - mp[T == 1].mean()) / piS
    eff = (np.sum(pi * hp) - np.sum(pi * mp)) / n1 / piS
    assert abs(dr - eff) > 1e-3
    assert r["dr_nonparametric"].theta == pytest.approx(dr, abs=1e-9)
    assert r["efficient_semiparametric"].theta == pytest.approx(eff, abs=1e-9)


def test_order_invariance(setting3_data):
    d = setting3_data
    perm = np.random.default_rng(0).permutation(len(d))
    a = estimate_kinds(d, CORRECT_OUTCOME, CORRECT_OUTCOME, CORRECT_SELECTION)
    b = estimate_kinds(d.take(perm), CORRECT_OUTCOME, CORRECT_OUTCOME, CORRECT_SELECTION)
    for k in a:
        assert abs(a[k].theta - b[k].theta) <= 1e-10
    assert abs(a["dr_nonparametric"].se - b["dr_nonparametric"].se) <= 1e-10


# -- errors and diagnostics ----------------------------------------------------

def test_dr_needs_selection_model(setting1_data):
    with pytest.raises(SpecError):
        estimate_switcher_effect(setting1_data, "1", "1", None)
    r = estimate_switcher_effect(setting1_data, "1 + X1", "1 + X1", None, "regression")
    assert r.se is None and r.note


def test_intercept_required(setting1_data):
    with pytest.raises(SpecError, match="intercept"):
        estimate_switcher_effect(setting1_data, "X1", "1", "1")


def test_unknown_kind(setting1_data):
    with pytest.raises(ValueError, match="unknown estimator kind"):
        estimate_switcher_effect(setting1_data, "1", "1", "1", "ipw")


def test_separated_selection_model_raises():
    d = toy(seed=9)
    t = d.trial.astype(float)
    sep = make_dataset(d.trial, d.arm, d.outcome, np.c_[d.covariates, t - 0.5], switched=d.switched)
    with pytest.raises(ConvergenceError, match="separation"):
        estimate_switcher_effect(sep, "1", "1", "1 + Z3")


def test_extreme_weight_warning(setting3_data):
    with pytest.warns(ExtremeWeightWarning):
        r = estimate_switcher_effect(setting3_data, CORRECT_OUTCOME, CORRECT_OUTCOME, CORRECT_SELECTION,
                                     weight_cap=3.0)
    assert r.n_weights_above_cap > 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        estimate_switcher_effect(setting3_data, CORRECT_OUTCOME, CORRECT_OUTCOME, CORRECT_SELECTION, weight_cap=None)


def test_weights_percentiles_near_two_in_setting_one(setting1_data):
    # with identical covariate laws the transport weight is n1 / n_low = 2
    r = estimate_switcher_effect(setting1_data, CORRECT_OUTCOME, CORRECT_OUTCOME, CORRECT_SELECTION)
    assert 1.2 < r.weight_p5 < 2 < r.weight_p95 < 3


# -- large samples ---------------------------------------------------------------

@pytest.fixture(scope="module")
def big_setting1():
    return generate_trial_data(DGPSetting.named(1, n_per_arm=10**6), 99)


@pytest.mark.slow
def test_large_n_consistency(big_setting1):
    r = estimate_switcher_effect(big_setting1, CORRECT_OUTCOME, CORRECT_OUTCOME, CORRECT_SELECTION)
    assert abs(r.theta - (-3.59)) <= 0.02


@pytest.mark.slow
def test_pi_S_against_monte_carlo_oracle(big_setting1):
    rng = np.random.default_rng(123)
    k = 10**7
    lin = np.zeros(k)
    lin += rng.standard_normal(k)                    # X3
    lin += rng.random(k) < 0.5                        # X6
    lin += FLEX_MU + rng.standard_normal(k)          # X7
    lin += FLEX_MU + rng.standard_normal(k)          # X8
    lin += rng.random(k) < FLEX_PHI                   # X9
    lin += rng.random(k) < FLEX_PHI                   # X10
    oracle = expit(lin).mean()
    # sampling sd of the estimate is about sqrt(.25/1e6) = 5e-4
    assert abs(estimate_pi_S(big_setting1) - oracle) <= 0.003
