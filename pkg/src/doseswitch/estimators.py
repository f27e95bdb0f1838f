"""Estimators of the switcher effect E[Y^c - Y^l | T=1, R=f, S=1].

The effect is estimated as ``(theta1 - theta2) / pi_S`` where

* ``theta1 = E[Y^f | T=1, R=f]`` comes from an outcome model ``h`` fitted on
  the flexible arm and averaged over the whole flexible trial,
* ``theta2 = E[Y^l | T=1, R=f]`` is transported from the fixed-low arm of the
  fixed dosing trial, using an outcome model ``m`` fitted with selection-odds
  weights (doubly robust), with unit weights (regression), or averaged with
  selection-probability weights over everyone (efficient, known selection),
* ``pi_S`` is the observed proportion of switchers on the flexible arm.

Every plug-in average is cross-checked against its augmented form; the two
agree because each outcome model has an intercept and solves its weighted
score equations.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Union

import numpy as np
from scipy.special import expit

from . import inference
from .design import ModelSpec, SpecError, build_design_matrix
from .glm import FittedGLM, fit_weighted_glm
from .tabular import DataError, TrialDataset

KINDS = ("dr_nonparametric", "efficient_semiparametric", "regression")
REDUCTION_TOL = 1e-8
DEFAULT_WEIGHT_CAP = 100.0

SpecLike = Union[str, ModelSpec]


class EstimationError(RuntimeError):
    """Numerical failure during estimation."""


class NoSwitchersError(DataError):
    """No switchers on the flexible arm: the estimand is undefined."""


class PositivityError(EstimationError):
    pass


class ConvergenceError(EstimationError):
    pass


class ReductionError(EstimationError):
    """Plug-in and augmented forms of an estimator disagree."""


class ExtremeWeightWarning(UserWarning):
    pass


def as_spec(spec: SpecLike, link: str, role: str) -> ModelSpec:
    if isinstance(spec, str):
        return ModelSpec.parse(spec, link)
    if spec.link != link:
        raise SpecError(f"{role} model must use the {link} link, got {spec.link}")
    return spec


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    """Working-model fits and empirical proportions for one dataset.

    Design matrices and predictions are evaluated on every row. ``weights``
    holds ``pi/((1-pi) pi_l)`` on fixed-low rows and 0 elsewhere: the weights
    the ``m`` model is fitted with.
    """

    h_fit: FittedGLM
    m_fit: FittedGLM
    sel_fit: Optional[FittedGLM]
    pi_f: float
    pi_l: float
    pi_T: float
    pi_S: float
    X_h: np.ndarray = field(repr=False)
    X_m: np.ndarray = field(repr=False)
    h_pred: np.ndarray = field(repr=False)
    m_pred: np.ndarray = field(repr=False)
    sel_prob: Optional[np.ndarray] = field(default=None, repr=False)
    odds: Optional[np.ndarray] = field(default=None, repr=False)
    weights: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass(frozen=True)
class EstimateReport:
    theta: float
    theta1: float
    theta2: float
    pi_S: float
    estimator_kind: str
    se: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    p_value: Optional[float]
    weight_p5: Optional[float]
    weight_p95: Optional[float]
    n_flexible_arm: int
    n_fixed_low_arm: int
    n_switchers: int
    n_weights_above_cap: int = 0
    reduction_gap: float = 0.0
    influence_mean: Optional[float] = None
    note: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_pi_S(data: TrialDataset) -> float:
    flex = data.flexible_arm
    if not flex.any():
        raise DataError("no subjects with T=1, R=f")
    n_sw = int(np.sum(data.switched[flex] == 1))
    if n_sw == 0:
        raise NoSwitchersError("no switchers on the flexible arm; the switcher effect is undefined")
    return n_sw / int(flex.sum())


def _proportions(data: TrialDataset) -> tuple[float, float, float]:
    t1 = data.trial == 1
    n1 = int(t1.sum())
    n0 = len(data) - n1
    pi_f = int(data.flexible_arm.sum()) / n1
    pi_l = int(data.fixed_low_arm.sum()) / n0
    return pi_f, pi_l, n1 / len(data)


def _require_intercept(spec: ModelSpec, role: str):
    if not spec.has_intercept:
        raise SpecError(f"{role} model needs an intercept so that its plug-in and augmented forms agree")


def _fit_outcome(X, y, rows, weights, spec):
    w = np.where(rows, weights, 0.0)
    fit = fit_weighted_glm(X, y, w, "identity", column_names=spec.labels)
    return replace(fit, spec=spec)


def _fit_selection(data: TrialDataset, sel_spec: ModelSpec):
    X_sel = build_design_matrix(sel_spec, data)
    fit = fit_weighted_glm(X_sel, data.trial.astype(float), None, "logit", column_names=sel_spec.labels)
    fit = replace(fit, spec=sel_spec)
    if not fit.converged:
        why = "separation" if fit.separated else f"no convergence after {fit.iterations} iterations"
        raise ConvergenceError(f"selection model fit failed ({why})")
    eta = X_sel @ fit.coefficients
    with np.errstate(over="ignore"):
        odds = np.exp(eta)
    return fit, expit(eta), odds


def fit_nuisances(
    data: TrialDataset,
    h_spec: SpecLike,
    m_spec: SpecLike,
    sel_spec: Optional[SpecLike],
    *,
    weighted: bool = True,
) -> NuisanceFits:
    """Fit ``h`` on the flexible arm, the selection model on everyone and
    ``m`` on the fixed-low arm.

    With ``weighted=False`` (regression estimator) ``m`` uses unit weights and
    ``sel_spec`` may be None.
    """
    data.require_estimable()
    h_spec = as_spec(h_spec, "identity", "h")
    m_spec = as_spec(m_spec, "identity", "m")
    pi_S = estimate_pi_S(data)
    pi_f, pi_l, pi_T = _proportions(data)
    flex, low = data.flexible_arm, data.fixed_low_arm

    X_h = build_design_matrix(h_spec, data)
    X_m = build_design_matrix(m_spec, data)
    h_fit = _fit_outcome(X_h, data.outcome, flex, 1.0, h_spec)

    sel_fit = sel_prob = odds = weights = None
    if sel_spec is not None:
        sel_spec = as_spec(sel_spec, "logit", "selection")
        sel_fit, sel_prob, odds = _fit_selection(data, sel_spec)
        bad = low & ~(np.isfinite(odds) & (sel_prob < 1.0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise PositivityError(
                f"row {i + 1} (id {data.ids[i]}): fitted selection probability is 1 on the "
                "fixed-low arm, giving an infinite weight"
            )
        weights = np.where(low, np.where(low, odds, 0.0) / pi_l, 0.0)
    elif weighted:
        raise SpecError("a selection model is required for the weighted outcome fit")

    m_weights = weights if weighted else np.full(len(data), 1.0 / pi_l)
    m_fit = _fit_outcome(X_m, data.outcome, low, m_weights, m_spec)

    return NuisanceFits(
        h_fit=h_fit,
        m_fit=m_fit,
        sel_fit=sel_fit,
        pi_f=pi_f,
        pi_l=pi_l,
        pi_T=pi_T,
        pi_S=pi_S,
        X_h=X_h,
        X_m=X_m,
        h_pred=h_fit.predict(X_h),
        m_pred=m_fit.predict(X_m),
        sel_prob=sel_prob,
        odds=odds,
        weights=weights,
    )


def _check_reduction(what: str, plug: float, aug: float, scale: float) -> float:
    gap = abs(plug - aug)
    if not gap <= REDUCTION_TOL * max(1.0, scale):
        raise ReductionError(f"{what}: plug-in {plug!r} and augmented {aug!r} forms differ by {gap:.3g}")
    return gap


def _scale(data: TrialDataset) -> float:
    return float(np.max(np.abs(data.outcome), initial=0.0))


def _theta1_forms(data, fits):
    t1 = data.trial == 1
    f = data.flexible_arm[t1]
    y, h = data.outcome[t1], fits.h_pred[t1]
    plug = float(np.mean(h))
    aug = float(np.mean(np.where(f, (y - h) / fits.pi_f, 0.0) + h))
    return plug, aug


def _theta2_forms(data, m_pred, weights):
    t = data.trial == 1
    low = data.fixed_low_arm
    resid = np.where(low, weights * (data.outcome - m_pred), 0.0)
    plug = float(np.mean(m_pred[t]))
    aug = float((resid.sum() + m_pred[t].sum()) / t.sum())
    return plug, aug


def _efficient_forms(data, fits):
    n = len(data)
    pi = fits.sel_prob
    flex, low = data.flexible_arm, data.fixed_low_arm
    y = data.outcome
    h, m = fits.h_pred, fits.m_pred
    t1_plug = float(np.sum(pi * h) / n / fits.pi_T)
    t1_aug = float(np.sum(np.where(flex, (y - h) / fits.pi_f, 0.0) + pi * h) / n / fits.pi_T)
    t2_plug = float(np.sum(pi * m) / n / fits.pi_T)
    t2_aug = float(np.sum(np.where(low, fits.weights * (y - m), 0.0) + pi * m) / n / fits.pi_T)
    return (t1_plug, t1_aug), (t2_plug, t2_aug)


def estimate_theta1(data: TrialDataset, fits: NuisanceFits) -> float:
    """Average of ``h`` predictions over the whole flexible trial."""
    _require_intercept(fits.h_fit.spec, "h")
    plug, aug = _theta1_forms(data, fits)
    _check_reduction("theta1", plug, aug, _scale(data))
    return plug


def estimate_theta2_dr(data: TrialDataset, fits: NuisanceFits) -> float:
    """Average over the flexible trial of the selection-weighted ``m`` fit."""
    _require_intercept(fits.m_fit.spec, "m")
    if fits.weights is None:
        raise SpecError("theta2 (doubly robust) needs selection-weighted nuisance fits")
    plug, aug = _theta2_forms(data, fits.m_pred, fits.weights)
    _check_reduction("theta2", plug, aug, _scale(data))
    return plug


def estimate_theta2_regression(data: TrialDataset, m_spec: SpecLike) -> float:
    """Average over the flexible trial of an unweighted ``m`` fit on the fixed-low arm."""
    data.require_estimable()
    m_spec = as_spec(m_spec, "identity", "m")
    _require_intercept(m_spec, "m")
    X_m = build_design_matrix(m_spec, data)
    w = np.full(len(data), 1.0 / _proportions(data)[1])
    fit = _fit_outcome(X_m, data.outcome, data.fixed_low_arm, w, m_spec)
    plug, aug = _theta2_forms(data, fit.predict(X_m), w)
    _check_reduction("theta2", plug, aug, _scale(data))
    return plug


def _weight_summary(data, fits, cap):
    if fits.weights is None:
        return None, None, 0
    w = fits.weights[data.fixed_low_arm]
    p5, p95 = np.percentile(w, [5, 95])
    n_above = int(np.sum(w > cap)) if cap is not None else 0
    return float(p5), float(p95), n_above


def _counts(data):
    flex = data.flexible_arm
    return (
        int(flex.sum()),
        int(data.fixed_low_arm.sum()),
        int(np.sum(data.switched[flex] == 1)),
    )


def estimate_kinds(
    data: TrialDataset,
    h_spec: SpecLike,
    m_spec: SpecLike,
    sel_spec: Optional[SpecLike],
    kinds: Iterable[str] = KINDS,
    *,
    weight_cap: Optional[float] = DEFAULT_WEIGHT_CAP,
) -> dict[str, EstimateReport]:
    """Run several estimator kinds on one dataset, sharing the nuisance fits."""
    kinds = tuple(kinds)
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown estimator kind {k!r}; expected one of {KINDS}")
    needs_sel = any(k != "regression" for k in kinds)
    if needs_sel and sel_spec is None:
        raise SpecError("the doubly robust and efficient estimators need a selection model")
    h_spec = as_spec(h_spec, "identity", "h")
    m_spec = as_spec(m_spec, "identity", "m")
    _require_intercept(h_spec, "h")
    _require_intercept(m_spec, "m")

    scale = _scale(data)
    counts = _counts(data)
    out: dict[str, EstimateReport] = {}

    if sel_spec is not None:
        weighted = fits = fit_nuisances(data, h_spec, m_spec, sel_spec)
    else:
        weighted = None
        fits = fit_nuisances(data, h_spec, m_spec, None, weighted=False)
    p5, p95, n_above = _weight_summary(data, fits, weight_cap)
    if n_above:
        warnings.warn(
            f"{n_above} fixed-low weights exceed {weight_cap:g}; estimates may be unstable",
            ExtremeWeightWarning,
            stacklevel=2,
        )

    t1_plug, t1_aug = _theta1_forms(data, fits)
    gap1 = _check_reduction("theta1", t1_plug, t1_aug, scale)
    common = dict(
        pi_S=fits.pi_S,
        weight_p5=p5,
        weight_p95=p95,
        n_flexible_arm=counts[0],
        n_fixed_low_arm=counts[1],
        n_switchers=counts[2],
        n_weights_above_cap=n_above,
    )

    if "dr_nonparametric" in kinds:
        t2_plug, t2_aug = _theta2_forms(data, weighted.m_pred, weighted.weights)
        gap2 = _check_reduction("theta2", t2_plug, t2_aug, scale)
        theta = (t1_plug - t2_plug) / fits.pi_S
        infl = inference.influence_values(data, weighted, theta)
        lo, hi, p = inference.wald_inference(theta, infl.se)
        out["dr_nonparametric"] = EstimateReport(
            theta=theta, theta1=t1_plug, theta2=t2_plug, estimator_kind="dr_nonparametric",
            se=infl.se, ci_low=lo, ci_high=hi, p_value=p,
            reduction_gap=max(gap1, gap2), influence_mean=float(np.mean(infl.total)),
            **common,
        )

    if "efficient_semiparametric" in kinds:
        (e1p, e1a), (e2p, e2a) = _efficient_forms(data, weighted)
        gap = max(
            _check_reduction("theta1 (efficient)", e1p, e1a, scale),
            _check_reduction("theta2 (efficient)", e2p, e2a, scale),
        )
        out["efficient_semiparametric"] = EstimateReport(
            theta=(e1p - e2p) / fits.pi_S, theta1=e1p, theta2=e2p,
            estimator_kind="efficient_semiparametric",
            se=None, ci_low=None, ci_high=None, p_value=None, reduction_gap=gap,
            note="no influence-function standard error is available for the efficient estimator",
            **common,
        )

    if "regression" in kinds:
        reg = fits if weighted is None else _unweighted(data, weighted)
        r2p, r2a = _theta2_forms(data, reg.m_pred, np.full(len(data), 1.0 / fits.pi_l))
        gap2 = _check_reduction("theta2 (regression)", r2p, r2a, scale)
        out["regression"] = EstimateReport(
            theta=(t1_plug - r2p) / fits.pi_S, theta1=t1_plug, theta2=r2p,
            estimator_kind="regression",
            se=None, ci_low=None, ci_high=None, p_value=None, reduction_gap=max(gap1, gap2),
            note="no influence-function standard error is available for the regression estimator",
            **common,
        )

    return {k: out[k] for k in kinds}


def _unweighted(data: TrialDataset, fits: NuisanceFits) -> NuisanceFits:
    m_fit = _fit_outcome(
        fits.X_m, data.outcome, data.fixed_low_arm, np.full(len(data), 1.0 / fits.pi_l), fits.m_fit.spec
    )
    return replace(fits, m_fit=m_fit, m_pred=m_fit.predict(fits.X_m))


def estimate_switcher_effect(
    data: TrialDataset,
    h_spec: SpecLike,
    m_spec: SpecLike,
    sel_spec: Optional[SpecLike],
    kind: str = "dr_nonparametric",
    *,
    weight_cap: Optional[float] = DEFAULT_WEIGHT_CAP,
) -> EstimateReport:
    return estimate_kinds(data, h_spec, m_spec, sel_spec, (kind,), weight_cap=weight_cap)[kind]


def estimate_effect_efficient(
    data: TrialDataset,
    h_spec: SpecLike,
    m_spec: SpecLike,
    sel_spec: SpecLike,
    *,
    weight_cap: Optional[float] = DEFAULT_WEIGHT_CAP,
) -> EstimateReport:
    """Known-selection estimator: averages ``pi(Z) {h(Z) - m(Z)} / pi_T`` over everyone."""
    return estimate_switcher_effect(
        data, h_spec, m_spec, sel_spec, "efficient_semiparametric", weight_cap=weight_cap
    )
