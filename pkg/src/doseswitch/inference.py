"""Influence-function variance for the doubly robust switcher-effect estimator.

The estimator solves a stack of estimating equations (outcome models,
logistic selection model, four empirical proportions and the effect itself).
Its influence function is the raw contribution ``phi`` minus corrections for
the estimated parameters whose derivative terms do not vanish at the
estimating equations: the coefficients of ``m`` and the switcher proportion.
All expectations are replaced by sample means at the estimates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .estimators import NuisanceFits
    from .tabular import TrialDataset

Z_975 = 1.959964


@dataclass(frozen=True, eq=False)
class InfluenceBreakdown:
    phi: np.ndarray = field(repr=False)
    beta_correction: np.ndarray = field(repr=False)
    piS_correction: np.ndarray = field(repr=False)
    total: np.ndarray = field(repr=False)
    se: float


def influence_values(data: "TrialDataset", fits: "NuisanceFits", theta_hat: float) -> InfluenceBreakdown:
    if fits.odds is None:
        raise ValueError("influence values need a fitted logistic selection model")
    n = len(data)
    T = (data.trial == 1).astype(float)
    flex = data.flexible_arm.astype(float)
    low = data.fixed_low_arm
    lowf = low.astype(float)
    Y = data.outcome
    S = np.nan_to_num(data.switched, nan=0.0)
    h, m = fits.h_pred, fits.m_pred
    odds = np.where(low, fits.odds, 0.0)
    pi_f, pi_l, pi_T, pi_S = fits.pi_f, fits.pi_l, fits.pi_T, fits.pi_S

    bracket = T * (flex / pi_f * (Y - h) + h) - (lowf / pi_l * odds * (Y - m) + T * m)
    phi = bracket / (pi_T * pi_S) - T / pi_T * theta_hat

    X = fits.X_m
    d_beta = -np.mean((T - lowf * odds / pi_l)[:, None] * X, axis=0) / (pi_S * pi_T)
    w_beta = lowf * odds / (pi_l * pi_T)
    a_beta = -(X.T * w_beta) @ X / n
    u_beta = X * (w_beta * (Y - m))[:, None]
    try:
        v = np.linalg.solve(a_beta.T, d_beta)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "weighted outcome design on the fixed-low arm is singular; cannot form the sandwich"
        ) from exc
    beta_corr = u_beta @ v

    d_piS = -np.mean(bracket) / (pi_S**2 * pi_T)
    a_piS = -np.mean(T * flex)
    piS_corr = (d_piS / a_piS) * T * flex * (S - pi_S)

    total = phi - beta_corr - piS_corr
    se = math.sqrt(np.var(total, ddof=1) / n) if n > 1 else 0.0
    return InfluenceBreakdown(phi, beta_corr, piS_corr, total, se)


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def wald_inference(theta_hat: float, se: float) -> tuple[float, float, float]:
    """95% Wald interval and two-sided normal p-value."""
    if se < 0:
        raise ValueError("standard error must be nonnegative")
    half = Z_975 * se
    if se == 0:
        p = 1.0 if theta_hat == 0 else 0.0
    else:
        p = math.erfc(abs(theta_hat) / se / math.sqrt(2.0))
    return theta_hat - half, theta_hat + half, min(1.0, p)


def write_influence_csv(data: "TrialDataset", infl: InfluenceBreakdown, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "phi", "beta_correction", "piS_correction", "total"])
        for i in range(len(data)):
            w.writerow([
                data.ids[i],
                repr(float(infl.phi[i])),
                repr(float(infl.beta_correction[i])),
                repr(float(infl.piS_correction[i])),
                repr(float(infl.total[i])),
            ])
