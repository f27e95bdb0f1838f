"""Weighted canonical GLMs: identity link by weighted least squares, logit link by IRLS.

Both solve the weighted score equations

    sum_i w_i x_i (y_i - g^{-1}(x_i' b)) = 0

Least-squares steps use a column-pivoted QR factorisation of the
sqrt-weighted design, which also detects rank deficiency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import expit

from .design import ModelSpec

SCORE_TOL = 1e-10
STEP_TOL = 1e-12
MAX_ITER = 100
PROB_FLOOR = 1e-12
# fitted probabilities this close to 0/1 trigger the exact separation check
SEPARATION_SUSPECT = 1e-6


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, message: str, dependent: Sequence[str] = ()):
        super().__init__(message)
        self.dependent = tuple(dependent)


@dataclass(frozen=True, eq=False)
class FittedGLM:
    coefficients: np.ndarray
    link: Literal["identity", "logit"]
    prior_weights: np.ndarray
    converged: bool
    iterations: int
    max_score_norm: float
    spec: Optional[ModelSpec] = None
    separated: bool = False

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


def predict(fit: FittedGLM, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(fit.coefficients):
        raise ValueError(
            f"design has shape {X.shape}, expected (m, {len(fit.coefficients)})"
        )
    eta = X @ fit.coefficients
    return eta if fit.link == "identity" else expit(eta)


def _column_names(p: int, names: Optional[Sequence[str]]) -> list[str]:
    return list(names) if names is not None else [f"column {j}" for j in range(p)]


def _wls(X: np.ndarray, y: np.ndarray, w: np.ndarray, names=None) -> np.ndarray:
    """Solve min sum w (y - X b)^2 for rows with w > 0."""
    sw = np.sqrt(w)
    Q, R, piv = scipy.linalg.qr(X * sw[:, None], mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        labels = _column_names(X.shape[1], names)
        dependent = [labels[j] for j in piv[rank:]]
        raise RankDeficientError(
            f"design is rank deficient (rank {rank} < {X.shape[1]}); "
            f"linearly dependent: {', '.join(dependent)}",
            dependent,
        )
    beta = np.empty(X.shape[1])
    beta[piv] = scipy.linalg.solve_triangular(R, Q.T @ (sw * y))
    return beta


def is_separated(X: np.ndarray, y: np.ndarray) -> bool:
    """True if some nonzero ``b`` has ``(2y-1) x'b >= 0`` on every row
    (complete or quasi-complete separation), so no finite logistic MLE exists.

    Solved as a linear program over the box ``|b| <= 1``.
    """
    sx = X * (2 * y - 1)[:, None]
    res = scipy.optimize.linprog(
        -sx.sum(axis=0),
        A_ub=-sx,
        b_ub=np.zeros(len(y)),
        bounds=[(-1, 1)] * X.shape[1],
        method="highs",
    )
    if res.status != 0:
        return False
    return -res.fun > 1e-7 * max(1.0, float(np.abs(sx).sum()))


def fit_weighted_glm(
    X,
    y,
    w=None,
    link: Literal["identity", "logit"] = "identity",
    *,
    column_names: Optional[Sequence[str]] = None,
    max_iter: int = MAX_ITER,
) -> FittedGLM:
    """Fit a weighted GLM with canonical link.

    Rows with zero weight are kept in the bookkeeping but do not enter the
    fit. For the logit link a non-converged or separated fit is returned with
    ``converged=False`` and the last iterate; the caller decides what to do.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if X.ndim != 2 or y.shape != (n,) or w.shape != (n,):
        raise ValueError("X must be n x p with y and w of length n")
    if n < 1:
        raise ValueError("need at least one observation")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if link not in ("identity", "logit"):
        raise ValueError(f"unsupported link {link!r}")

    pos = w > 0
    Xp, yp, wp = X[pos], y[pos], w[pos]
    p = X.shape[1]
    if Xp.shape[0] < p:
        raise RankDeficientError(
            f"only {Xp.shape[0]} positive-weight rows for {p} coefficients",
            _column_names(p, column_names)[Xp.shape[0]:],
        )

    if link == "identity":
        beta = _wls(Xp, yp, wp, column_names)
        score = Xp.T @ (wp * (yp - Xp @ beta))
        return FittedGLM(beta, link, w, True, 1, float(np.max(np.abs(score), initial=0.0)))

    if not np.all((yp == 0) | (yp == 1)):
        raise ValueError("logit link requires a 0/1 response")

    beta = np.zeros(p)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = Xp @ beta
        mu = np.clip(expit(eta), PROB_FLOOR, 1 - PROB_FLOOR)
        score = Xp.T @ (wp * (yp - expit(eta)))
        small = np.max(np.abs(score)) <= SCORE_TOL
        v = mu * (1 - mu)
        z = eta + (yp - mu) / v
        new = _wls(Xp, z, wp * v, column_names)
        if small:
            # the score test is scale-dependent; one more Newton step makes
            # the result insensitive to rescaling the weights
            if np.all(np.isfinite(new)):
                beta = new
            converged = True
            break
        step = np.max(np.abs(new - beta)) / max(np.max(np.abs(new)), 1e-300)
        beta = new
        if step <= STEP_TOL:
            converged = True
            break

    eta = Xp @ beta
    mu = expit(eta)
    score = Xp.T @ (wp * (yp - mu))
    separated = False
    if not converged or np.any((mu < SEPARATION_SUSPECT) | (mu > 1 - SEPARATION_SUSPECT)):
        separated = is_separated(Xp, yp)
    return FittedGLM(
        beta,
        link,
        w,
        converged and not separated,
        it,
        float(np.max(np.abs(score))),
        separated=separated,
    )
