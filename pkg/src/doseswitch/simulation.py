"""Synthetic two-trial data and the Monte Carlo study built on it.

Data-generating process (noise sd 1 throughout):

* X1..X3 ~ N(0, 1) and X4..X6 ~ Ber(0.5) in both trials.
* X7, X8 ~ N(0.5, 1) and X9, X10 ~ Ber(0.6) in the flexible trial;
  N(mu, 1) and Ber(phi) in the fixed trial.
* Optionally X11, bivariate normal with X7 at a given correlation, same mean
  and unit variance.
* Potential outcome means::

      m_p = X3 + X6 + X8 + X10 + X3X6 + X7X9
      m_l = X1 + ... + X10 + X3X6 + X7X9
      m_c = -X1 - .5X2 + X3 - X4 - .5X5 + X6 - .5X7 + X8 - .5X9 + X10 + X3X6 + X7X9

* S ~ Ber(expit(X3 + X6 + X7 + X8 + X9 + X10)) on the flexible arm.

The flexible trial has arms p and f, the fixed trial p, h and l, each with
``n_per_arm`` subjects. The placebo and fixed-high arms are generated only to
mirror the design; no estimator reads them. Fixed-high outcomes are a
placeholder draw from N(m_l, 1).

Random numbers
--------------
Replicate ``i`` of a run with master seed ``s`` draws from
``numpy.random.Generator(PCG64(SeedSequence(s, spawn_key=(i,))))``; normal
variates use numpy's ziggurat sampler. Results are therefore reproducible
bit-for-bit for a given numpy version, independent of the worker count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from scipy.special import expit

from .design import (
    CORRECT_OUTCOME,
    CORRECT_SELECTION,
    MISSPECIFIED_OUTCOME,
    MISSPECIFIED_SELECTION,
    OMIT_X7_OUTCOME,
    OMIT_X7_SELECTION,
    PROXY_X11_OUTCOME,
    PROXY_X11_SELECTION,
    ModelSpec,
    SpecError,
)
from .estimators import KINDS, EstimationError, estimate_kinds
from .tabular import DataError, TrialDataset

SETTINGS = {1: (0.6, 0.5), 2: (0.5, 0.25), 3: (0.4, 0.0), 4: (0.2, -0.5), 5: (0.1, -1.0)}
FLEX_PHI, FLEX_MU = 0.6, 0.5
PAPER_TRUTH = -3.59
ORACLE_DRAWS = 10**7
ORACLE_SEED = 20190101

MISSPECIFICATIONS = ("none", "outcome", "selection", "both", "omit_x7", "proxy_x11")


@dataclass(frozen=True)
class Violation:
    """Exchangeability violation: X7 unmeasured, optionally with a measured proxy X11."""

    kind: Literal["none", "omit_x7", "proxy_x11"] = "none"
    correlation: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("none", "omit_x7", "proxy_x11"):
            raise ValueError(f"unknown violation {self.kind!r}")
        if self.kind == "proxy_x11":
            if self.correlation is None or not 0 < self.correlation < 1:
                raise ValueError("proxy_x11 needs a correlation in (0, 1)")
        elif self.correlation is not None:
            raise ValueError("correlation only applies to proxy_x11")


@dataclass(frozen=True)
class DGPSetting:
    phi: float
    mu: float
    n_per_arm: int = 100
    violation: Violation = Violation()

    def __post_init__(self):
        if self.n_per_arm < 1:
            raise ValueError("n_per_arm must be at least 1")

    @classmethod
    def named(cls, k: int, n_per_arm: int = 100, violation: Violation = Violation()) -> "DGPSetting":
        phi, mu = SETTINGS[k]
        return cls(phi, mu, n_per_arm, violation)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        names = [f"X{j}" for j in range(1, 11)]
        if self.violation.kind == "omit_x7":
            names.remove("X7")
        elif self.violation.kind == "proxy_x11":
            names.append("X11")
        return tuple(names)


# Covariate matrices below have 11 columns: X1..X11 at indices 0..10.

def mean_placebo(X):
    return X[:, 2] + X[:, 5] + X[:, 7] + X[:, 9] + X[:, 2] * X[:, 5] + X[:, 6] * X[:, 8]


def mean_low(X):
    return X[:, :10].sum(axis=1) + X[:, 2] * X[:, 5] + X[:, 6] * X[:, 8]


def mean_combination(X):
    coef = np.array([-1, -0.5, 1, -1, -0.5, 1, -0.5, 1, -0.5, 1])
    return X[:, :10] @ coef + X[:, 2] * X[:, 5] + X[:, 6] * X[:, 8]


def switch_probability(X):
    return expit(X[:, [2, 5, 6, 7, 8, 9]].sum(axis=1))


def draw_covariates(rng: np.random.Generator, n: int, phi: float, mu: float,
                    correlation: Optional[float] = None) -> np.ndarray:
    X = np.full((n, 11), np.nan)
    X[:, 0:3] = rng.standard_normal((n, 3))
    X[:, 3:6] = rng.random((n, 3)) < 0.5
    X[:, 6:8] = mu + rng.standard_normal((n, 2))
    X[:, 8:10] = rng.random((n, 2)) < phi
    if correlation is not None:
        e = rng.standard_normal(n)
        X[:, 10] = mu + correlation * (X[:, 6] - mu) + math.sqrt(1 - correlation**2) * e
    return X


def generate_trial_data(setting: DGPSetting, seed) -> TrialDataset:
    """One simulated dataset. ``seed`` is an int, SeedSequence or Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = setting.n_per_arm
    rho = setting.violation.correlation

    X1 = draw_covariates(rng, 2 * n, FLEX_PHI, FLEX_MU, rho)
    s = (rng.random(2 * n) < switch_probability(X1)).astype(float)
    e1 = rng.standard_normal((3, 2 * n))
    yp, yl, yc = mean_placebo(X1) + e1[0], mean_low(X1) + e1[1], mean_combination(X1) + e1[2]
    flex = np.arange(2 * n) >= n
    y1 = np.where(flex, s * yc + (1 - s) * yl, yp)

    X0 = draw_covariates(rng, 3 * n, setting.phi, setting.mu, rho)
    e0 = rng.standard_normal((3, 3 * n))
    arm0 = np.repeat(np.array(["p", "h", "l"]), n)
    ml = mean_low(X0)
    y0 = np.select(
        [arm0 == "p", arm0 == "h"],
        [mean_placebo(X0) + e0[0], ml + e0[2]],
        ml + e0[1],
    )

    keep = [int(name[1:]) - 1 for name in setting.covariate_names]
    width = len(str(5 * n))
    return TrialDataset(
        ids=np.array([f"s{i:0{width}d}" for i in range(1, 5 * n + 1)], dtype=object),
        trial=np.r_[np.ones(2 * n), np.zeros(3 * n)],
        arm=np.r_[np.repeat(np.array(["p", "f"]), n), arm0],
        switched=np.r_[np.where(flex, s, np.nan), np.full(3 * n, np.nan)],
        outcome=np.r_[y1, y0],
        covariates=np.vstack([X1, X0])[:, keep],
        covariate_names=setting.covariate_names,
        validate=False,
    )


def true_switcher_effect(
    setting: Optional[DGPSetting] = None,
    oracle_draws: int = ORACLE_DRAWS,
    seed: int = ORACLE_SEED,
    contrast: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    chunk: int = 10**6,
) -> float:
    """Brute-force Monte Carlo value of E[m_c(X) - m_l(X) | T=1, R=f, S=1].

    Only the flexible-trial covariate law enters, so ``setting`` affects
    nothing but is accepted for symmetry with the data generator.
    """
    contrast = contrast or (lambda X: mean_combination(X) - mean_low(X))
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    left = oracle_draws
    while left > 0:
        k = min(chunk, left)
        X = draw_covariates(rng, k, FLEX_PHI, FLEX_MU)
        s = rng.random(k) < switch_probability(X)
        total += float(contrast(X[s]).sum())
        count += int(s.sum())
        left -= k
    return total / count


@lru_cache(maxsize=None)
def default_truth() -> float:
    return true_switcher_effect()


def scenario_models(misspec: str, correlation: Optional[float] = None) -> tuple[str, str, str]:
    """(h, m, selection) spec strings for a named misspecification scenario."""
    if misspec == "none":
        return CORRECT_OUTCOME, CORRECT_OUTCOME, CORRECT_SELECTION
    if misspec == "outcome":
        return MISSPECIFIED_OUTCOME, MISSPECIFIED_OUTCOME, CORRECT_SELECTION
    if misspec == "selection":
        return CORRECT_OUTCOME, CORRECT_OUTCOME, MISSPECIFIED_SELECTION
    if misspec == "both":
        return MISSPECIFIED_OUTCOME, MISSPECIFIED_OUTCOME, MISSPECIFIED_SELECTION
    if misspec == "omit_x7":
        return OMIT_X7_OUTCOME, OMIT_X7_OUTCOME, OMIT_X7_SELECTION
    if misspec == "proxy_x11":
        return PROXY_X11_OUTCOME, PROXY_X11_OUTCOME, PROXY_X11_SELECTION
    raise ValueError(f"unknown misspecification {misspec!r}; expected one of {MISSPECIFICATIONS}")


@dataclass(frozen=True)
class ScenarioSpec:
    setting: DGPSetting
    h_spec: ModelSpec
    m_spec: ModelSpec
    sel_spec: ModelSpec
    kinds: tuple[str, ...] = KINDS
    replicates: int = 5000
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown estimator kind {k!r}")

    @classmethod
    def build(cls, setting: DGPSetting, misspec: str = "none", *, replicates: int = 5000,
              seed: int = 0, kinds: Sequence[str] = KINDS) -> "ScenarioSpec":
        if misspec in ("omit_x7", "proxy_x11") and setting.violation.kind != misspec:
            raise ValueError(f"misspecification {misspec!r} needs the matching exchangeability violation")
        h, m, sel = scenario_models(misspec)
        return cls(
            setting,
            ModelSpec.parse(h, "identity"),
            ModelSpec.parse(m, "identity"),
            ModelSpec.parse(sel, "logit"),
            tuple(kinds),
            replicates,
            seed,
            misspec,
        )


def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(index,))))


def replicate_dataset(spec: ScenarioSpec, index: int) -> TrialDataset:
    return generate_trial_data(spec.setting, replicate_rng(spec.seed, index))


_FAILURES = (EstimationError, DataError, SpecError, np.linalg.LinAlgError)


def run_replicate(spec: ScenarioSpec, index: int) -> dict:
    data = replicate_dataset(spec, index)
    try:
        reports = estimate_kinds(data, spec.h_spec, spec.m_spec, spec.sel_spec, spec.kinds, weight_cap=None)
    except _FAILURES as exc:
        return {"index": index, "failed": f"{type(exc).__name__}: {exc}"}
    any_report = next(iter(reports.values()))
    rec = {
        "index": index,
        "failed": None,
        "theta": {k: r.theta for k, r in reports.items()},
        "weight_p5": any_report.weight_p5,
        "weight_p95": any_report.weight_p95,
        "reduction_gap": max(r.reduction_gap for r in reports.values()),
    }
    dr = reports.get("dr_nonparametric")
    if dr is not None:
        rec.update(se=dr.se, ci=(dr.ci_low, dr.ci_high), influence_mean=dr.influence_mean)
    return rec


def _run_chunk(args):
    spec, indices = args
    return [run_replicate(spec, i) for i in indices]


@dataclass(frozen=True)
class KindSummary:
    bias: float
    se: float
    mse: float
    mean_se: Optional[float] = None
    coverage: Optional[float] = None


@dataclass(frozen=True, eq=False)
class SimulationResult:
    label: str
    phi: float
    mu: float
    n_per_arm: int
    violation: str
    truth: float
    replicates: int
    replicates_failed: int
    summaries: dict[str, KindSummary]
    weight_p5_median: float
    weight_p95_median: float
    max_reduction_gap: float
    max_abs_influence_mean: Optional[float]
    seed: int
    estimates: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    failures: tuple[str, ...] = field(repr=False, default=())

    def to_row(self) -> dict:
        row = {
            "misspecification": self.label,
            "phi": self.phi,
            "mu": self.mu,
            "n_per_arm": self.n_per_arm,
            "violation": self.violation,
            "seed": self.seed,
            "replicates": self.replicates,
            "replicates_failed": self.replicates_failed,
            "truth": self.truth,
            "weight_p5": self.weight_p5_median,
            "weight_p95": self.weight_p95_median,
        }
        for kind, s in self.summaries.items():
            row[f"{kind}_bias"] = s.bias
            row[f"{kind}_se"] = s.se
            row[f"{kind}_mse"] = s.mse
            if s.mean_se is not None:
                row[f"{kind}_mean_se"] = s.mean_se
                row[f"{kind}_coverage"] = s.coverage
        return row

    def to_dict(self) -> dict:
        d = self.to_row()
        d["summaries"] = {k: asdict(v) for k, v in self.summaries.items()}
        d["max_reduction_gap"] = self.max_reduction_gap
        d["max_abs_influence_mean"] = self.max_abs_influence_mean
        return d


def _violation_label(v: Violation) -> str:
    return v.kind if v.kind != "proxy_x11" else f"proxy_x11:{v.correlation:g}"


def aggregate(spec: ScenarioSpec, records: list[dict], truth: float) -> SimulationResult:
    ok = [r for r in records if r["failed"] is None]
    failures = tuple(r["failed"] for r in records if r["failed"] is not None)
    if not ok:
        raise EstimationError(f"all {len(records)} replicates failed; first error: {failures[0]}")
    summaries, estimates = {}, {}
    for kind in spec.kinds:
        est = np.array([r["theta"][kind] for r in ok])
        estimates[kind] = est
        err = est - truth
        bias = float(err.mean())
        summaries[kind] = KindSummary(bias=bias, se=float(est.std()), mse=float(np.mean(err**2)))
    infl_mean = None
    if "dr_nonparametric" in spec.kinds:
        se = np.array([r["se"] for r in ok])
        lo = np.array([r["ci"][0] for r in ok])
        hi = np.array([r["ci"][1] for r in ok])
        s = summaries["dr_nonparametric"]
        summaries["dr_nonparametric"] = KindSummary(
            s.bias, s.se, s.mse, mean_se=float(se.mean()),
            coverage=float(np.mean((lo <= truth) & (truth <= hi))),
        )
        infl_mean = float(max(abs(r["influence_mean"]) for r in ok))
    return SimulationResult(
        label=spec.label,
        phi=spec.setting.phi,
        mu=spec.setting.mu,
        n_per_arm=spec.setting.n_per_arm,
        violation=_violation_label(spec.setting.violation),
        truth=truth,
        replicates=len(records),
        replicates_failed=len(failures),
        summaries=summaries,
        weight_p5_median=float(np.median([r["weight_p5"] for r in ok])),
        weight_p95_median=float(np.median([r["weight_p95"] for r in ok])),
        max_reduction_gap=float(max(r["reduction_gap"] for r in ok)),
        max_abs_influence_mean=infl_mean,
        seed=spec.seed,
        estimates=estimates,
        failures=failures,
    )


def run_monte_carlo(spec: ScenarioSpec, *, workers: int = 1, truth: Optional[float] = None) -> SimulationResult:
    """Run all replicates of a scenario and summarise bias, SE and MSE.

    Bias is measured against ``truth`` (default: the brute-force oracle).
    Failed replicates are excluded from the summaries and counted.
    """
    truth = default_truth() if truth is None else truth
    indices = range(spec.replicates)
    if workers <= 1:
        records = [run_replicate(spec, i) for i in indices]
    else:
        size = math.ceil(spec.replicates / (4 * workers))
        chunks = [(spec, indices[i:i + size]) for i in range(0, spec.replicates, size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = [r for part in pool.map(_run_chunk, chunks) for r in part]
    return aggregate(spec, records, truth)


def results_table(results: Sequence[SimulationResult]) -> tuple[list[str], list[list[str]]]:
    rows = [r.to_row() for r in results]
    header: list[str] = []
    for row in rows:
        header += [k for k in row if k not in header]

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    return header, [[fmt(row.get(k)) for k in header] for row in rows]


def results_json(results: Sequence[SimulationResult]) -> str:
    return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=False)
