"""Doubly robust estimation of the effect of dose switching among switchers.

Transports the fixed-low arm of a fixed dosing trial to the flexible dosing
trial and estimates E[Y^c - Y^l | T=1, R=f, S=1].
"""

__version__ = "0.1.0"

from .design import ModelSpec, build_design_matrix
from .estimators import (
    EstimateReport,
    estimate_effect_efficient,
    estimate_kinds,
    estimate_pi_S,
    estimate_switcher_effect,
    estimate_theta1,
    estimate_theta2_dr,
    estimate_theta2_regression,
    fit_nuisances,
)
from .glm import fit_weighted_glm, predict
from .inference import influence_values, wald_inference
from .simulation import (
    DGPSetting,
    ScenarioSpec,
    Violation,
    generate_trial_data,
    run_monte_carlo,
    true_switcher_effect,
)
from .tabular import CsvSchema, TrialDataset, load_csv, subset, write_csv

__all__ = [
    "CsvSchema",
    "DGPSetting",
    "EstimateReport",
    "ModelSpec",
    "ScenarioSpec",
    "TrialDataset",
    "Violation",
    "build_design_matrix",
    "estimate_effect_efficient",
    "estimate_kinds",
    "estimate_pi_S",
    "estimate_switcher_effect",
    "estimate_theta1",
    "estimate_theta2_dr",
    "estimate_theta2_regression",
    "fit_nuisances",
    "fit_weighted_glm",
    "generate_trial_data",
    "influence_values",
    "load_csv",
    "predict",
    "run_monte_carlo",
    "subset",
    "true_switcher_effect",
    "wald_inference",
    "write_csv",
]
