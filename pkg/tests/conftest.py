import numpy as np
import pytest

from doseswitch.simulation import DGPSetting, generate_trial_data
from doseswitch.tabular import TrialDataset


def make_dataset(trial, arm, outcome, covariates=None, switched=None, names=None):
    """Small hand-built dataset; S defaults to alternating 1/0 on the flexible arm."""
    trial = np.asarray(trial)
    arm = np.asarray(arm)
    n = len(trial)
    flex = (trial == 1) & (arm == "f")
    if switched is None:
        switched = np.where(flex, (np.cumsum(flex) % 2 == 1).astype(float), np.nan)
    if covariates is None:
        covariates = np.zeros((n, 0))
    covariates = np.asarray(covariates, dtype=float).reshape(n, -1)
    names = names or tuple(f"Z{j + 1}" for j in range(covariates.shape[1]))
    return TrialDataset(
        ids=[f"r{i}" for i in range(n)],
        trial=trial,
        arm=arm,
        switched=switched,
        outcome=outcome,
        covariates=covariates,
        covariate_names=names,
    )


@pytest.fixture(scope="session")
def setting1_data():
    return generate_trial_data(DGPSetting.named(1), 20240601)


@pytest.fixture(scope="session")
def setting3_data():
    return generate_trial_data(DGPSetting.named(3), 11)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
