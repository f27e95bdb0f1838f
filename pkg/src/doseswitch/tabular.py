"""Subject-level data model for the two-trial layout, plus CSV ingestion.

A dataset holds one row per subject with a trial indicator ``T`` (1 for the
flexible dosing trial, 0 for the fixed dosing trial), the randomized arm
``R``, the switch indicator ``S`` (only defined on the flexible arm), the
outcome ``Y`` and a named covariate vector ``Z``.

Storage is columnar (numpy arrays) so that estimators and the Monte Carlo
driver can work on whole columns; :meth:`TrialDataset.subjects` gives the
row-wise view.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib


class DataError(ValueError):
    """Raised when input data violates the dataset contract."""


class ArmCode(str, enum.Enum):
    PLACEBO = "p"
    FIXED_HIGH = "h"
    FIXED_LOW = "l"
    FLEXIBLE = "f"


_ARMS_BY_TRIAL = {1: frozenset("pf"), 0: frozenset("phl")}
_MISSING_TOKENS = ("", "NA")


@dataclass(frozen=True)
class Subject:
    id: str
    trial: int
    arm: ArmCode
    switched: Optional[int]
    outcome: float
    covariates: dict[str, float]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Immutable columnar dataset.

    ``switched`` is float with NaN where S is absent (every row that is not
    on the flexible arm of the flexible trial).
    """

    ids: np.ndarray
    trial: np.ndarray
    arm: np.ndarray
    switched: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1 and n == 0:
            cov = cov.reshape(0, len(self.covariate_names))
        cols = {
            "ids": np.asarray(self.ids, dtype=object),
            "trial": np.asarray(self.trial, dtype=np.int8),
            "arm": np.asarray(self.arm, dtype="<U1"),
            "switched": np.asarray(self.switched, dtype=float),
            "outcome": np.asarray(self.outcome, dtype=float),
            "covariates": cov,
        }
        for name, col in cols.items():
            if len(col) != n:
                raise DataError(f"column {name!r} has length {len(col)}, expected {n}")
            object.__setattr__(self, name, _readonly(col))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if cov.shape[1] != len(self.covariate_names):
            raise DataError(
                f"covariate matrix has {cov.shape[1]} columns but "
                f"{len(self.covariate_names)} names were given"
            )
        if self.validate:
            self._check_rows()

    def _check_rows(self):
        t, a, s = self.trial, self.arm, self.switched

        def first(mask):
            return int(np.flatnonzero(mask)[0]) + 1

        bad = (t != 0) & (t != 1)
        if bad.any():
            raise DataError(f"row {first(bad)}: trial indicator must be 0 or 1")
        ok_arm = np.where(t == 1, np.isin(a, ["p", "f"]), np.isin(a, ["p", "h", "l"]))
        if not ok_arm.all():
            r = first(~ok_arm)
            raise DataError(f"row {r}: arm {a[r - 1]!r} is not allowed in trial T={t[r - 1]}")
        needs_s = (t == 1) & (a == "f")
        bad = needs_s & (s != 0.0) & (s != 1.0)
        if bad.any():
            raise DataError(f"row {first(bad)}: S must be 0 or 1 on the flexible arm")
        bad = ~needs_s & ~np.isnan(s)
        if bad.any():
            raise DataError(f"row {first(bad)}: S must be absent outside the flexible arm")
        if not np.all(np.isfinite(self.outcome)):
            bad = int(np.flatnonzero(~np.isfinite(self.outcome))[0]) + 1
            raise DataError(f"row {bad}: outcome is missing or non-finite")
        if not np.all(np.isfinite(self.covariates)):
            r, c = np.argwhere(~np.isfinite(self.covariates))[0]
            raise DataError(
                f"row {r + 1}: covariate {self.covariate_names[c]!r} is missing or non-finite"
            )
        if len(np.unique(self.ids.astype(str))) != len(self):
            seen = set()
            for i, sid in enumerate(self.ids):
                if sid in seen:
                    raise DataError(f"row {i + 1}: duplicate subject id {sid!r}")
                seen.add(sid)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrialDataset):
            return NotImplemented
        return (
            self.covariate_names == other.covariate_names
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.trial, other.trial)
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.switched, other.switched, equal_nan=True)
            and np.array_equal(self.outcome, other.outcome)
            and np.array_equal(self.covariates, other.covariates)
        )

    __hash__ = None

    @property
    def flexible_arm(self) -> np.ndarray:
        """Boolean mask of T=1, R=f rows."""
        return (self.trial == 1) & (self.arm == "f")

    @property
    def fixed_low_arm(self) -> np.ndarray:
        """Boolean mask of T=0, R=l rows."""
        return (self.trial == 0) & (self.arm == "l")

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return self.covariates[:, j]

    def take(self, rows) -> "TrialDataset":
        """Rows selected by a boolean mask or index array, order preserved."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return TrialDataset(
            ids=self.ids[rows],
            trial=self.trial[rows],
            arm=self.arm[rows],
            switched=self.switched[rows],
            outcome=self.outcome[rows],
            covariates=self.covariates[rows],
            covariate_names=self.covariate_names,
            validate=False,
        )

    def subjects(self) -> Iterator[Subject]:
        for i in range(len(self)):
            s = self.switched[i]
            yield Subject(
                id=str(self.ids[i]),
                trial=int(self.trial[i]),
                arm=ArmCode(self.arm[i]),
                switched=None if math.isnan(s) else int(s),
                outcome=float(self.outcome[i]),
                covariates=dict(zip(self.covariate_names, map(float, self.covariates[i]))),
            )

    def require_estimable(self):
        if not self.flexible_arm.any():
            raise DataError("dataset has no subjects with T=1, R=f")
        if not self.fixed_low_arm.any():
            raise DataError("dataset has no subjects with T=0, R=l")


def from_subjects(subjects: Sequence[Subject], covariate_names: Sequence[str]) -> TrialDataset:
    names = tuple(covariate_names)
    for k, s in enumerate(subjects):
        if tuple(s.covariates) != names:
            raise DataError(f"row {k + 1}: covariate names differ from {names}")
    return TrialDataset(
        ids=[s.id for s in subjects],
        trial=[s.trial for s in subjects],
        arm=[ArmCode(s.arm).value for s in subjects],
        switched=[np.nan if s.switched is None else s.switched for s in subjects],
        outcome=[s.outcome for s in subjects],
        covariates=np.array([[s.covariates[c] for c in names] for s in subjects], dtype=float).reshape(
            len(subjects), len(names)
        ),
        covariate_names=names,
    )


def subset(data: TrialDataset, predicate: Callable[[int, str, Optional[int]], bool]) -> TrialDataset:
    """Keep subjects for which ``predicate(T, R, S)`` is true.

    ``S`` is passed as ``None`` where it is absent. An empty result is legal.
    """
    keep = [
        bool(predicate(int(t), str(a), None if math.isnan(s) else int(s)))
        for t, a, s in zip(data.trial, data.arm, data.switched)
    ]
    return data.take(np.array(keep, dtype=bool))


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`."""

    covariate_cols: tuple[str, ...]
    id_col: str = "id"
    trial_col: str = "T"
    arm_col: str = "R"
    switch_col: str = "S"
    outcome_col: str = "Y"

    @classmethod
    def from_mapping(cls, cfg: dict) -> "CsvSchema":
        keys = {"id_col", "trial_col", "arm_col", "switch_col", "outcome_col", "covariate_cols"}
        unknown = set(cfg) - keys
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        if "covariate_cols" not in cfg:
            raise DataError("schema must list covariate_cols")
        kw = dict(cfg)
        kw["covariate_cols"] = tuple(kw["covariate_cols"])
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "CsvSchema":
        return cls.from_mapping(read_config(path))


def read_config(path) -> dict:
    """Read a TOML or JSON config file, chosen by extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".toml":
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    if suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    raise DataError(f"config file must end in .toml or .json: {path}")


def _parse_float(token: str, row: int, col: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} has unparseable number {token!r}") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}: column {col!r} is missing or non-finite ({token!r})")
    return value


def load_csv(path, schema: CsvSchema) -> TrialDataset:
    """Load and validate a dataset. Row numbers in errors count data rows from 1."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file (header row required)")
        required = [schema.id_col, schema.trial_col, schema.arm_col, schema.switch_col,
                    schema.outcome_col, *schema.covariate_cols]
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")

        ids, trial, arm, switched, outcome, cov = [], [], [], [], [], []
        for row_no, rec in enumerate(reader, start=1):
            t_tok = rec[schema.trial_col].strip()
            if t_tok not in ("0", "1"):
                raise DataError(f"row {row_no}: trial indicator must be 0 or 1, got {t_tok!r}")
            t = int(t_tok)
            a = rec[schema.arm_col].strip()
            if a not in "phlf" or len(a) != 1:
                raise DataError(f"row {row_no}: unknown arm code {a!r}")
            if a not in _ARMS_BY_TRIAL[t]:
                raise DataError(f"row {row_no}: arm {a!r} is not allowed in trial T={t}")
            s_tok = rec[schema.switch_col].strip()
            if s_tok in _MISSING_TOKENS:
                s = np.nan
            elif s_tok in ("0", "1"):
                s = float(s_tok)
            else:
                raise DataError(f"row {row_no}: switch indicator must be 0, 1, empty or NA, got {s_tok!r}")
            ids.append(rec[schema.id_col])
            trial.append(t)
            arm.append(a)
            switched.append(s)
            outcome.append(_parse_float(rec[schema.outcome_col].strip(), row_no, schema.outcome_col))
            cov.append([_parse_float(rec[c].strip(), row_no, c) for c in schema.covariate_cols])

    return TrialDataset(
        ids=ids,
        trial=trial,
        arm=arm,
        switched=switched,
        outcome=outcome,
        covariates=np.array(cov, dtype=float).reshape(len(ids), len(schema.covariate_cols)),
        covariate_names=schema.covariate_cols,
    )


def write_csv(data: TrialDataset, path, schema: Optional[CsvSchema] = None) -> CsvSchema:
    """Write ``data`` so that :func:`load_csv` reproduces it exactly.

    Floats are written with ``repr`` (shortest round-tripping form). Returns
    the schema that reads the file back.
    """
    schema = schema or CsvSchema(covariate_cols=data.covariate_names)
    if tuple(schema.covariate_cols) != data.covariate_names:
        raise DataError("schema covariate_cols must match the dataset's covariate names")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.id_col, schema.trial_col, schema.arm_col, schema.switch_col,
                    schema.outcome_col, *schema.covariate_cols])
        for i in range(len(data)):
            s = data.switched[i]
            w.writerow([
                data.ids[i],
                int(data.trial[i]),
                data.arm[i],
                "NA" if math.isnan(s) else int(s),
                repr(float(data.outcome[i])),
                *(repr(float(v)) for v in data.covariates[i]),
            ])
    return schema
