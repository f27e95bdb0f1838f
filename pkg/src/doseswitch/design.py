"""Symbolic regression designs and their numeric design matrices.

Model specs are written as strings such as ``"1 + X1 + X3:X6 + log_abs(X7)"``:
terms separated by ``+``, ``1`` for the intercept, ``a:b`` for an elementwise
product and ``log_abs(name)`` for ``log|x|``. Covariates enter as raw values;
nothing is centred, scaled or factor-expanded.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np

from .tabular import TrialDataset

Link = Literal["identity", "logit"]
LINKS = ("identity", "logit")
TRANSFORMS = ("log_abs",)
MAX_DEPTH = 3


class SpecError(ValueError):
    """Malformed model spec, or a spec that does not fit the data."""


@dataclass(frozen=True)
class Intercept:
    def label(self) -> str:
        return "1"


@dataclass(frozen=True)
class Main:
    name: str

    def label(self) -> str:
        return self.name


@dataclass(frozen=True)
class Transform:
    name: str
    fn: str = "log_abs"

    def __post_init__(self):
        if self.fn not in TRANSFORMS:
            raise SpecError(f"unknown transform {self.fn!r}")

    def label(self) -> str:
        return f"{self.fn}({self.name})"


@dataclass(frozen=True)
class Interaction:
    left: "Term"
    right: "Term"

    def __post_init__(self):
        if isinstance(self.left, Intercept) or isinstance(self.right, Intercept):
            raise SpecError("interaction operands cannot be the intercept")
        if depth(self) > MAX_DEPTH:
            raise SpecError(f"interaction nesting deeper than {MAX_DEPTH}: {self.label()}")

    def label(self) -> str:
        return f"{self.left.label()}:{self.right.label()}"


Term = Union[Intercept, Main, Transform, Interaction]


def depth(term: Term) -> int:
    if isinstance(term, Interaction):
        return 1 + max(depth(term.left), depth(term.right))
    return 1


def covariates_of(term: Term) -> set[str]:
    if isinstance(term, Interaction):
        return covariates_of(term.left) | covariates_of(term.right)
    if isinstance(term, Intercept):
        return set()
    return {term.name}


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[Term, ...]
    link: Link = "identity"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.link not in LINKS:
            raise SpecError(f"unknown link {self.link!r}")
        if sum(isinstance(t, Intercept) for t in self.terms) > 1:
            raise SpecError("at most one intercept term is allowed")
        if not self.terms:
            raise SpecError("model spec has no terms")
        labels = [t.label() for t in self.terms]
        if len(set(labels)) != len(labels):
            raise SpecError(f"duplicate terms in spec: {' + '.join(labels)}")

    @classmethod
    def parse(cls, text: str, link: Link = "identity") -> "ModelSpec":
        return cls(tuple(parse_terms(text)), link)

    @property
    def has_intercept(self) -> bool:
        return any(isinstance(t, Intercept) for t in self.terms)

    @property
    def covariates(self) -> set[str]:
        out: set[str] = set()
        for t in self.terms:
            out |= covariates_of(t)
        return out

    @property
    def labels(self) -> list[str]:
        return [t.label() for t in self.terms]

    def __str__(self) -> str:
        return " + ".join(self.labels)


_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"
_ATOM = re.compile(rf"^(?:(?P<fn>{_NAME})\((?P<arg>{_NAME})\)|(?P<name>{_NAME}))$")


def _parse_atom(tok: str) -> Term:
    m = _ATOM.match(tok)
    if not m:
        raise SpecError(f"cannot parse term {tok!r}")
    if m.group("fn"):
        if m.group("fn") not in TRANSFORMS:
            raise SpecError(f"unknown transform {m.group('fn')!r}")
        return Transform(m.group("arg"), m.group("fn"))
    return Main(m.group("name"))


def parse_terms(text: str) -> list[Term]:
    if not text or not text.strip():
        raise SpecError("empty model spec")
    terms: list[Term] = []
    for raw in text.split("+"):
        tok = raw.replace(" ", "").replace("\t", "")
        if not tok:
            raise SpecError(f"empty term in spec {text!r}")
        if tok == "1":
            terms.append(Intercept())
            continue
        parts = tok.split(":")
        if "1" in parts:
            raise SpecError(f"interaction with the intercept in {tok!r}")
        term = _parse_atom(parts[0])
        for p in parts[1:]:
            term = Interaction(term, _parse_atom(p))
        terms.append(term)
    return terms


def _evaluate(term: Term, names: Sequence[str], Z: np.ndarray) -> np.ndarray:
    if isinstance(term, Intercept):
        return np.ones(Z.shape[0])
    if isinstance(term, Interaction):
        return _evaluate(term.left, names, Z) * _evaluate(term.right, names, Z)
    try:
        col = Z[:, names.index(term.name)]
    except ValueError:
        raise SpecError(f"unknown covariate {term.name!r} in term {term.label()!r}") from None
    if isinstance(term, Transform):
        zero = col == 0.0
        if zero.any():
            raise SpecError(
                f"row {int(np.flatnonzero(zero)[0]) + 1}: {term.label()} of exact zero"
            )
        return np.log(np.abs(col))
    return col


def design_from_columns(spec: ModelSpec, names: Sequence[str], Z: np.ndarray) -> np.ndarray:
    """Design matrix from a raw covariate matrix ``Z`` with column ``names``."""
    names = list(names)
    Z = np.asarray(Z, dtype=float)
    X = np.empty((Z.shape[0], len(spec.terms)))
    for j, term in enumerate(spec.terms):
        X[:, j] = _evaluate(term, names, Z)
    return X


def build_design_matrix(spec: ModelSpec, data: TrialDataset) -> np.ndarray:
    return design_from_columns(spec, data.covariate_names, data.covariates)


# Regressor vectors of the simulation study.
CORRECT_OUTCOME = "1 + X1 + X2 + X3 + X4 + X5 + X6 + X7 + X8 + X9 + X10 + X3:X6 + X7:X9"
MISSPECIFIED_OUTCOME = (
    "1 + log_abs(X1) + log_abs(X2) + log_abs(X3) + X4 + X5 + X6"
    " + log_abs(X7) + log_abs(X8) + X9 + X10"
)
CORRECT_SELECTION = "1 + X7 + X8 + X9 + X10"
MISSPECIFIED_SELECTION = "1 + log_abs(X7) + log_abs(X8) + X9 + X10"
OMIT_X7_OUTCOME = "1 + X1 + X2 + X3 + X4 + X5 + X6 + X8 + X9 + X10 + X3:X6"
OMIT_X7_SELECTION = "1 + X8 + X9 + X10"
PROXY_X11_OUTCOME = (
    "1 + X1 + X2 + X3 + X4 + X5 + X6 + X8 + X9 + X10 + X11 + X3:X6 + X11:X9"
)
PROXY_X11_SELECTION = "1 + X11 + X8 + X9 + X10"
