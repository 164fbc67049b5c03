"""Outcome model: term algebra, parameter containers, logistic mean and scores.

The outcome model for trial ``s`` is

    E(Y | X, L, S=s) = expit(phi0_s + phi1_s * X + v(X, L, phi_c))

where ``v`` is a linear combination of *shared terms* whose coefficients
``phi_c`` are common to all trials.  With a subgroup covariate ``L1`` the
trial-specific block grows to ``(phi0, phi1, phi2, phi3)`` multiplying
``(1, X, L1, X*L1)``.

A term is a tuple of factor names.  ``"X"`` denotes the treatment
indicator; any other name must be a declared covariate.  At most two
factors per term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, DomainError, UnknownStudyError

TREATMENT = "X"

Term = tuple[str, ...]


def parse_term(term: str | Sequence[str]) -> Term:
    """Parse ``"X*L2"`` (or ``("X", "L2")``) into a factor tuple."""
    if isinstance(term, str):
        factors = tuple(f.strip() for f in term.replace(":", "*").split("*") if f.strip())
    else:
        factors = tuple(term)
    if len(factors) > 2:
        raise DimensionError(f"term {term!r} has degree {len(factors)}; at most 2 factors allowed")
    return factors


def term_label(term: Term) -> str:
    return "*".join(term) if term else "1"


def evaluate_term(term: Term, x, L: np.ndarray, covariate_names: Sequence[str]) -> np.ndarray:
    """Product of the term's factors, row-wise.  ``L`` is (n, p)."""
    L = np.atleast_2d(L)
    out = np.ones(L.shape[0])
    for factor in term:
        if factor == TREATMENT:
            out = out * np.broadcast_to(np.asarray(x, dtype=float), out.shape)
        else:
            out = out * L[:, covariate_names.index(factor)]
    return out


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Which covariate terms are shared across trials.

    Parameters
    ----------
    covariate_names : sequence of str
        Ordered covariate labels; columns of every ``L`` matrix follow it.
    shared_terms : sequence of term
        Terms of ``v(X, L, phi_c)``, e.g. ``["L1", "L2", "X*L2"]``.
    subgroup_covariate : str, optional
        Binary covariate whose main effect and treatment interaction are
        trial-specific (the heterogeneous-interaction model).
    """

    covariate_names: tuple[str, ...]
    shared_terms: tuple[Term, ...]
    subgroup_covariate: str | None = None

    def __init__(self, covariate_names, shared_terms, subgroup_covariate=None):
        object.__setattr__(self, "covariate_names", tuple(covariate_names))
        object.__setattr__(self, "shared_terms", tuple(parse_term(t) for t in shared_terms))
        object.__setattr__(self, "subgroup_covariate", subgroup_covariate)
        self._validate()

    def _validate(self) -> None:
        names = set(self.covariate_names)
        if TREATMENT in names:
            raise DimensionError(f"covariate name {TREATMENT!r} is reserved for treatment")
        if len(names) != len(self.covariate_names):
            raise DimensionError("duplicate covariate names")
        for term in self.shared_terms:
            if not term:
                raise DimensionError("the constant is trial-specific and cannot be a shared term")
            for factor in term:
                if factor != TREATMENT and factor not in names:
                    raise DimensionError(f"shared term {term_label(term)!r} references unknown covariate {factor!r}")
            if term == (TREATMENT,):
                raise DimensionError("the treatment main effect is trial-specific")
        if self.subgroup_covariate is not None:
            if self.subgroup_covariate not in names:
                raise DimensionError(f"unknown subgroup covariate {self.subgroup_covariate!r}")
            clash = {(self.subgroup_covariate,), (TREATMENT, self.subgroup_covariate),
                     (self.subgroup_covariate, TREATMENT)}
            if clash & set(self.shared_terms):
                raise DimensionError("subgroup terms are trial-specific and cannot also be shared")

    @property
    def n_shared(self) -> int:
        return len(self.shared_terms)

    @property
    def n_trial(self) -> int:
        return 2 if self.subgroup_covariate is None else 4

    @property
    def trial_term_labels(self) -> list[str]:
        base = ["intercept", "treatment"]
        if self.subgroup_covariate is not None:
            base += [self.subgroup_covariate, f"X*{self.subgroup_covariate}"]
        return base

    @property
    def shared_term_labels(self) -> list[str]:
        return [term_label(t) for t in self.shared_terms]

    def shared_design(self, x, L) -> np.ndarray:
        """Regressor matrix ``f(X, L)`` of the shared terms, shape (n, n_shared)."""
        L = self._check_L(L)
        if not self.shared_terms:
            return np.zeros((L.shape[0], 0))
        return np.column_stack([evaluate_term(t, x, L, self.covariate_names) for t in self.shared_terms])

    def trial_design(self, x, L) -> np.ndarray:
        """Regressors of the trial-specific block: (1, X[, L1, X*L1])."""
        L = self._check_L(L)
        n = L.shape[0]
        x = np.broadcast_to(np.asarray(x, dtype=float), (n,))
        cols = [np.ones(n), x]
        if self.subgroup_covariate is not None:
            l1 = L[:, self.covariate_names.index(self.subgroup_covariate)]
            cols += [l1, x * l1]
        return np.column_stack(cols)

    def design(self, x, L) -> np.ndarray:
        """Full per-trial design ``C = (trial block, shared block)``."""
        return np.hstack([self.trial_design(x, L), self.shared_design(x, L)])

    def _check_L(self, L) -> np.ndarray:
        L = np.asarray(L, dtype=float)
        if L.ndim == 1:
            L = L[None, :]
        if L.shape[1] != len(self.covariate_names):
            raise DimensionError(f"covariate vector has {L.shape[1]} entries, spec declares {len(self.covariate_names)}")
        return L


@dataclass(frozen=True)
class TrialParams:
    """Trial-specific coefficients ``(phi0, phi1[, phi2, phi3])``."""

    phi0: float
    phi1: float
    extra: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "extra", tuple(float(v) for v in self.extra))
        if not np.all(np.isfinite(self.as_array())):
            raise DomainError(f"non-finite trial parameters {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.phi0, self.phi1, *self.extra], dtype=float)

    @classmethod
    def from_array(cls, values) -> "TrialParams":
        values = np.asarray(values, dtype=float)
        return cls(float(values[0]), float(values[1]), tuple(values[2:]))


@dataclass(frozen=True)
class SharedParams:
    phi_c: np.ndarray

    def __post_init__(self):
        arr = np.array(self.phi_c, dtype=float).ravel()
        arr.setflags(write=False)
        object.__setattr__(self, "phi_c", arr)
        if not np.all(np.isfinite(arr)):
            raise DomainError("non-finite shared parameters")

    def __len__(self) -> int:
        return len(self.phi_c)


@dataclass(frozen=True)
class RandomEffectSummary:
    """Pooled mean ``Phi`` and between-trial covariance ``Sigma``."""

    Phi: np.ndarray
    Sigma: np.ndarray | None
    phi1_bar: float
    weights: np.ndarray
    sigma_defined: bool = True


@dataclass(frozen=True)
class ObservationRow:
    study: object
    x: int
    y: float
    l: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.x not in (0, 1):
            raise DomainError(f"arm indicator must be 0/1, got {self.x!r}")
        object.__setattr__(self, "l", np.asarray(self.l, dtype=float).ravel())


def expit(eta):
    """Logistic function, evaluated without overflow for either sign.

    Works elementwise on arrays; returns a Python float for scalar input.
    """
    arr = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("expit requires finite input")
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def _check_params(spec: OutcomeModelSpec, tp: TrialParams, sp: SharedParams) -> None:
    if len(tp.as_array()) != spec.n_trial:
        raise DimensionError(f"spec needs {spec.n_trial} trial-specific coefficients, got {len(tp.as_array())}")
    if len(sp) != spec.n_shared:
        raise DimensionError(f"spec has {spec.n_shared} shared terms, got {len(sp)} coefficients")


def linear_predictor(spec: OutcomeModelSpec, tp: TrialParams, sp: SharedParams, x, l) -> np.ndarray:
    _check_params(spec, tp, sp)
    return spec.design(x, l) @ np.concatenate([tp.as_array(), sp.phi_c])


def mean_response(spec: OutcomeModelSpec, tp: TrialParams, sp: SharedParams, x, l):
    """``expit(phi0 + phi1*x + v(x, l, phi_c))``; scalar for a single row."""
    p = expit(linear_predictor(spec, tp, sp, x, l))
    if np.ndim(l) == 1:
        return float(p[0])
    return p


def score_contributions(
    spec: OutcomeModelSpec,
    tp_all: Mapping[object, TrialParams],
    sp: SharedParams,
    obs: ObservationRow,
) -> np.ndarray:
    """Per-observation stacked score ``(g_k for each IPD trial k, g_c)``.

    Trial blocks follow the iteration order of ``tp_all``; the
    observation's own block holds ``(1, X[, L1, X*L1]) * residual``, other
    trials' blocks are structural zeros.
    """
    if obs.study not in tp_all:
        raise UnknownStudyError(f"study {obs.study!r} is not an IPD trial of this fit")
    resid = obs.y - mean_response(spec, tp_all[obs.study], sp, obs.x, obs.l)
    blocks = []
    for study in tp_all:
        if study == obs.study:
            blocks.append(spec.trial_design(obs.x, obs.l)[0] * resid)
        else:
            blocks.append(np.zeros(spec.n_trial))
    blocks.append(spec.shared_design(obs.x, obs.l)[0] * resid)
    return np.concatenate(blocks)
