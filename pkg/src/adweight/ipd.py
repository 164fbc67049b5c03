"""Step 1: fit the outcome model on trials with individual-level data.

Strategy ``"A"`` fits each trial separately by maximum likelihood, giving
one estimate of the shared coefficients per trial.  Strategy ``"B"`` solves
the stacked score system, which is one logistic regression with
trial-specific intercept/treatment columns and common shared columns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    ConvergenceError,
    DomainError,
    SchemaError,
    SeparationError,
    SingularDesignError,
)
from .model import ObservationRow, OutcomeModelSpec, SharedParams, TrialParams, expit

log = logging.getLogger(__name__)

SCORE_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
SEPARATION_NORM = 50.0
SEPARATION_PROB = 1e-10


@dataclass(frozen=True)
class IpdTrial:
    """Individual-level data of one trial.

    ``L`` has one column per covariate, in ``covariate_names`` order.
    ``arm_probability`` is a design value for P(X=1 | S=k); when omitted
    the empirical treated fraction is used.
    """

    study: object
    x: np.ndarray
    y: np.ndarray
    L: np.ndarray
    covariate_names: tuple[str, ...]
    arm_probability: float | None = None

    def __post_init__(self):
        x = np.asarray(self.x)
        y = np.asarray(self.y)
        L = np.asarray(self.L, dtype=float)
        if L.ndim == 1:
            L = L[:, None]
        if not (len(x) == len(y) == L.shape[0]):
            raise SchemaError(f"trial {self.study}: x, y and L have inconsistent lengths")
        if L.shape[1] != len(self.covariate_names):
            raise SchemaError(f"trial {self.study}: {L.shape[1]} covariate columns, {len(self.covariate_names)} names")
        if not np.isin(x, (0, 1)).all():
            raise SchemaError(f"trial {self.study}: arm indicator must be 0/1")
        if not np.isin(y, (0, 1)).all():
            raise SchemaError(f"trial {self.study}: outcome must be 0/1")
        if np.isnan(L).any():
            raise SchemaError(f"trial {self.study}: missing covariate values")
        x = x.astype(np.int8)
        if x.min() == x.max():
            raise SchemaError(f"trial {self.study}: both arms must be present")
        if self.arm_probability is not None and not 0 < self.arm_probability < 1:
            raise DomainError(f"trial {self.study}: arm probability must lie in (0, 1)")
        for name, arr in (("x", x), ("y", y.astype(float)), ("L", L)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n(self) -> int:
        return len(self.x)

    def n_arm(self, x: int) -> int:
        return int((self.x == x).sum())

    @property
    def p_treated(self) -> float:
        if self.arm_probability is not None:
            return float(self.arm_probability)
        return self.n_arm(1) / self.n

    @property
    def arm_probability_is_design(self) -> bool:
        return self.arm_probability is not None

    def arm_prob(self, x: int) -> float:
        return self.p_treated if x == 1 else 1.0 - self.p_treated

    def rows(self) -> Iterator[ObservationRow]:
        for i in range(self.n):
            yield ObservationRow(self.study, int(self.x[i]), float(self.y[i]), self.L[i])

    def subset(self, mask) -> "IpdTrial":
        return IpdTrial(self.study, self.x[mask], self.y[mask], self.L[mask],
                        self.covariate_names, self.arm_probability)

    def column(self, name: str) -> np.ndarray:
        return self.L[:, self.covariate_names.index(name)]


@dataclass
class LogisticResult:
    coef: np.ndarray
    covariance: np.ndarray
    iterations: int
    score_norm: float
    loglik: float


@dataclass
class IpdFit:
    """Step-1 output.

    ``shared`` maps each IPD study to the shared coefficients used with it:
    its own estimate under strategy A, the common estimate under B.
    """

    strategy: str
    spec: OutcomeModelSpec
    studies: list
    trial_params: dict
    shared: dict
    covariance: dict
    iterations: int
    score_norm: float
    n: dict = field(default_factory=dict)

    def shared_for(self, study) -> SharedParams:
        return self.shared[study]

    @property
    def common_shared(self) -> SharedParams | None:
        if self.strategy == "B":
            return self.shared[self.studies[0]]
        return None


def _loglik(D, y, beta):
    eta = D @ beta
    # log(1+exp(eta)) without overflow
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def newton_logistic(D: np.ndarray, y: np.ndarray, *, tol: float = SCORE_TOL,
                    max_iter: int = MAX_ITER, label: str = "logistic") -> LogisticResult:
    """Damped Newton/IRLS for an unpenalised logistic regression.

    Converges when the max-norm of the summed score is at most ``tol``.
    Raises on rank deficiency, separation or the iteration cap.
    """
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = D.shape
    if np.linalg.matrix_rank(D) < p:
        raise SingularDesignError(f"{label}: design matrix is rank deficient ({p} columns)", module="ipd-fit")
    if y.min() == y.max():
        raise SeparationError(f"{label}: outcome is constant (Y identically {int(y[0])})", module="ipd-fit")

    beta = np.zeros(p)
    ll = _loglik(D, y, beta)
    for it in range(1, max_iter + 1):
        mu = expit(D @ beta)
        score = D.T @ (y - mu)
        if np.abs(score).max() <= tol:
            break
        info = (D * (mu * (1.0 - mu))[:, None]).T @ D
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(f"{label}: information matrix is singular", module="ipd-fit") from exc
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = beta + t * step
            ll_new = _loglik(D, y, cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.linalg.norm(beta) > SEPARATION_NORM:
            mu = expit(D @ beta)
            if mu.min() < SEPARATION_PROB or mu.max() > 1 - SEPARATION_PROB:
                raise SeparationError(f"{label}: complete or quasi-complete separation "
                                      f"(|coef| = {np.linalg.norm(beta):.1f})", module="ipd-fit")
    else:
        raise ConvergenceError(f"{label}: no convergence in {max_iter} Newton iterations", module="ipd-fit")

    mu = expit(D @ beta)
    info = (D * (mu * (1.0 - mu))[:, None]).T @ D
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return LogisticResult(beta, cov, it, float(np.abs(D.T @ (y - mu)).max()), ll)


def fit_trial_mle(trial: IpdTrial, spec: OutcomeModelSpec):
    """Maximum-likelihood fit of the outcome model on one trial.

    Returns
    -------
    (TrialParams, SharedParams, covariance)
        The covariance is the inverse observed information, ordered as
        trial-specific coefficients then shared coefficients.
    """
    res = _fit_trial(trial, spec)
    nt = spec.n_trial
    return TrialParams.from_array(res.coef[:nt]), SharedParams(res.coef[nt:]), res.covariance


def _fit_trial(trial: IpdTrial, spec: OutcomeModelSpec) -> LogisticResult:
    res = newton_logistic(spec.design(trial.x, trial.L), trial.y, label=f"trial {trial.study}")
    log.debug("trial %s: converged in %d iterations", trial.study, res.iterations)
    return res


def _stacked_design(trials: Sequence[IpdTrial], spec: OutcomeModelSpec):
    nt = spec.n_trial
    K = len(trials)
    blocks, ys = [], []
    for pos, tr in enumerate(trials):
        td = spec.trial_design(tr.x, tr.L)
        block = np.zeros((tr.n, nt * K))
        block[:, pos * nt:(pos + 1) * nt] = td
        blocks.append(np.hstack([block, spec.shared_design(tr.x, tr.L)]))
        ys.append(tr.y)
    return np.vstack(blocks), np.concatenate(ys)


def fit_stacked(trials: Sequence[IpdTrial], spec: OutcomeModelSpec) -> IpdFit:
    """Strategy B: one root of the stacked score system over all IPD trials."""
    if not trials:
        raise SchemaError("at least one IPD trial is required")
    D, y = _stacked_design(trials, spec)
    res = newton_logistic(D, y, label="stacked fit")
    nt = spec.n_trial
    shared = SharedParams(res.coef[nt * len(trials):])
    tps, covs = {}, {}
    shared_idx = np.arange(nt * len(trials), len(res.coef))
    for pos, tr in enumerate(trials):
        tps[tr.study] = TrialParams.from_array(res.coef[pos * nt:(pos + 1) * nt])
        idx = np.concatenate([np.arange(pos * nt, (pos + 1) * nt), shared_idx])
        covs[tr.study] = res.covariance[np.ix_(idx, idx)]
    return IpdFit("B", spec, [t.study for t in trials], tps, {t.study: shared for t in trials}, covs,
                  res.iterations, res.score_norm, {t.study: t.n for t in trials})


def fit_ipd(trials: Sequence[IpdTrial], spec: OutcomeModelSpec, strategy: str = "A") -> IpdFit:
    """Run Step 1 with the chosen strategy (``"A"`` per-trial, ``"B"`` stacked)."""
    strategy = strategy.upper()
    if strategy == "B":
        return fit_stacked(trials, spec)
    if strategy != "A":
        raise SchemaError(f"unknown strategy {strategy!r}; expected 'A' or 'B'")
    if not trials:
        raise SchemaError("at least one IPD trial is required")
    tps, shared, covs = {}, {}, {}
    iters, norm = 0, 0.0
    nt = spec.n_trial
    for tr in trials:
        res = _fit_trial(tr, spec)
        tps[tr.study] = TrialParams.from_array(res.coef[:nt])
        shared[tr.study] = SharedParams(res.coef[nt:])
        covs[tr.study] = res.covariance
        iters = max(iters, res.iterations)
        norm = max(norm, res.score_norm)
    return IpdFit("A", spec, [t.study for t in trials], tps, shared, covs, iters, norm,
                  {t.study: t.n for t in trials})
