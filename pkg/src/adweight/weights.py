"""Step 2: trial-membership weight models fitted from moments.

For an aggregate-data trial ``j`` and an IPD trial ``k`` the density ratio
P(S=j|L) / P(S=k|L) is modelled as ``exp(beta' r(L))`` and ``beta`` solves

    sum_{i in k} p(L_i) exp(beta' r(L_i)) = n_j * E_hat{p(L) | S=j}

where the right-hand side comes from trial ``j``'s published summaries.
With as many moment functions ``p`` as parameters the system is solved
exactly by Newton; with more it is solved by least squares on
standardised discrepancies.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    ConvergenceError,
    DomainError,
    MomentError,
    OverlapError,
    OverlapWarning,
    SchemaError,
)
from .ipd import IpdTrial
from .model import Term, evaluate_term, parse_term, term_label

BETA_NORM_LIMIT = 50.0
MAX_ITER = 200
OVERID_WARN = 4.0


@dataclass(frozen=True)
class AdArm:
    """Published summaries of one arm of an aggregate-data trial.

    ``variances`` are sample variances (divisor n-1).  ``moments`` holds
    extra covariate moments keyed by term label (e.g. ``"L1*L2"``), and
    ``subgroup_y_mean`` maps a level of the subgroup covariate to the
    arm's outcome mean within that level.
    """

    n: int
    means: Mapping[str, float]
    variances: Mapping[str, float] | None
    y_mean: float
    moments: Mapping[str, float] = field(default_factory=dict)
    subgroup_y_mean: Mapping[int, float] | None = None


@dataclass(frozen=True)
class AdSummary:
    """Per-arm aggregate data of one trial without accessible IPD."""

    study: object
    covariate_names: tuple[str, ...]
    arms: Mapping[int, AdArm]
    arm_probability: float | None = None
    subgroup_covariate: str | None = None
    subgroup_fraction: Mapping[int, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if set(self.arms) != {0, 1}:
            raise SchemaError(f"AD trial {self.study}: arms 0 and 1 are both required")
        for x, arm in self.arms.items():
            where = f"AD trial {self.study}, arm {x}"
            if arm.n < 1:
                raise SchemaError(f"{where}: count must be >= 1")
            if not 0.0 <= arm.y_mean <= 1.0:
                raise SchemaError(f"{where}: outcome mean {arm.y_mean} outside [0, 1]")
            missing = set(self.covariate_names) - set(arm.means)
            if missing:
                raise SchemaError(f"{where}: missing covariate means {sorted(missing)}")
            if arm.variances is not None:
                missing = set(self.covariate_names) - set(arm.variances)
                if missing:
                    raise SchemaError(f"{where}: missing covariate variances {sorted(missing)}")
                neg = [c for c, v in arm.variances.items() if v < 0]
                if neg:
                    raise SchemaError(f"{where}: negative variance for {neg}")
            if arm.subgroup_y_mean is not None:
                bad = [v for v in arm.subgroup_y_mean.values() if not 0.0 <= v <= 1.0]
                if bad:
                    raise SchemaError(f"{where}: subgroup outcome mean outside [0, 1]")
        if self.arm_probability is not None and not 0 < self.arm_probability < 1:
            raise DomainError(f"AD trial {self.study}: arm probability must lie in (0, 1)")
        if self.subgroup_fraction is not None:
            if abs(sum(self.subgroup_fraction.values()) - 1.0) > 1e-8:
                raise SchemaError(f"AD trial {self.study}: subgroup fractions must sum to 1")

    @property
    def n(self) -> int:
        return self.arms[0].n + self.arms[1].n

    def n_arm(self, x: int) -> int:
        return self.arms[x].n

    @property
    def p_treated(self) -> float:
        if self.arm_probability is not None:
            return float(self.arm_probability)
        return self.arms[1].n / self.n

    @property
    def arm_probability_is_design(self) -> bool:
        return self.arm_probability is not None

    def arm_prob(self, x: int) -> float:
        return self.p_treated if x == 1 else 1.0 - self.p_treated

    @property
    def has_variances(self) -> bool:
        return all(a.variances is not None for a in self.arms.values())

    def arm_term_mean(self, term: Term, x: int) -> float:
        """E_hat{term(L) | X=x, S=j} from the arm's published statistics.

        Squares use the sample variance rescaled to divisor n, so that the
        value equals the arm's raw second moment when the summaries were
        computed from data.
        """
        arm = self.arms[x]
        if not term:
            return 1.0
        if "X" in term:
            raise MomentError("moment functions may not involve treatment")
        if len(term) == 1:
            return float(arm.means[term[0]])
        a, b = term
        if a == b and arm.variances is not None:
            scale = (arm.n - 1) / arm.n if arm.n > 1 else 0.0
            return float(arm.variances[a] * scale + arm.means[a] ** 2)
        for key in (term_label(term), term_label((b, a))):
            if key in arm.moments:
                return float(arm.moments[key])
        raise MomentError(f"AD trial {self.study}, arm {x}: no statistic for moment {term_label(term)!r}",
                          module="weight-fit")

    def term_mean(self, term: Term) -> float:
        """Combined-trial moment: arm-probability mixture of the arm moments."""
        return sum(self.arm_prob(x) * self.arm_term_mean(term, x) for x in (0, 1))

    @classmethod
    def from_trial(cls, trial: IpdTrial, *, subgroup_covariate: str | None = None,
                   extra_moments: Sequence[Term | str] = ()) -> "AdSummary":
        """Summaries a trial would publish, computed from its rows."""
        arms = {}
        extra = [parse_term(t) for t in extra_moments]
        for x in (0, 1):
            sel = trial.x == x
            L = trial.L[sel]
            means = {c: float(L[:, i].mean()) for i, c in enumerate(trial.covariate_names)}
            ddof = 1 if sel.sum() > 1 else 0
            variances = {c: float(L[:, i].var(ddof=ddof)) for i, c in enumerate(trial.covariate_names)}
            moments = {term_label(t): float(evaluate_term(t, x, L, trial.covariate_names).mean()) for t in extra}
            sub = None
            if subgroup_covariate is not None:
                l1 = L[:, trial.covariate_names.index(subgroup_covariate)]
                sub = {}
                for level in (0, 1):
                    cell = l1 == level
                    sub[level] = float(trial.y[sel][cell].mean()) if cell.any() else float("nan")
            arms[x] = AdArm(int(sel.sum()), means, variances, float(trial.y[sel].mean()), moments, sub)
        frac = None
        if subgroup_covariate is not None:
            l1 = trial.column(subgroup_covariate)
            frac = {0: float((l1 == 0).mean()), 1: float((l1 == 1).mean())}
        return cls(trial.study, trial.covariate_names, arms, trial.arm_probability, subgroup_covariate, frac)


@dataclass(frozen=True)
class MomentSpec:
    """Weight-model regressors ``r(L)`` and moment functions ``p(L)``.

    Terms are factor tuples; ``()`` is the constant.  Defaults to
    ``r = p = (1, L)``.
    """

    model_terms: tuple[Term, ...]
    moment_terms: tuple[Term, ...]

    def __init__(self, model_terms, moment_terms=None):
        mt = tuple(parse_term(t) if t not in ("1", "") else () for t in model_terms)
        pt = mt if moment_terms is None else tuple(
            parse_term(t) if t not in ("1", "") else () for t in moment_terms)
        if len(pt) < len(mt):
            raise MomentError(f"{len(pt)} moment functions cannot identify {len(mt)} weight parameters")
        object.__setattr__(self, "model_terms", mt)
        object.__setattr__(self, "moment_terms", pt)

    @classmethod
    def linear(cls, covariate_names: Sequence[str]) -> "MomentSpec":
        return cls([()] + [(c,) for c in covariate_names])

    @property
    def just_identified(self) -> bool:
        return len(self.moment_terms) == len(self.model_terms)

    def model_matrix(self, L, covariate_names) -> np.ndarray:
        return np.column_stack([evaluate_term(t, 0, L, covariate_names) for t in self.model_terms])

    def moment_matrix(self, L, covariate_names) -> np.ndarray:
        return np.column_stack([evaluate_term(t, 0, L, covariate_names) for t in self.moment_terms])


@dataclass
class WeightFit:
    """Fitted membership-odds model for one (AD trial j, IPD trial k) pair.

    ``targets`` are the AD moments on the mean scale, E_hat{p(L)|S=j};
    ``weights`` are ``m(L_i, beta)`` for the rows of trial ``k``.
    ``gmm_transform`` maps the moment vector to the estimating function of
    ``beta`` (identity when just identified).
    """

    j: object
    k: object
    beta: np.ndarray
    moment_spec: MomentSpec
    weights: np.ndarray
    targets: np.ndarray
    n_j: int
    moments_k: np.ndarray = field(repr=False)
    converged: bool
    iterations: int
    residual_norm: float
    gmm_transform: np.ndarray = field(repr=False)
    truncated: bool = False

    @property
    def balance_error(self) -> float:
        """Max abs gap between weighted IPD moments and AD targets (mean scale)."""
        return float(np.abs(self.moments_k.T @ self.weights / self.n_j - self.targets).max())


@dataclass
class Diagnostics:
    ess: float
    ess_ratio: float
    max_min_ratio: float
    balance: list[dict]


def _exp_weights(R, beta):
    eta = R @ beta
    if eta.max() > 700:
        raise OverlapError("weights overflow; trials do not overlap in case-mix", module="weight-fit")
    return np.exp(eta)


def fit_weight_model(ipd_k: IpdTrial, ad_j, p_spec: MomentSpec | None = None, *,
                     truncate_quantile: float | None = None, tol: float = 1e-12,
                     max_iter: int = MAX_ITER) -> WeightFit:
    """Fit ``m(L, beta_jk)`` by matching trial ``j``'s published moments.

    ``ad_j`` is an :class:`AdSummary`.  The solution satisfies the moment
    equations to ``tol`` relative to ``n_j`` when just identified.
    """
    if tuple(ad_j.covariate_names) != tuple(ipd_k.covariate_names):
        raise SchemaError(f"covariates of AD trial {ad_j.study} and IPD trial {ipd_k.study} differ")
    spec = p_spec or MomentSpec.linear(ipd_k.covariate_names)
    targets = np.array([ad_j.term_mean(t) for t in spec.moment_terms])
    return _fit_moments(ipd_k.L, ipd_k.covariate_names, spec, targets, ad_j.n, j=ad_j.study, k=ipd_k.study,
                        truncate_quantile=truncate_quantile, tol=tol, max_iter=max_iter)


def _fit_moments(L, covariate_names, spec: MomentSpec, targets, n_j, *, j, k,
                 truncate_quantile=None, tol=1e-12, max_iter=MAX_ITER) -> WeightFit:
    R = spec.model_matrix(L, covariate_names)
    P = spec.moment_matrix(L, covariate_names)
    n_k = len(L)
    if np.linalg.matrix_rank(R) < R.shape[1]:
        raise OverlapError(f"weight model ({j},{k}): regressors are collinear in trial {k}", module="weight-fit")
    total = n_j * targets

    beta = np.zeros(R.shape[1])
    if () in spec.model_terms:
        beta[spec.model_terms.index(())] = np.log(n_j / n_k)

    if spec.just_identified:
        beta, iters = _newton_moments(R, P, total, beta, n_j, tol, max_iter, label=f"({j},{k})")
        transform = np.eye(R.shape[1])
        resid_norm = float(np.abs(P.T @ _exp_weights(R, beta) - total).max() / n_j)
    else:
        beta, iters, resid_norm, transform = _overidentified(R, P, total, beta, n_j, label=f"({j},{k})")

    w = _exp_weights(R, beta)
    truncated = False
    if truncate_quantile is not None:
        cap = np.quantile(w, truncate_quantile)
        truncated = bool((w > cap).any())
        w = np.minimum(w, cap)
    return WeightFit(j, k, beta, spec, w, targets, n_j, P, True, iters, resid_norm, transform, truncated)


def _newton_moments(R, P, total, beta, n_j, tol, max_iter, label):
    def resid(b):
        return (P.T @ _exp_weights(R, b) - total) / n_j

    F = resid(beta)
    for it in range(1, max_iter + 1):
        if np.abs(F).max() <= tol:
            return beta, it - 1
        w = _exp_weights(R, beta)
        J = (P * w[:, None]).T @ R / n_j
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise OverlapError(f"weight model {label}: singular moment Jacobian", module="weight-fit") from exc
        t, norm0 = 1.0, np.linalg.norm(F)
        for _ in range(40):
            cand = beta - t * step
            try:
                F_new = resid(cand)
            except OverlapError:
                t *= 0.5
                continue
            if np.linalg.norm(F_new) < norm0 or t < 1e-8:
                break
            t *= 0.5
        beta, F = cand, F_new
        if np.linalg.norm(beta) > BETA_NORM_LIMIT:
            raise OverlapError(f"weight model {label}: |beta| = {np.linalg.norm(beta):.1f} diverges; "
                               "no case-mix overlap", module="weight-fit")
    if np.abs(F).max() <= tol:
        return beta, max_iter
    raise ConvergenceError(f"weight model {label}: no convergence in {max_iter} iterations", module="weight-fit")


def _overidentified(R, P, total, beta0, n_j, label):
    # standardise each moment by its sampling scale on the sum level
    sd = P.std(axis=0)
    sd[sd < 1e-12] = 1.0
    scale = np.sqrt(n_j) * sd

    def fun(b):
        return (P.T @ np.exp(np.clip(R @ b, -700, 700)) - total) / scale

    def jac(b):
        w = np.exp(np.clip(R @ b, -700, 700))
        return (P * w[:, None]).T @ R / scale[:, None]

    sol = least_squares(fun, beta0, jac=jac, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=200 * 50)
    if not sol.success:
        raise ConvergenceError(f"weight model {label}: least squares failed ({sol.message})", module="weight-fit")
    if np.linalg.norm(sol.x) > BETA_NORM_LIMIT:
        raise OverlapError(f"weight model {label}: |beta| diverges; no case-mix overlap", module="weight-fit")
    resid_norm = float(np.linalg.norm(sol.fun))
    if resid_norm > OVERID_WARN:
        warnings.warn(f"weight model {label}: standardised moment residual {resid_norm:.2f} > {OVERID_WARN}; "
                      "aggregate moments may be incompatible with the weight model", OverlapWarning, stacklevel=3)
    # first-order condition D' W g = 0, written per unit of the sum scale
    W = np.diag(1.0 / scale ** 2)
    D = jac(sol.x) * scale[:, None]
    return sol.x, int(sol.nfev), resid_norm, D.T @ W * n_j


def weight_diagnostics(wf: WeightFit) -> Diagnostics:
    """Effective sample size, weight spread and moment balance of a fit."""
    w = wf.weights
    ess = float(w.sum() ** 2 / (w ** 2).sum())
    weighted = wf.moments_k.T @ w / w.sum()
    raw_sd = wf.moments_k.std(axis=0)
    balance = []
    for t, m_w, target, sd in zip(wf.moment_spec.moment_terms, weighted, wf.targets, raw_sd):
        balance.append({
            "term": term_label(t),
            "weighted_mean": float(m_w),
            "unweighted_mean": float(wf.moments_k[:, len(balance)].mean()),
            "target": float(target),
            "std_diff": float((m_w - target) / sd) if sd > 0 else 0.0,
        })
    return Diagnostics(ess, ess / len(w), float(w.max() / w.min()), balance)
