"""Step 3: recover coefficients of aggregate-data trials and pool.

For AD trial ``j`` and IPD trial ``k``, each arm ``x`` gives one equation

    (1/n_j) sum_{i in k, X_i=x} expit(a_x + v(x, L_i)) m(L_i) / P(X=x|S=k)
        = E_hat(Y | X=x, S=j)

in the arm's linear-predictor offset ``a_x``; then ``phi0 = a_0`` and
``phi1 = a_1 - a_0``.  Each left-hand side is strictly increasing in its
offset, so the root is unique.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import BoundaryError, ConvergenceError, SchemaError
from .ipd import IpdTrial
from .model import OutcomeModelSpec, RandomEffectSummary, SharedParams, TrialParams, expit
from .weights import AdSummary, WeightFit

OFFSET_TOL = 1e-12
MAX_ITER = 100


@dataclass(frozen=True)
class PairEstimate:
    """Coefficients of AD trial ``j`` recovered through IPD trial ``k``."""

    j: object
    k: object
    params: TrialParams
    residual: float
    lhs_derivative: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PooledAdEstimate:
    j: object
    params: TrialParams
    weights: Mapping[object, float]


def solve_offset(v: np.ndarray, c: np.ndarray, target: float, *, label: str = "arm") -> tuple[float, float]:
    """Solve ``sum_i c_i expit(a + v_i) = target`` for the scalar ``a``.

    ``c`` must be positive.  Safeguarded Newton inside a bracket that is
    expanded until it contains the root.  Returns ``(a, derivative)``.
    """
    c = np.asarray(c, dtype=float)
    v = np.asarray(v, dtype=float)
    total = c.sum()
    if not 0.0 < target < total:
        raise ConvergenceError(f"{label}: target {target:.6g} outside the attainable range (0, {total:.6g})",
                               module="ad-recover")

    def g(a):
        p = expit(a + v)
        return float(c @ p) - target, float(c @ (p * (1.0 - p)))

    # start from the logit of the target share, adjusted by the mean offset
    share = target / total
    a = np.log(share / (1.0 - share)) - float(c @ v) / total
    lo, hi = -np.inf, np.inf
    for _ in range(MAX_ITER):
        val, der = g(a)
        if val > 0:
            hi = min(hi, a)
        else:
            lo = max(lo, a)
        if abs(val) <= OFFSET_TOL * max(1.0, target):
            return a, der
        step = val / der if der > 0 else np.inf
        cand = a - step
        if not (lo < cand < hi) or not np.isfinite(cand):
            if np.isfinite(lo) and np.isfinite(hi):
                cand = 0.5 * (lo + hi)
            elif np.isfinite(lo):
                cand = lo + max(1.0, abs(lo))
            else:
                cand = hi - max(1.0, abs(hi))
        a = cand
    val, der = g(a)
    if abs(val) <= 1e-9 * max(1.0, target):
        return a, der
    raise ConvergenceError(f"{label}: Newton did not converge (residual {val:.3g})", module="ad-recover")


def _check_boundary(value: float, label: str) -> None:
    if value <= 0.0 or value >= 1.0:
        raise BoundaryError(f"{label}: aggregate outcome mean {value} is on the boundary; logit undefined",
                            module="ad-recover")


def arm_equation_terms(ipd_k: IpdTrial, ad_j: AdSummary, weights: np.ndarray, shared: SharedParams,
                       spec: OutcomeModelSpec, x: int, arm_prob=None):
    """Offsets ``v_i`` and coefficients ``c_i`` of arm ``x``'s equation.

    ``arm_prob`` may be a row-wise array of P(X=x | L_i, S=k) (propensity
    scores); by default the trial's constant arm probability is used.
    """
    sel = ipd_k.x == x
    v = spec.shared_design(np.full(sel.sum(), x), ipd_k.L[sel]) @ shared.phi_c
    if arm_prob is None:
        denom = ipd_k.arm_prob(x)
    else:
        denom = np.asarray(arm_prob)[sel]
    c = weights[sel] / denom / ad_j.n
    return v, c


def solve_pair(ipd_k: IpdTrial, ad_j: AdSummary, wf: WeightFit, shared: SharedParams,
               spec: OutcomeModelSpec, *, propensity=None) -> PairEstimate:
    """Recover ``(phi0_j, phi1_j)`` from the weighted IPD of trial ``k``.

    ``shared`` is trial ``k``'s own estimate under strategy A or the common
    estimate under strategy B.  ``propensity``, if given, holds fitted
    P(X=1 | L_i, S=k) per row of trial ``k`` and replaces the constant arm
    probability (observational IPD trials).
    """
    if wf.j != ad_j.study or wf.k != ipd_k.study:
        raise SchemaError(f"weight fit is for pair ({wf.j},{wf.k}), not ({ad_j.study},{ipd_k.study})")
    offsets, derivs = {}, {}
    resid = 0.0
    for x in (0, 1):
        target = ad_j.arms[x].y_mean
        _check_boundary(target, f"AD trial {ad_j.study}, arm {x}")
        rowwise = None
        if propensity is not None:
            p1 = np.asarray(propensity, dtype=float)
            rowwise = p1 if x == 1 else 1.0 - p1
        v, c = arm_equation_terms(ipd_k, ad_j, wf.weights, shared, spec, x, rowwise)
        a, d = solve_offset(v, c, target, label=f"pair ({ad_j.study},{ipd_k.study}) arm {x}")
        offsets[x], derivs[x] = a, d
        resid = max(resid, abs(float(c @ expit(a + v)) - target))
    tp = TrialParams(offsets[0], offsets[1] - offsets[0])
    return PairEstimate(ad_j.study, ipd_k.study, tp, resid, np.array([derivs[0], derivs[1]]))


def pair_residuals(ipd_k: IpdTrial, ad_j: AdSummary, wf: WeightFit, shared: SharedParams,
                   spec: OutcomeModelSpec, params: TrialParams) -> np.ndarray:
    """Left minus right side of both arm equations at ``params``."""
    out = []
    for x in (0, 1):
        v, c = arm_equation_terms(ipd_k, ad_j, wf.weights, shared, spec, x)
        a = params.phi0 + params.phi1 * x
        out.append(float(c @ expit(a + v)) - ad_j.arms[x].y_mean)
    return np.array(out)


def pooling_weights(ipd_trials: Sequence[IpdTrial], rule: str = "size") -> dict:
    """Normalised pooling weights over IPD trials: ``"size"`` (w_k ~ n_k) or ``"equal"``."""
    if rule == "size":
        raw = {t.study: float(t.n) for t in ipd_trials}
    elif rule == "equal":
        raw = {t.study: 1.0 for t in ipd_trials}
    else:
        raise SchemaError(f"unknown pooling rule {rule!r}")
    total = sum(raw.values())
    return {k: v / total for k, v in raw.items()}


def _normalise(weights, keys) -> np.ndarray:
    if weights is None:
        w = np.full(len(keys), 1.0 / len(keys))
    elif isinstance(weights, Mapping):
        w = np.array([weights[k] for k in keys], dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
    if len(w) != len(keys):
        raise SchemaError("one pooling weight per estimate is required")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-10:
        raise SchemaError(f"pooling weights must be non-negative and sum to 1 (sum = {w.sum():.12g})")
    return w


def pool_pairs(pairs: Sequence[PairEstimate], w=None) -> PooledAdEstimate:
    """Weighted average of the pairwise estimates of one AD trial."""
    if not pairs:
        raise SchemaError("no pair estimates to pool")
    js = {p.j for p in pairs}
    if len(js) != 1:
        raise SchemaError(f"pairs refer to several AD trials: {sorted(map(str, js))}")
    keys = [p.k for p in pairs]
    wv = _normalise(w, keys)
    stacked = np.array([p.params.as_array() for p in pairs])
    return PooledAdEstimate(pairs[0].j, TrialParams.from_array(wv @ stacked), dict(zip(keys, wv.tolist())))


def pool_random_effects(all_trials: Mapping[object, TrialParams] | Sequence[TrialParams], w=None, *,
                        within_cov: Sequence[np.ndarray] | None = None) -> RandomEffectSummary:
    """Mean ``Phi`` and between-trial covariance ``Sigma`` of (phi0, phi1).

    ``Sigma`` is the weighted dispersion of the point estimates, with the
    unbiased normaliser ``1 - sum(w^2)``, floored to positive
    semi-definite.  Passing ``within_cov`` (per-trial sampling covariances)
    subtracts their weighted average first.
    """
    if isinstance(all_trials, Mapping):
        keys = list(all_trials)
        params = [all_trials[k] for k in keys]
    else:
        params = list(all_trials)
        keys = list(range(len(params)))
    if not params:
        raise SchemaError("no trial estimates to pool")
    theta = np.array([p.as_array()[:2] for p in params])
    wv = _normalise(w, keys)
    Phi = wv @ theta
    if len(params) < 2:
        return RandomEffectSummary(Phi, None, float(Phi[1]), wv, sigma_defined=False)
    dev = theta - Phi
    denom = 1.0 - float(wv @ wv)
    Sigma = (dev * wv[:, None]).T @ dev / denom
    if within_cov is not None:
        Sigma = Sigma - sum(wi * np.asarray(c)[:2, :2] for wi, c in zip(wv, within_cov))
    Sigma = 0.5 * (Sigma + Sigma.T)
    vals, vecs = np.linalg.eigh(Sigma)
    Sigma = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return RandomEffectSummary(Phi, Sigma, float(Phi[1]), wv)
