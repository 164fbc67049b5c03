"""Non-randomized trials and subgroup-specific coefficients.

Observational IPD trials replace the constant arm probability with a
fitted propensity score.  When the AD trial is observational too, the
weight model becomes the joint odds of (treatment, membership) per arm,
fitted against the AD trial's arm-specific moments.

The subgroup model adds a trial-specific main effect of a binary
covariate ``L1`` and its treatment interaction; AD trials must then
publish outcome means in each (arm, L1) cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundaryError, MomentError, SchemaError
from .ipd import IpdTrial, newton_logistic
from .model import OutcomeModelSpec, SharedParams, TrialParams, evaluate_term, expit, parse_term
from .recover import PairEstimate, _check_boundary, solve_offset
from .variance import ArmModel
from .weights import AdSummary, MomentSpec, WeightFit, _fit_moments


@dataclass
class PropensityFit:
    """Logistic model of P(X=1 | L, S=k) within one IPD trial."""

    study: object
    alpha: np.ndarray
    terms: tuple
    fitted: np.ndarray
    covariance: np.ndarray

    def arm_model(self) -> ArmModel:
        return ArmModel(self.study, self.alpha, self.terms)

    def predict(self, L, covariate_names) -> np.ndarray:
        Z = np.column_stack([evaluate_term(t, 0, L, covariate_names) for t in self.terms])
        return expit(Z @ self.alpha)


def fit_propensity(ipd_k: IpdTrial, covariates=None) -> PropensityFit:
    """Maximum-likelihood propensity model with an intercept and the given covariates.

    ``covariates=None`` uses all of the trial's covariates; ``[]`` gives the
    intercept-only model, whose fitted value is the empirical arm fraction.
    """
    names = ipd_k.covariate_names if covariates is None else covariates
    terms = ((),) + tuple(parse_term(c) for c in names)
    Z = np.column_stack([evaluate_term(t, 0, ipd_k.L, ipd_k.covariate_names) for t in terms])
    res = newton_logistic(Z, ipd_k.x, label=f"propensity model of trial {ipd_k.study}")
    fitted = expit(Z @ res.coef)
    return PropensityFit(ipd_k.study, res.coef, terms, fitted, res.covariance)


def joint_targets(ad_j: AdSummary, x: int, p_spec: MomentSpec) -> np.ndarray:
    return np.array([ad_j.arm_term_mean(t, x) for t in p_spec.moment_terms])


def fit_joint_weight_model(ipd_k: IpdTrial, ad_j: AdSummary, x: int,
                           p_spec: MomentSpec | None = None) -> WeightFit:
    """Joint-odds weights for arm ``x``.

    Solves ``sum_{i in k, X_i=x} p(L_i) exp(beta' r(L_i)) = n_xj * E_hat{p(L)|x, j}``.
    The returned fit's ``weights`` cover the arm-``x`` rows of trial ``k``
    and ``n_j`` is the AD arm count ``n_xj``.
    """
    if tuple(ad_j.covariate_names) != tuple(ipd_k.covariate_names):
        raise SchemaError(f"covariates of AD trial {ad_j.study} and IPD trial {ipd_k.study} differ")
    sel = ipd_k.x == x
    if not sel.any():
        raise SchemaError(f"IPD trial {ipd_k.study} has no rows in arm {x}")
    spec = p_spec or MomentSpec.linear(ipd_k.covariate_names)
    targets = joint_targets(ad_j, x, spec)
    return _fit_moments(ipd_k.L[sel], ipd_k.covariate_names, spec, targets, ad_j.n_arm(x),
                        j=ad_j.study, k=ipd_k.study)


def solve_pair_observational(ipd_k: IpdTrial, ad_j: AdSummary, jwf: dict, shared: SharedParams,
                             spec: OutcomeModelSpec) -> PairEstimate:
    """Recover ``(phi0_j, phi1_j)`` with joint-odds weights ``jwf[x]`` per arm.

    Per arm: ``(1/n_j) sum_{i in k, X=x} expit(a_x + v_i) exp(beta_x' r_i)
    = E_hat(Y|x, j) P(X=x|S=j)``.
    """
    offsets, derivs = {}, {}
    resid = 0.0
    for x in (0, 1):
        target_mean = ad_j.arms[x].y_mean
        _check_boundary(target_mean, f"AD trial {ad_j.study}, arm {x}")
        wf = jwf[x]
        sel = ipd_k.x == x
        if len(wf.weights) != sel.sum():
            raise SchemaError(f"joint weight fit for arm {x} does not match trial {ipd_k.study}'s arm size")
        v = spec.shared_design(np.full(sel.sum(), x), ipd_k.L[sel]) @ shared.phi_c
        c = wf.weights / ad_j.n
        target = target_mean * ad_j.arm_prob(x)
        a, d = solve_offset(v, c, target, label=f"observational pair ({ad_j.study},{ipd_k.study}) arm {x}")
        offsets[x], derivs[x] = a, d
        resid = max(resid, abs(float(c @ expit(a + v)) - target))
    return PairEstimate(ad_j.study, ipd_k.study, TrialParams(offsets[0], offsets[1] - offsets[0]), resid,
                        np.array([derivs[0], derivs[1]]))


def solve_subgroup_pair(ipd_k: IpdTrial, ad_j: AdSummary, wf: WeightFit, shared: SharedParams,
                        spec: OutcomeModelSpec) -> PairEstimate:
    """Recover ``(phi0, phi1, phi2, phi3)`` of AD trial ``j`` from four (arm, L1) cells.

    Cell ``(x, l1)`` solves
    ``(1/n_j) sum_{i in k, X=x, L1=l1} expit(a_{x,l1} + v_i) m_i / P(X=x|S=k)
    = E_hat(Y|x, l1, j) P_hat(l1|j)``; the four offsets map to
    ``phi0 = a00, phi1 = a10 - a00, phi2 = a01 - a00,
    phi3 = a11 - a10 - a01 + a00``.
    """
    l1_name = spec.subgroup_covariate
    if l1_name is None:
        raise SchemaError("the outcome model has no subgroup covariate")
    if ad_j.subgroup_fraction is None or any(a.subgroup_y_mean is None for a in ad_j.arms.values()):
        raise MomentError(f"AD trial {ad_j.study} does not publish subgroup outcome means", module="extensions")
    l1 = ipd_k.column(l1_name)
    if not np.isin(l1, (0, 1)).all():
        raise SchemaError(f"subgroup covariate {l1_name!r} must be binary")
    a = {}
    derivs = []
    resid = 0.0
    for x in (0, 1):
        for level in (0, 1):
            cell = (ipd_k.x == x) & (l1 == level)
            label = f"subgroup pair ({ad_j.study},{ipd_k.study}) cell (x={x}, {l1_name}={level})"
            if not cell.any():
                raise SchemaError(f"{label}: empty cell in IPD trial")
            ybar = ad_j.arms[x].subgroup_y_mean[level]
            if ybar <= 0.0 or ybar >= 1.0:
                raise BoundaryError(f"{label}: subgroup outcome mean {ybar} on the boundary", module="extensions")
            v = spec.shared_design(np.full(cell.sum(), x), ipd_k.L[cell]) @ shared.phi_c
            c = wf.weights[cell] / ipd_k.arm_prob(x) / ad_j.n
            target = ybar * ad_j.subgroup_fraction[level]
            a[x, level], d = solve_offset(v, c, target, label=label)
            derivs.append(d)
            resid = max(resid, abs(float(c @ expit(a[x, level] + v)) - target))
    phi = (a[0, 0], a[1, 0] - a[0, 0], a[0, 1] - a[0, 0], a[1, 1] - a[1, 0] - a[0, 1] + a[0, 0])
    return PairEstimate(ad_j.study, ipd_k.study, TrialParams(phi[0], phi[1], phi[2:]), resid, np.array(derivs))
