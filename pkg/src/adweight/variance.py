"""Sandwich variance for the stacked estimator.

The parameter vector stacks, in order,

* ``phi``    outcome-model coefficients of every IPD trial (strategy A:
             trial block plus that trial's shared coefficients; strategy B:
             trial blocks, then one common shared block),
* ``arm``    logit-scale arm-probability models for every trial whose
             P(X=1|S) is estimated rather than fixed by design (an
             intercept-only logistic model for randomized trials, a
             propensity model for observational IPD trials),
* ``beta``   weight-model parameters of every (j, k) pair (per arm for
             joint-odds pairs),
* ``phistar`` recovered coefficients of every (j, k) pair.

Rows of AD trials are unavailable; their contributions to the meat come
from pseudo trials whose per-arm first and second moments reproduce the
published and inverse-weighted moments exactly.  The bread only needs
IPD rows plus closed-form counts of the AD trials.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import MomentError, MomentWarning, PseudoDataSizeError, SchemaError, SingularDesignError
from .ipd import IpdFit, IpdTrial
from .model import OutcomeModelSpec, SharedParams, TrialParams, evaluate_term, expit
from .recover import PairEstimate
from .weights import AdSummary, WeightFit

COND_LIMIT = 1e12
PSD_FLOOR = 1e-10


def _logit(p):
    return float(np.log(p / (1.0 - p)))


# --------------------------------------------------------------------------
# parameter bookkeeping


@dataclass
class ParamState:
    """Stacked parameter vector with named blocks.

    ``blocks`` maps a key such as ``("phi", 4)``, ``("beta", 1, 4)`` or
    ``("phistar", 1, 4)`` to its index array into ``psi``.
    """

    psi: np.ndarray
    blocks: dict
    labels: list[str]

    def index(self, key) -> np.ndarray:
        try:
            return self.blocks[key]
        except KeyError:
            raise SchemaError(f"no parameter block {key!r}") from None

    def __len__(self) -> int:
        return len(self.psi)

    def check(self) -> None:
        seen = np.concatenate(list(self.blocks.values())) if self.blocks else np.array([], int)
        if sorted(seen.tolist()) != list(range(len(self.psi))):
            raise SchemaError("parameter blocks do not partition psi")


class _Builder:
    def __init__(self):
        self.values: list[float] = []
        self.labels: list[str] = []
        self.blocks: dict = {}

    def add(self, key, values, labels):
        start = len(self.values)
        self.values.extend(float(v) for v in values)
        self.labels.extend(labels)
        self.blocks[key] = np.arange(start, len(self.values))

    def build(self) -> ParamState:
        ps = ParamState(np.array(self.values), self.blocks, self.labels)
        ps.check()
        return ps


@dataclass
class ArmModel:
    """Logistic model for P(X=1 | L, S) of one trial.

    ``terms`` lists propensity regressors (``()`` is the intercept); the
    randomized default is intercept-only, whose fit is the empirical arm
    fraction.
    """

    study: object
    alpha: np.ndarray
    terms: tuple = ((),)

    def design(self, L, covariate_names) -> np.ndarray:
        return np.column_stack([evaluate_term(t, 0, L, covariate_names) for t in self.terms])

    @classmethod
    def intercept_only(cls, study, p_treated: float) -> "ArmModel":
        return cls(study, np.array([_logit(p_treated)]), ((),))


@dataclass
class PairModel:
    """One (AD trial j, IPD trial k) pair as it enters the stack.

    ``kind`` is ``"marginal"`` (membership odds, arm probabilities in the
    denominators) or ``"joint"`` (per-arm joint odds of treatment and
    membership; ``weight_fits`` then maps arm -> fit).
    """

    j: object
    k: object
    params: TrialParams
    weight_fits: Mapping
    kind: str = "marginal"


@dataclass
class StackInputs:
    spec: OutcomeModelSpec
    ipd_trials: Sequence[IpdTrial]
    ads: Sequence[AdSummary]
    ipd_fit: IpdFit
    pairs: Sequence[PairModel]
    arm_models: Mapping = field(default_factory=dict)

    def __post_init__(self):
        self.ipd = {t.study: t for t in self.ipd_trials}
        self.ad = {a.study: a for a in self.ads}
        if self.spec.subgroup_covariate is not None:
            raise SchemaError("the sandwich stack covers the two-coefficient outcome model only")


def default_arm_models(ipd_trials, ads, pairs) -> dict:
    """Intercept-only arm models for every trial whose arm probability is estimated.

    Only trials entering a marginal pair need one.
    """
    used = {p.k for p in pairs if p.kind == "marginal"} | {p.j for p in pairs if p.kind == "marginal"}
    out = {}
    for t in list(ipd_trials) + list(ads):
        if t.study in used and not t.arm_probability_is_design:
            out[t.study] = ArmModel.intercept_only(t.study, t.p_treated)
    return out


def pair_models(pairs: Mapping, weight_fits: Mapping) -> list[PairModel]:
    """Marginal pair models from Step-2/Step-3 outputs keyed by (j, k)."""
    return [PairModel(j, k, pairs[(j, k)].params, {None: weight_fits[(j, k)]}) for (j, k) in pairs]


def build_param_state(inp: StackInputs) -> ParamState:
    spec, fit = inp.spec, inp.ipd_fit
    b = _Builder()
    tl, sl = spec.trial_term_labels, spec.shared_term_labels
    for k in fit.studies:
        tp = fit.trial_params[k].as_array()
        if fit.strategy == "A":
            b.add(("phi", k), np.concatenate([tp, fit.shared[k].phi_c]),
                  [f"phi[{k}].{t}" for t in tl] + [f"phi_c[{k}].{t}" for t in sl])
        else:
            b.add(("phi", k), tp, [f"phi[{k}].{t}" for t in tl])
    if fit.strategy == "B":
        b.add(("phi_c",), fit.common_shared.phi_c, [f"phi_c.{t}" for t in sl])
    for s, am in inp.arm_models.items():
        b.add(("arm", s), am.alpha, [f"arm[{s}].{'*'.join(t) or '1'}" for t in am.terms])
    for p in inp.pairs:
        for x, wf in p.weight_fits.items():
            key = ("beta", p.j, p.k) if x is None else ("beta", p.j, p.k, x)
            names = ["*".join(t) or "1" for t in wf.moment_spec.model_terms]
            tag = "" if x is None else f"|x={x}"
            b.add(key, wf.beta, [f"beta[{p.j},{p.k}{tag}].{n}" for n in names])
    for p in inp.pairs:
        b.add(("phistar", p.j, p.k), p.params.as_array(), [f"phistar[{p.j},{p.k}].{t}" for t in tl[:2]])
    return b.build()


def phi_indices(ps: ParamState, fit: IpdFit, k) -> tuple[np.ndarray, np.ndarray]:
    """(trial-block indices, shared-block indices) of IPD trial ``k``."""
    nt = fit.spec.n_trial
    idx = ps.index(("phi", k))
    if fit.strategy == "A":
        return idx[:nt], idx[nt:]
    return idx, ps.index(("phi_c",))


# --------------------------------------------------------------------------
# inverse-weighted second moments and pseudo data


@dataclass
class SecondMoments:
    """Recovered moments of AD trial ``j``.

    ``ELL`` estimates E(L L' | S=j); ``ELY[x]`` estimates E(L Y | X=x, S=j).
    """

    j: object
    ELL: np.ndarray
    ELY: dict


def _pair_lookup(pairs, weight_fits):
    if isinstance(pairs, Mapping):
        return dict(pairs), dict(weight_fits)
    return {(p.j, p.k): p for p in pairs}, dict(weight_fits)


def ad_second_moments(ipd_trials: Sequence[IpdTrial], weight_fits: Mapping, pair_estimates,
                      ipd_fit: IpdFit, w: Mapping, ads: Sequence[AdSummary], *,
                      propensity: Mapping | None = None) -> dict:
    """Inverse-weighted E(LL'|S=j) and E(LY|x,S=j) for every AD trial.

    ``w`` maps IPD study -> pooling weight (summing to 1).  ``q`` in the
    outcome moment is the full mean response with the pair's recovered
    coefficients and trial ``k``'s shared coefficients.  ``propensity``
    optionally maps an IPD study to fitted P(X=1|L) per row.
    """
    propensity = propensity or {}
    spec = ipd_fit.spec
    pairs, wfs = _pair_lookup(pair_estimates, weight_fits)
    ipd = {t.study: t for t in ipd_trials}
    out = {}
    for ad in ads:
        j = ad.study
        ks = [k for (jj, k) in pairs if jj == j]
        if not ks:
            raise SchemaError(f"no pair estimates for AD trial {j}")
        missing = [k for k in ks if (j, k) not in wfs]
        if missing:
            raise SchemaError(f"AD trial {j}: missing weight fits for IPD trials {missing}")
        p = len(ad.covariate_names)
        ELL = np.zeros((p, p))
        ELY = {0: np.zeros(p), 1: np.zeros(p)}
        for k in ks:
            tr, wf = ipd[k], wfs[(j, k)]
            m = wf.weights
            ELL += w[k] * (tr.L * m[:, None]).T @ tr.L / ad.n
            sp = ipd_fit.shared_for(k)
            tp = pairs[(j, k)].params
            for x in (0, 1):
                sel = tr.x == x
                Lx = tr.L[sel]
                q = expit(spec.design(np.full(len(Lx), x), Lx) @ np.concatenate([tp.as_array(), sp.phi_c]))
                if k in propensity:
                    e = np.asarray(propensity[k])[sel]
                    prob = e if x == 1 else 1.0 - e
                else:
                    prob = tr.arm_prob(x)
                ELY[x] += w[k] * Lx.T @ (q * m[sel] / prob) / ad.n
        means = np.array([ad.term_mean((c,)) for c in ad.covariate_names])
        if (np.diag(ELL) < means ** 2 - 1e-12).any():
            warnings.warn(f"AD trial {j}: recovered second moments below squared means", MomentWarning,
                          stacklevel=2)
        out[j] = SecondMoments(j, ELL, ELY)
    return out


def arm_targets(ad: AdSummary, sm: SecondMoments) -> dict:
    """Per-arm target mean and sample covariance (divisor n-1) of T = (L, Y)."""
    p = len(ad.covariate_names)
    out = {}
    for x in (0, 1):
        arm = ad.arms[x]
        n = arm.n
        mu = np.array([arm.means[c] for c in ad.covariate_names] + [arm.y_mean])
        ETT = np.empty((p + 1, p + 1))
        ETT[:p, :p] = sm.ELL
        if arm.variances is not None:
            for i, c in enumerate(ad.covariate_names):
                ETT[i, i] = arm.variances[c] * (n - 1) / n + arm.means[c] ** 2
        ETT[:p, p] = ETT[p, :p] = sm.ELY[x]
        ETT[p, p] = arm.y_mean  # Y is binary, so E(Y^2) = E(Y)
        V = (ETT - np.outer(mu, mu)) * n / (n - 1) if n > 1 else np.zeros_like(ETT)
        out[x] = (mu, 0.5 * (V + V.T))
    return out


@dataclass
class PseudoTrial:
    """Synthetic rows of an AD trial; ``T = (L, Y)`` with real-valued Y."""

    study: object
    x: np.ndarray
    T: np.ndarray
    covariate_names: tuple

    @property
    def L(self) -> np.ndarray:
        return self.T[:, :-1]

    @property
    def y(self) -> np.ndarray:
        return self.T[:, -1]

    @property
    def n(self) -> int:
        return len(self.x)

    def summary(self) -> AdSummary:
        """Per-arm summaries recomputed from the synthetic rows."""
        from .weights import AdArm

        arms = {}
        for x in (0, 1):
            sel = self.x == x
            L = self.L[sel]
            arms[x] = AdArm(int(sel.sum()),
                            {c: float(L[:, i].mean()) for i, c in enumerate(self.covariate_names)},
                            {c: float(L[:, i].var(ddof=1)) for i, c in enumerate(self.covariate_names)},
                            float(self.y[sel].mean()))
        return AdSummary(self.study, self.covariate_names, arms)


def _sym_sqrt(V: np.ndarray, *, inverse: bool = False) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (V + V.T))
    scale = max(1.0, float(np.abs(vals).max()))
    if vals.min() < -PSD_FLOOR * scale:
        raise MomentError(f"target covariance is not positive semi-definite (min eigenvalue {vals.min():.3g})",
                          module="variance")
    vals = np.clip(vals, 0.0, None)
    if inverse:
        return (vecs / np.sqrt(vals)) @ vecs.T
    return (vecs * np.sqrt(vals)) @ vecs.T


def match_moments(n: int, mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``n`` rows whose sample mean and covariance (divisor n-1) equal the targets.

    Standard normal draws are centred, whitened by their own sample
    covariance and recoloured with the target covariance.
    """
    mean = np.asarray(mean, dtype=float)
    d = len(mean)
    if n <= d:
        raise PseudoDataSizeError(f"{n} rows cannot match a {d}-dimensional covariance exactly", module="variance")
    target_root = _sym_sqrt(np.asarray(cov, dtype=float))
    Z = rng.standard_normal((n, d))
    Z -= Z.mean(axis=0)
    S = Z.T @ Z / (n - 1)
    Z = Z @ _sym_sqrt(S, inverse=True)
    return Z @ target_root + mean


def make_pseudo_trial(ad_j: AdSummary, second_moments: SecondMoments, rng_seed=None) -> PseudoTrial:
    """Pseudo individual rows for AD trial ``j``: treated rows first, then controls."""
    rng = np.random.default_rng(rng_seed)
    targets = arm_targets(ad_j, second_moments)
    xs, Ts = [], []
    for x in (1, 0):
        mu, V = targets[x]
        n = ad_j.arms[x].n
        Ts.append(match_moments(n, mu, V, rng))
        xs.append(np.full(n, x, dtype=np.int8))
    return PseudoTrial(ad_j.study, np.concatenate(xs), np.vstack(Ts), ad_j.covariate_names)


# --------------------------------------------------------------------------
# sandwich


@dataclass
class SandwichParts:
    A: np.ndarray
    B: np.ndarray
    V: np.ndarray
    n: int
    condition: float
    a_rows_used: int
    params: ParamState
    F: np.ndarray | None = field(default=None, repr=False)

    def se(self, key=None) -> np.ndarray:
        d = np.sqrt(np.clip(np.diag(self.V), 0.0, None))
        return d if key is None else d[self.params.index(key)]


def _arm_prob_terms(am: ArmModel | None, trial, L, x, alpha=None):
    """Denominator P(X=x|L,S) per row and its derivative factor w.r.t. the arm model.

    Returns ``(prob, dlog)`` where d(1/prob)/d(alpha) = -(1/prob) * dlog.
    ``alpha`` overrides the model's fitted coefficients.
    """
    if am is None:
        return np.full(len(L), trial.arm_prob(x)), None
    Z = am.design(L, trial.covariate_names)
    e = expit(Z @ (am.alpha if alpha is None else alpha))
    if x == 1:
        return e, (1.0 - e)[:, None] * Z
    return 1.0 - e, -e[:, None] * Z


def estimating_functions(inp: StackInputs, ps: ParamState, pseudo: Mapping[object, PseudoTrial]):
    """Row-wise estimating functions ``F`` (N x dim psi) and the summed Jacobian.

    The Jacobian uses IPD rows only; AD-trial terms enter through
    published counts.  Returns ``(F, J, rows_touched_by_J)``.
    """
    spec, fit = inp.spec, inp.ipd_fit
    nt = spec.n_trial
    dim = len(ps)
    N = sum(t.n for t in inp.ipd_trials) + sum(pseudo[a.study].n for a in inp.ads)
    F = np.zeros((N, dim))
    J = np.zeros((dim, dim))
    rows_for_J = 0
    start = 0
    pairs_by_k: dict = {}
    pairs_by_j: dict = {}
    for p in inp.pairs:
        pairs_by_k.setdefault(p.k, []).append(p)
        pairs_by_j.setdefault(p.j, []).append(p)

    for tr in inp.ipd_trials:
        k = tr.study
        rows = slice(start, start + tr.n)
        start += tr.n
        rows_for_J += tr.n
        ti, si = phi_indices(ps, fit, k)
        idx = np.concatenate([ti, si])
        C = spec.design(tr.x, tr.L)
        q = expit(C @ ps.psi[idx])
        F[rows, idx] = C * (tr.y - q)[:, None]
        J[np.ix_(idx, idx)] -= (C * (q * (1 - q))[:, None]).T @ C

        am = inp.arm_models.get(k)
        if am is not None:
            ai = ps.index(("arm", k))
            Z = am.design(tr.L, tr.covariate_names)
            e = expit(Z @ ps.psi[ai])
            F[rows, ai] = Z * (tr.x - e)[:, None]
            J[np.ix_(ai, ai)] -= (Z * (e * (1 - e))[:, None]).T @ Z

        for p in pairs_by_k.get(k, []):
            psi_star = ps.index(("phistar", p.j, p.k))
            for xkey, wf in p.weight_fits.items():
                bkey = ("beta", p.j, p.k) if xkey is None else ("beta", p.j, p.k, xkey)
                bi = ps.index(bkey)
                ms = wf.moment_spec
                R = ms.model_matrix(tr.L, tr.covariate_names)
                P = ms.moment_matrix(tr.L, tr.covariate_names)
                m = np.exp(R @ ps.psi[bi])
                M = wf.gmm_transform
                arm_mask = np.ones(tr.n, bool) if xkey is None else tr.x == xkey
                g = P * (m * arm_mask)[:, None]
                F[rows, bi] = g @ M.T
                J[np.ix_(bi, bi)] += M @ (g.T @ R)
            for x in (0, 1):
                sel = tr.x == x
                Lx = tr.L[sel]
                fx = spec.shared_design(np.full(len(Lx), x), Lx)
                wf = p.weight_fits[None if p.kind == "marginal" else x]
                bkey = ("beta", p.j, p.k) if p.kind == "marginal" else ("beta", p.j, p.k, x)
                bi = ps.index(bkey)
                R = wf.moment_spec.model_matrix(Lx, tr.covariate_names)
                m = np.exp(R @ ps.psi[bi])
                lin = ps.psi[psi_star[0]] + ps.psi[psi_star[1]] * x + fx @ ps.psi[si]
                qx = expit(lin)
                if p.kind == "marginal":
                    prob, dlog = _arm_prob_terms(am, tr, Lx, x, ps.psi[ps.index(("arm", k))] if am else None)
                else:
                    prob, dlog = np.ones(len(Lx)), None
                h = m * qx / prob
                col = psi_star[0] if x == 0 else psi_star[1]
                rows_idx = np.arange(rows.start, rows.stop)[sel]
                F[rows_idx, col] = h
                hd = h * (1 - qx)
                J[col, psi_star[0]] += hd.sum()
                J[col, psi_star[1]] += x * hd.sum()
                J[col, bi] += h @ R
                J[col, si] += hd @ fx
                if dlog is not None:
                    J[col, ps.index(("arm", k))] -= h @ dlog

    for ad in inp.ads:
        j = ad.study
        pt = pseudo[j]
        rows = slice(start, start + pt.n)
        start += pt.n
        am = inp.arm_models.get(j)
        if am is not None:
            ai = ps.index(("arm", j))
            if am.terms != ((),):
                raise SchemaError(f"AD trial {j}: only an intercept-only arm model is estimable from summaries")
            e = float(expit(ps.psi[ai][0]))
            F[rows, ai[0]] = pt.x - e
            J[ai[0], ai[0]] -= ad.n * e * (1 - e)
        for p in pairs_by_j.get(j, []):
            psi_star = ps.index(("phistar", p.j, p.k))
            for xkey, wf in p.weight_fits.items():
                bkey = ("beta", p.j, p.k) if xkey is None else ("beta", p.j, p.k, xkey)
                bi = ps.index(bkey)
                P = wf.moment_spec.moment_matrix(pt.L, pt.covariate_names)
                arm_mask = np.ones(pt.n, bool) if xkey is None else pt.x == xkey
                F[rows, bi] = -(P * arm_mask[:, None]) @ wf.gmm_transform.T
            for x in (0, 1):
                col = psi_star[0] if x == 0 else psi_star[1]
                sel = pt.x == x
                rows_idx = np.arange(rows.start, rows.stop)[sel]
                if p.kind == "marginal":
                    if am is not None:
                        e = float(expit(ps.psi[ps.index(("arm", j))][0]))
                        prob = e if x == 1 else 1.0 - e
                        # d(-Y/prob)/d(alpha) summed over the arm: from counts and the arm outcome mean
                        total_y = ad.arms[x].n * ad.arms[x].y_mean
                        dlog = (1.0 - e) if x == 1 else -e
                        J[col, ps.index(("arm", j))[0]] += total_y / prob * dlog
                    else:
                        prob = ad.arm_prob(x)
                    F[rows_idx, col] = -pt.y[sel] / prob
                else:
                    F[rows_idx, col] = -pt.y[sel]
    return F, J, rows_for_J


def sandwich(inp: StackInputs, pseudo: Mapping[object, PseudoTrial], psi_hat: ParamState | None = None, *,
             keep_rows: bool = False) -> SandwichParts:
    """``V = A^{-1} B A^{-T} / n`` for the stacked estimator.

    ``A`` is minus the mean Jacobian (IPD rows only), ``B`` the mean outer
    product of the row-wise estimating functions over IPD and pseudo rows.
    """
    ps = psi_hat if psi_hat is not None else build_param_state(inp)
    missing = [a.study for a in inp.ads if a.study not in pseudo]
    if missing:
        raise SchemaError(f"pseudo trials missing for AD trials {missing}")
    F, J, rows_used = estimating_functions(inp, ps, pseudo)
    n = F.shape[0]
    A = -J / n
    B = F.T @ F / n
    B = 0.5 * (B + B.T)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularDesignError(f"bread matrix is singular (condition number {cond:.3g})", module="variance")
    Ainv = np.linalg.inv(A)
    V = Ainv @ B @ Ainv.T / n
    V = 0.5 * (V + V.T)
    d = np.diag(V)
    if d.min() < -PSD_FLOOR * np.abs(d).max():
        raise SingularDesignError(f"sandwich covariance is numerically indefinite (condition number {cond:.3g})",
                                  module="variance")
    return SandwichParts(A, B, V, n, cond, rows_used, ps, F if keep_rows else None)


# --------------------------------------------------------------------------
# linear functionals


def delta_pooled(V: SandwichParts | np.ndarray, c) -> float:
    """Variance ``c' V c`` of a linear functional of psi."""
    Vm = V.V if isinstance(V, SandwichParts) else np.asarray(V)
    c = np.asarray(c, dtype=float)
    if c.shape != (Vm.shape[0],):
        raise SchemaError(f"contrast has length {c.size}, psi has {Vm.shape[0]}")
    return float(c @ Vm @ c)


def contrast_pooled_ad(ps: ParamState, j, w: Mapping, component: int) -> np.ndarray:
    """Coefficients of sum_k w_k phistar_{jk}[component]."""
    c = np.zeros(len(ps))
    for k, wk in w.items():
        key = ("phistar", j, k)
        if key in ps.blocks:
            c[ps.blocks[key][component]] += wk
    return c


def contrast_trial(ps: ParamState, fit: IpdFit, study, component: int, w_pool: Mapping | None = None) -> np.ndarray:
    """Coefficient vector selecting trial ``study``'s coefficient ``component``.

    IPD trials select their own entry; AD trials pool their pair estimates
    with ``w_pool``.
    """
    if ("phi", study) in ps.blocks:
        c = np.zeros(len(ps))
        c[phi_indices(ps, fit, study)[0][component]] = 1.0
        return c
    if w_pool is None:
        raise SchemaError("pooling weights are required for AD trials")
    return contrast_pooled_ad(ps, study, w_pool, component)


def contrast_phibar(ps: ParamState, fit: IpdFit, trial_weights: Mapping, w_pool: Mapping) -> np.ndarray:
    """Coefficients of the weighted mean treatment coefficient across all trials."""
    c = np.zeros(len(ps))
    for s, ws in trial_weights.items():
        c += ws * contrast_trial(ps, fit, s, 1, w_pool)
    return c


def contrast_shared(ps: ParamState, fit: IpdFit, term_index: int, w_pool: Mapping) -> np.ndarray:
    """Coefficients of the pooled shared coefficient ``term_index``."""
    c = np.zeros(len(ps))
    if fit.strategy == "B":
        c[ps.index(("phi_c",))[term_index]] = 1.0
        return c
    for k, wk in w_pool.items():
        c[phi_indices(ps, fit, k)[1][term_index]] += wk
    return c
