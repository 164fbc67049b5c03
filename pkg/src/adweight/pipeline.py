"""End-to-end analysis: Steps 1-3, sandwich variance and pooling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import SchemaError
from .extensions import (
    PropensityFit,
    fit_joint_weight_model,
    fit_propensity,
    solve_pair_observational,
    solve_subgroup_pair,
)
from .ipd import IpdFit, IpdTrial, fit_ipd
from .model import OutcomeModelSpec, RandomEffectSummary, TrialParams
from .recover import PairEstimate, PooledAdEstimate, pool_pairs, pool_random_effects, pooling_weights, solve_pair
from .variance import (
    PairModel,
    SandwichParts,
    StackInputs,
    ad_second_moments,
    build_param_state,
    contrast_phibar,
    contrast_shared,
    contrast_trial,
    default_arm_models,
    delta_pooled,
    make_pseudo_trial,
    sandwich,
)
from .weights import AdSummary, Diagnostics, MomentSpec, WeightFit, fit_weight_model, weight_diagnostics

log = logging.getLogger(__name__)

Z95 = float(stats.norm.ppf(0.975))


@dataclass
class PipelineOptions:
    """Run-level configuration.

    ``pooling`` weights IPD trials when averaging pair estimates and
    shared coefficients (``"size"`` or ``"equal"``); ``trial_weighting``
    weights all trials in the summary treatment coefficient.
    ``propensity`` maps an IPD study to the covariates of its propensity
    model (observational IPD trials); ``joint_weights`` switches AD trials
    to the joint-odds weight model.  ``sigma_correction`` subtracts the
    average within-trial sampling covariance from the between-trial
    covariance ``Sigma`` (needs the sandwich).
    """

    strategy: str = "A"
    pooling: str = "size"
    trial_weighting: str = "equal"
    moment_spec: MomentSpec | None = None
    variance: bool = True
    seed: int = 0
    propensity: Mapping[object, Sequence[str]] = field(default_factory=dict)
    joint_weights: bool = False
    truncate_quantile: float | None = None
    sigma_correction: bool = False


@dataclass
class Estimate:
    value: float
    se: float | None = None

    @property
    def ci(self) -> tuple[float, float] | None:
        if self.se is None:
            return None
        return (self.value - Z95 * self.se, self.value + Z95 * self.se)

    def to_dict(self) -> dict:
        ci = self.ci
        return {"estimate": self.value, "se": self.se, "ci_low": None if ci is None else ci[0],
                "ci_high": None if ci is None else ci[1]}


@dataclass
class FitReport:
    """Everything a run produces; see :meth:`to_dict` for the serialised layout."""

    seed: int
    options: PipelineOptions
    spec: OutcomeModelSpec
    ipd_fit: IpdFit
    weight_fits: dict
    diagnostics: dict
    pairs: dict
    pooled: dict
    trial_estimates: dict
    pool_weights: dict
    trial_weights: dict
    random_effects: RandomEffectSummary
    coefficients: dict
    pair_coefficients: dict
    phibar: Estimate
    shared: dict
    variance: SandwichParts | None
    propensity_fits: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    stack: StackInputs | None = field(default=None, repr=False)
    pseudo: dict = field(default_factory=dict, repr=False)

    @property
    def ad_studies(self) -> list:
        return list(self.pooled)

    def to_dict(self) -> dict:
        def key(s):
            return str(s)

        return {
            "seed": self.seed,
            "strategy": self.options.strategy,
            "pooling": self.options.pooling,
            "trial_weighting": self.options.trial_weighting,
            "pool_weights": {key(k): v for k, v in self.pool_weights.items()},
            "trials": {key(s): {name: est.to_dict() for name, est in coefs.items()}
                       for s, coefs in self.coefficients.items()},
            "pairs": {f"{j},{k}": {name: est.to_dict() for name, est in coefs.items()}
                      for (j, k), coefs in self.pair_coefficients.items()},
            "summary": {
                "phibar1": self.phibar.to_dict(),
                "shared": {name: est.to_dict() for name, est in self.shared.items()},
                "Phi": self.random_effects.Phi.tolist(),
                "Sigma": None if self.random_effects.Sigma is None else self.random_effects.Sigma.tolist(),
            },
            "weights": {f"{j},{k}": {"beta": wf.beta.tolist(), "iterations": wf.iterations,
                                     "residual": wf.residual_norm,
                                     "ess": self.diagnostics[(j, k)].ess,
                                     "ess_ratio": self.diagnostics[(j, k)].ess_ratio,
                                     "max_min_ratio": self.diagnostics[(j, k)].max_min_ratio,
                                     "balance": self.diagnostics[(j, k)].balance}
                        for (j, k), wf in self.weight_fits.items() if (j, k) in self.diagnostics},
            "variance": None if self.variance is None else {
                "n": self.variance.n, "condition": self.variance.condition,
                "labels": self.variance.params.labels},
            "log": list(self.log),
        }

    def to_text(self) -> str:
        lines = [f"seed: {self.seed}   strategy: {self.options.strategy}   pooling: {self.options.pooling}", ""]
        lines.append(f"{'trial':>8} {'term':>12} {'estimate':>10} {'95% CI':>22}")
        for s, coefs in self.coefficients.items():
            for name, est in coefs.items():
                lines.append(f"{str(s):>8} {name:>12} {est.value:>10.4f} {_fmt_ci(est):>22}")
        if self.pair_coefficients:
            lines += ["", "pairwise estimates of AD trials"]
            ad = list(self.pooled)
            for j in ad:
                ks = [k for (jj, k) in self.pair_coefficients if jj == j]
                header = "".join(f"{f'phi[{j},{k}]':>26}" for k in ks) + f"{f'phi[{j}] pooled':>26}"
                lines.append(f"{'':>12}" + header)
                names = list(self.coefficients[j])
                for name in names:
                    row = "".join(f"{_fmt_est(self.pair_coefficients[(j, k)][name]):>26}" for k in ks)
                    row += f"{_fmt_est(self.coefficients[j][name]):>26}"
                    lines.append(f"{name:>12}" + row)
        lines += ["", "summary"]
        lines.append(f"{'phibar1':>22} {_fmt_est(self.phibar):>26}")
        for name, est in self.shared.items():
            lines.append(f"{'shared ' + name:>22} {_fmt_est(est):>26}")
        if self.diagnostics:
            lines += ["", "weight diagnostics"]
            for (j, k), d in self.diagnostics.items():
                lines.append(f"  ({j},{k}) ESS={d.ess:.1f} ({100 * d.ess_ratio:.1f}%) max/min={d.max_min_ratio:.2f}")
        return "\n".join(lines)


def _fmt_ci(est: Estimate) -> str:
    ci = est.ci
    return "" if ci is None else f"({ci[0]:.3f}; {ci[1]:.3f})"


def _fmt_est(est: Estimate) -> str:
    return f"{est.value:.3f} {_fmt_ci(est)}".strip()


def _trial_weights(studies, rule: str) -> dict:
    if rule != "equal":
        raise SchemaError(f"unknown trial weighting {rule!r}")
    return {s: 1.0 / len(studies) for s in studies}


def run_pipeline(ipd_trials: Sequence[IpdTrial], ads: Sequence[AdSummary], spec: OutcomeModelSpec,
                 options: PipelineOptions | None = None) -> FitReport:
    """Fit the outcome model across IPD and AD trials and report pooled results."""
    opts = options or PipelineOptions()
    if not ipd_trials:
        raise SchemaError("at least one IPD trial is required")
    studies = [t.study for t in ipd_trials] + [a.study for a in ads]
    if len(set(studies)) != len(studies):
        raise SchemaError("study ids must be unique across IPD and AD inputs")
    for a in ads:
        if tuple(a.covariate_names) != tuple(spec.covariate_names):
            raise SchemaError(f"AD trial {a.study}: covariates {a.covariate_names} differ from the model's")
    for t in ipd_trials:
        if tuple(t.covariate_names) != tuple(spec.covariate_names):
            raise SchemaError(f"IPD trial {t.study}: covariates {t.covariate_names} differ from the model's")

    runlog = []
    fit = fit_ipd(ipd_trials, spec, opts.strategy)
    runlog.append(f"step 1 (strategy {fit.strategy}): max score {fit.score_norm:.2e}")
    w_pool = pooling_weights(ipd_trials, opts.pooling)
    subgroup = spec.subgroup_covariate is not None

    prop_fits: dict = {}
    for t in ipd_trials:
        if t.study in opts.propensity:
            prop_fits[t.study] = fit_propensity(t, list(opts.propensity[t.study]))
            runlog.append(f"propensity model for trial {t.study}: alpha = {np.round(prop_fits[t.study].alpha, 4).tolist()}")

    weight_fits, diags, pairs, models = {}, {}, {}, []
    for ad in ads:
        for tr in ipd_trials:
            key = (ad.study, tr.study)
            shared = fit.shared_for(tr.study)
            if opts.joint_weights:
                jwf = {x: fit_joint_weight_model(tr, ad, x, opts.moment_spec) for x in (0, 1)}
                for x, wf in jwf.items():
                    weight_fits[key + (x,)] = wf
                pe = solve_pair_observational(tr, ad, jwf, shared, spec)
                models.append(PairModel(ad.study, tr.study, pe.params, jwf, kind="joint"))
            else:
                wf = fit_weight_model(tr, ad, opts.moment_spec, truncate_quantile=opts.truncate_quantile)
                weight_fits[key] = wf
                diags[key] = weight_diagnostics(wf)
                if subgroup:
                    pe = solve_subgroup_pair(tr, ad, wf, shared, spec)
                else:
                    prop = prop_fits[tr.study].fitted if tr.study in prop_fits else None
                    pe = solve_pair(tr, ad, wf, shared, spec, propensity=prop)
                models.append(PairModel(ad.study, tr.study, pe.params, {None: wf}))
            pairs[key] = pe
            runlog.append(f"pair {key}: residual {pe.residual:.2e}")

    pooled = {}
    for ad in ads:
        plist = [pairs[(ad.study, t.study)] for t in ipd_trials]
        pooled[ad.study] = pool_pairs(plist, {t.study: w_pool[t.study] for t in ipd_trials})

    trial_estimates: dict = {}
    for ad in ads:
        trial_estimates[ad.study] = pooled[ad.study].params
    for t in ipd_trials:
        trial_estimates[t.study] = fit.trial_params[t.study]
    trial_w = _trial_weights(list(trial_estimates), opts.trial_weighting)
    re = pool_random_effects(trial_estimates, trial_w)

    variance, stack, pseudo = None, None, {}
    if opts.variance and subgroup:
        runlog.append("variance: not available for the subgroup model; point estimates only")
    elif opts.variance:
        variance, stack, pseudo = _variance(ipd_trials, ads, spec, fit, weight_fits, pairs, models, prop_fits,
                                            w_pool, opts)
        runlog.append(f"variance: bread condition number {variance.condition:.3g}")

    names = spec.trial_term_labels
    coefficients, pair_coefs = {}, {}
    ps = variance.params if variance is not None else None
    if opts.sigma_correction:
        if ps is None:
            runlog.append("random effects: Sigma correction skipped, no sandwich covariance")
        else:
            within = []
            for s in trial_estimates:
                C = np.array([contrast_trial(ps, fit, s, c, w_pool) for c in (0, 1)])
                within.append(C @ variance.V @ C.T)
            re = pool_random_effects(trial_estimates, trial_w, within_cov=within)
    for s, tp in trial_estimates.items():
        vals = tp.as_array()
        coefs = {}
        for c, name in enumerate(names):
            se = None
            if ps is not None and c < 2:
                se = float(np.sqrt(delta_pooled(variance, contrast_trial(ps, fit, s, c, w_pool))))
            elif s in fit.covariance and ps is None:
                se = float(np.sqrt(fit.covariance[s][c, c]))
            coefs[name] = Estimate(float(vals[c]), se)
        coefficients[s] = coefs
    for (j, k), pe in pairs.items():
        vals = pe.params.as_array()
        coefs = {}
        for c, name in enumerate(names):
            se = None
            if ps is not None and c < 2:
                se = float(np.sqrt(variance.V[ps.index(("phistar", j, k))[c], ps.index(("phistar", j, k))[c]]))
            coefs[name] = Estimate(float(vals[c]), se)
        pair_coefs[(j, k)] = coefs

    phibar_se = None
    if ps is not None:
        phibar_se = float(np.sqrt(delta_pooled(variance, contrast_phibar(ps, fit, trial_w, w_pool))))
    phibar = Estimate(re.phi1_bar, phibar_se)

    shared = {}
    for i, name in enumerate(spec.shared_term_labels):
        value = sum(w_pool[k] * fit.shared_for(k).phi_c[i] for k in fit.studies)
        se = None
        if ps is not None:
            se = float(np.sqrt(delta_pooled(variance, contrast_shared(ps, fit, i, w_pool))))
        shared[name] = Estimate(float(value), se)

    return FitReport(opts.seed, opts, spec, fit, weight_fits, diags, pairs, pooled, trial_estimates, w_pool,
                     trial_w, re, coefficients, pair_coefs, phibar, shared, variance, prop_fits, runlog,
                     stack, pseudo)


def _variance(ipd_trials, ads, spec, fit, weight_fits, pairs, models, prop_fits, w_pool, opts):
    arm_models = default_arm_models(ipd_trials, ads, models)
    for k, pf in prop_fits.items():
        arm_models[k] = pf.arm_model()
    inp = StackInputs(spec, ipd_trials, ads, fit, models, arm_models)
    pseudo = {}
    if ads:
        if opts.joint_weights:
            # per-arm weights: rebuild marginal-style moments from the arm fits
            moments = _joint_second_moments(ipd_trials, ads, fit, weight_fits, pairs, w_pool)
        else:
            moments = ad_second_moments(ipd_trials, weight_fits, pairs, fit, w_pool, ads,
                                        propensity={k: pf.fitted for k, pf in prop_fits.items()})
        seeds = np.random.SeedSequence(opts.seed).spawn(len(ads))
        for ad, ss in zip(ads, seeds):
            pseudo[ad.study] = make_pseudo_trial(ad, moments[ad.study], np.random.default_rng(ss))
    return sandwich(inp, pseudo, build_param_state(inp)), inp, pseudo


def _joint_second_moments(ipd_trials, ads, fit, weight_fits, pairs, w_pool) -> dict:
    from .model import expit
    from .variance import SecondMoments

    spec = fit.spec
    ipd = {t.study: t for t in ipd_trials}
    out = {}
    for ad in ads:
        j = ad.study
        p = len(ad.covariate_names)
        ELL = np.zeros((p, p))
        ELY = {0: np.zeros(p), 1: np.zeros(p)}
        for k, wk in w_pool.items():
            tr = ipd[k]
            tp = pairs[(j, k)].params
            sp = fit.shared_for(k)
            for x in (0, 1):
                wf = weight_fits[(j, k, x)]
                sel = tr.x == x
                Lx = tr.L[sel]
                # sum over arm-x rows of k with joint weights estimates n_xj E(. | x, j)
                ELL += wk * (Lx * wf.weights[:, None]).T @ Lx / ad.n
                q = expit(spec.design(np.full(len(Lx), x), Lx) @ np.concatenate([tp.as_array(), sp.phi_c]))
                ELY[x] += wk * Lx.T @ (q * wf.weights) / ad.n_arm(x)
        out[j] = SecondMoments(j, ELL, ELY)
    return out
