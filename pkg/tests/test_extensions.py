import numpy as np
import pytest

from adweight.errors import BoundaryError, MomentError, SchemaError
from adweight.extensions import (
    fit_joint_weight_model,
    fit_propensity,
    solve_pair_observational,
    solve_subgroup_pair,
)
from adweight.ipd import IpdTrial, fit_ipd
from adweight.model import OutcomeModelSpec, expit
from adweight.pipeline import PipelineOptions, run_pipeline
from adweight.recover import solve_pair
from adweight.simulation import simulate_subgroup_dgp
from adweight.weights import AdArm, AdSummary, fit_weight_model

NAMES = ("L1", "L2")
SPEC = OutcomeModelSpec(NAMES, ["L1", "L2", "X*L2"])
TRUTH = {1: (0.3, 0.9), 2: (0.1, 0.4)}


def confounded(n, seed, *, prop=(-0.2, 0.8), beta2=(0.2, -0.4, 0.3)):
    """Two observational trials sharing one propensity model; trial 1 becomes AD."""
    r = np.random.default_rng(seed)
    L = np.column_stack([r.uniform(size=n), r.binomial(1, 0.5, n).astype(float)])
    Lt = np.column_stack([np.ones(n), L])
    p2 = expit(Lt @ np.asarray(beta2))
    s = np.where(r.uniform(size=n) < p2, 2, 1)
    x = (r.uniform(size=n) < expit(prop[0] + prop[1] * L[:, 0])).astype(int)
    phi = np.array([TRUTH[1], TRUTH[2]])[s - 1]
    eta = phi[:, 0] + phi[:, 1] * x + 1.2 * L[:, 0] - 0.8 * L[:, 1] + 0.7 * x * L[:, 1]
    y = (r.uniform(size=n) < expit(eta)).astype(int)
    return [IpdTrial(k, x[s == k], y[s == k], L[s == k], NAMES) for k in (1, 2)]


def mirrored(n, seed):
    """A randomized trial in which every covariate row appears once in each arm."""
    r = np.random.default_rng(seed)
    L = np.column_stack([r.uniform(size=n), r.binomial(1, 0.5, n).astype(float)])
    L2 = np.vstack([L, L])
    x = np.r_[np.ones(n, int), np.zeros(n, int)]
    y = (r.uniform(size=2 * n) < expit(0.2 + 0.5 * x + L2 @ np.array([1.0, -1.0]) + 0.5 * x * L2[:, 1])).astype(int)
    return L2, x, y


def test_propensity_randomized_slopes_zero(dgp_trials):
    pf = fit_propensity(dgp_trials[3])
    se = np.sqrt(np.diag(pf.covariance))
    assert np.all(np.abs(pf.alpha[1:]) <= 3 * se[1:])
    assert np.all((pf.fitted > 0) & (pf.fitted < 1))


def test_propensity_confounded_recovery():
    r = np.random.default_rng(4)
    n = 20000
    L = np.column_stack([r.uniform(size=n), r.binomial(1, 0.5, n).astype(float)])
    x = (r.uniform(size=n) < expit(0.5 * L[:, 0])).astype(int)
    pf = fit_propensity(IpdTrial(1, x, r.binomial(1, 0.5, n), L, NAMES))
    se = np.sqrt(np.diag(pf.covariance))
    assert np.all(np.abs(pf.alpha - np.array([0.0, 0.5, 0.0])) <= 3 * se)


def test_constant_propensity_reproduces_randomized_pair(masked, spec):
    ipd, ads = masked
    fit = fit_ipd(ipd, spec)
    k = ipd[0]
    pf = fit_propensity(k, [])
    np.testing.assert_allclose(pf.fitted, k.p_treated, atol=1e-12)
    wf = fit_weight_model(k, ads[0])
    a = solve_pair(k, ads[0], wf, fit.shared_for(k.study), spec)
    b = solve_pair(k, ads[0], wf, fit.shared_for(k.study), spec, propensity=pf.fitted)
    np.testing.assert_allclose(a.params.as_array(), b.params.as_array(), atol=1e-10)


def test_joint_weights_balance_arm_moments(masked):
    ipd, ads = masked
    for x in (0, 1):
        jwf = fit_joint_weight_model(ipd[0], ads[0], x)
        assert jwf.balance_error <= 1e-8
        assert np.all(jwf.weights > 0)
        Lx = ipd[0].L[ipd[0].x == x]
        np.testing.assert_allclose(Lx.T @ jwf.weights / ads[0].n_arm(x),
                                   [ads[0].arms[x].means[c] for c in NAMES], atol=1e-8)


def test_joint_weights_factorize_under_randomization():
    """Randomized trials: joint slopes track the marginal slopes and the intercept shifts by the arm-share log ratio."""
    from adweight.simulation import DgpConfig, simulate_dgp

    reps = 80
    d = []
    for i in range(reps):
        trials = simulate_dgp(DgpConfig(n=15000, seed=4000 + i))
        k, j = trials[3], AdSummary.from_trial(trials[0])
        marg = fit_weight_model(k, j)
        row = []
        for x in (0, 1):
            jw = fit_joint_weight_model(k, j, x)
            row += list(jw.beta[1:] - marg.beta[1:])
            row.append(jw.beta[0] - marg.beta[0] - np.log(j.arm_prob(x) / k.arm_prob(x)))
        d.append(row)
    d = np.array(d)
    se = d.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(d.mean(axis=0)) <= 3 * se)


def test_observational_collapse_on_mirrored_data():
    Lk, xk, yk = mirrored(1500, 1)
    Lj, xj, yj = mirrored(1000, 2)
    k = IpdTrial(2, xk, yk, Lk, NAMES)
    j = AdSummary.from_trial(IpdTrial(1, xj, yj, Lj + np.array([0.05, 0.0]), NAMES))
    spec = OutcomeModelSpec(NAMES, ["L1", "L2", "X*L2"])
    base = run_pipeline([k], [j], spec, PipelineOptions(seed=1))
    obs = run_pipeline([k], [j], spec, PipelineOptions(seed=1, propensity={2: ["L1", "L2"]}, joint_weights=True))
    np.testing.assert_allclose(obs.trial_estimates[1].as_array(), base.trial_estimates[1].as_array(), atol=1e-6)


def test_observational_pipeline_recovers_truth():
    reps = 60
    est_joint, est_prop = [], []
    for i in range(reps):
        t1, t2 = confounded(15000, 700 + i)
        ad = AdSummary.from_trial(t1)
        r = run_pipeline([t2], [ad], SPEC, PipelineOptions(variance=False, joint_weights=True))
        est_joint.append(r.trial_estimates[1].as_array())
    est_joint = np.array(est_joint)
    se = est_joint.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(est_joint.mean(axis=0) - np.array(TRUTH[1])) <= 3 * se)


def test_propensity_pipeline_with_randomized_ad():
    """Observational IPD trial, randomized AD trial: propensity-weighted recovery."""
    reps = 60
    est = []
    for i in range(reps):
        t1, t2 = confounded(15000, 1700 + i)
        r = np.random.default_rng(i)
        # re-randomize trial 1's treatment so the AD trial is a randomized comparison
        x1 = r.binomial(1, 0.5, t1.n)
        eta = TRUTH[1][0] + TRUTH[1][1] * x1 + 1.2 * t1.L[:, 0] - 0.8 * t1.L[:, 1] + 0.7 * x1 * t1.L[:, 1]
        y1 = (r.uniform(size=t1.n) < expit(eta)).astype(int)
        ad = AdSummary.from_trial(IpdTrial(1, x1, y1, t1.L, NAMES))
        rep = run_pipeline([t2], [ad], SPEC, PipelineOptions(variance=False, propensity={2: ["L1", "L2"]}))
        est.append(rep.trial_estimates[1].as_array())
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(est.mean(axis=0) - np.array(TRUTH[1])) <= 3 * se)


def test_observational_variance_available():
    t1, t2 = confounded(15000, 3)
    rep = run_pipeline([t2], [AdSummary.from_trial(t1)], SPEC,
                       PipelineOptions(joint_weights=True, propensity={2: ["L1"]}))
    assert rep.coefficients[1]["treatment"].se > 0


def test_observational_boundary():
    t1, t2 = confounded(3000, 5)
    ad = AdSummary.from_trial(t1)
    arms = dict(ad.arms)
    arms[0] = AdArm(arms[0].n, arms[0].means, arms[0].variances, 0.0)
    bad = AdSummary(1, NAMES, arms)
    fit = fit_ipd([t2], SPEC)
    jwf = {x: fit_joint_weight_model(t2, bad, x) for x in (0, 1)}
    with pytest.raises(BoundaryError):
        solve_pair_observational(t2, bad, jwf, fit.shared_for(2), SPEC)


SUB_SPEC = OutcomeModelSpec(NAMES, ["L2", "X*L2"], "L1")


def _subgroup_pair(trials):
    ad = AdSummary.from_trial(trials[0], subgroup_covariate="L1")
    fit = fit_ipd(trials[1:], SUB_SPEC)
    k = trials[1]
    wf = fit_weight_model(k, ad)
    return k, ad, wf, fit


def test_subgroup_cells_hold():
    k, ad, wf, fit = _subgroup_pair(simulate_subgroup_dgp(15000, 2))
    pe = solve_subgroup_pair(k, ad, wf, fit.shared_for(k.study), SUB_SPEC)
    assert pe.residual <= 1e-8
    assert len(pe.params.extra) == 2


def test_subgroup_requires_published_cells():
    trials = simulate_subgroup_dgp(6000, 3)
    ad = AdSummary.from_trial(trials[0])
    fit = fit_ipd(trials[1:], SUB_SPEC)
    wf = fit_weight_model(trials[1], ad)
    with pytest.raises(MomentError):
        solve_subgroup_pair(trials[1], ad, wf, fit.shared_for(2), SUB_SPEC)


def test_subgroup_requires_binary_covariate(masked):
    ipd, ads = masked
    spec = OutcomeModelSpec(NAMES, ["L2"], "L1")
    k = ipd[0]
    ad = AdSummary.from_trial(k, subgroup_covariate="L2")
    ad = AdSummary(9, ad.covariate_names, ad.arms, None, "L1", ad.subgroup_fraction)
    with pytest.raises(SchemaError):
        solve_subgroup_pair(k, ad, fit_weight_model(k, ad), fit_ipd([k], spec).shared_for(k.study), spec)


def test_subgroup_empty_cell():
    trials = simulate_subgroup_dgp(6000, 4)
    k = trials[1]
    keep = ~((k.x == 1) & (k.L[:, 0] == 1))
    kk = k.subset(keep)
    ad = AdSummary.from_trial(trials[0], subgroup_covariate="L1")
    from adweight.model import SharedParams
    with pytest.raises(SchemaError):
        solve_subgroup_pair(kk, ad, fit_weight_model(kk, ad), SharedParams(np.zeros(2)), SUB_SPEC)
