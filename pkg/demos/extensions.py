"""
Extensions: observational trials and a subgroup effect
======================================================

Two departures from the randomized, common-effect setting.
"""
import numpy as np

from adweight import AdSummary, IpdTrial, OutcomeModelSpec, PipelineOptions, run_pipeline
from adweight.model import expit
from adweight.simulation import SUBGROUP_TRUTH, simulate_subgroup_dgp

rng = np.random.default_rng(5)
names = ("L1", "L2")

# --- observational trials ------------------------------------------------
# Treatment depends on L1 in both trials, so P(X=1) is no longer a constant.
n = 12000
L = np.column_stack([rng.uniform(size=n), rng.binomial(1, 0.5, n).astype(float)])
s = np.where(rng.uniform(size=n) < expit(0.2 - 0.4 * L[:, 0] + 0.3 * L[:, 1]), 2, 1)
x = (rng.uniform(size=n) < expit(-0.2 + 0.8 * L[:, 0])).astype(int)
phi = np.array([(0.3, 0.9), (0.1, 0.4)])[s - 1]
y = (rng.uniform(size=n) < expit(phi[:, 0] + phi[:, 1] * x + 1.2 * L[:, 0] - 0.8 * L[:, 1]
                                 + 0.7 * x * L[:, 1])).astype(int)
t1, t2 = (IpdTrial(k, x[s == k], y[s == k], L[s == k], names) for k in (1, 2))

spec = OutcomeModelSpec(names, ["L1", "L2", "X*L2"])
ad = AdSummary.from_trial(t1)
naive = run_pipeline([t2], [ad], spec, PipelineOptions())
joint = run_pipeline([t2], [ad], spec, PipelineOptions(propensity={2: ["L1", "L2"]}, joint_weights=True))
print("truth for trial 1:          (0.30, 0.90)")
print("randomized-trial weights:  ", np.round(naive.trial_estimates[1].as_array()[:2], 3))
print("joint-odds weights:        ", np.round(joint.trial_estimates[1].as_array()[:2], 3),
      "SE", round(joint.coefficients[1]["treatment"].se, 3))

# --- subgroup-specific coefficients ---------------------------------------
# The summary trial publishes outcome rates per arm within L1 = 0 and L1 = 1,
# which identifies its own L1 effect and treatment-by-L1 interaction.
trials = simulate_subgroup_dgp(15000, seed=8)
sub_spec = OutcomeModelSpec(names, ["L2", "X*L2"], subgroup_covariate="L1")
ad = AdSummary.from_trial(trials[0], subgroup_covariate="L1")
rep = run_pipeline(trials[1:], [ad], sub_spec, PipelineOptions())
print()
print("truth  (phi0, phi1, phi2, phi3):", SUBGROUP_TRUTH)
print("recovered:                      ", np.round(rep.trial_estimates[1].as_array(), 3).tolist())
print(rep.log[-1] if rep.log else "")
