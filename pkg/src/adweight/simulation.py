"""Monte Carlo harness for the five-trial simulation design.

Trials 1-3 are masked to aggregate data; trials 4 and 5 keep their rows.
Each replication draws its own RNG stream from ``SeedSequence(master,
spawn_key=(i,))``, so results do not depend on how replications are
scheduled across workers.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import AdweightError, SchemaError
from .ipd import IpdTrial
from .model import OutcomeModelSpec, expit
from .pipeline import PipelineOptions, run_pipeline
from .weights import AdSummary

log = logging.getLogger(__name__)

COVARIATES = ("L1", "L2")
BALANCE_TOL = 1e-8
RESIDUAL_TOL = 1e-9
Z95 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process.

    ``beta`` maps trial ``j = 2..5`` to membership coefficients on
    ``(1, L1, L2)``; trial 1 is the reference category.  ``shared`` holds
    the coefficients of ``L1``, ``L2`` and ``X*L2``.
    """

    n: int = 15000
    beta: dict = field(default_factory=lambda: {
        2: (0.15, -0.15, -0.15), 3: (0.15, -0.15, -0.15),
        4: (-0.15, 0.15, 0.15), 5: (-0.15, 0.15, 0.15)})
    phi0: tuple = (0.25, 0.50, 0.25, 0.25, 0.50)
    phi1: tuple = (1.00, 0.50, 0.00, 0.50, 1.00)
    shared: tuple = (1.5, -1.5, 2.0)
    seed: int = 0
    ad_studies: tuple = (1, 2, 3)

    def __post_init__(self):
        if self.n < 1:
            raise SchemaError("n must be positive")
        if len(self.phi0) != 5 or len(self.phi1) != 5:
            raise SchemaError("phi0 and phi1 need one entry per trial (5)")
        if sorted(self.beta) != [2, 3, 4, 5] or any(len(b) != 3 for b in self.beta.values()):
            raise SchemaError("beta needs 3 coefficients for each of trials 2..5")
        if len(self.shared) != 3:
            raise SchemaError("shared needs coefficients for L1, L2 and X*L2")

    @property
    def studies(self) -> tuple:
        return (1, 2, 3, 4, 5)

    @property
    def ipd_studies(self) -> tuple:
        return tuple(s for s in self.studies if s not in self.ad_studies)

    @property
    def phibar1(self) -> float:
        return float(np.mean(self.phi1))

    def truth(self) -> dict:
        out = {}
        for j in self.ad_studies:
            out[f"phi0[{j}]"] = self.phi0[j - 1]
        for j in self.ad_studies:
            out[f"phi1[{j}]"] = self.phi1[j - 1]
        out["phibar1"] = self.phibar1
        out["interaction"] = self.shared[2]
        return out


def dgp_spec() -> OutcomeModelSpec:
    return OutcomeModelSpec(COVARIATES, ["L1", "L2", "X*L2"])


def membership_probabilities(cfg: DgpConfig, L: np.ndarray) -> np.ndarray:
    """P(S=s | L) for s = 1..5, columns in study order."""
    Lt = np.column_stack([np.ones(len(L)), L])
    logits = np.column_stack([np.zeros(len(L))] + [Lt @ np.asarray(cfg.beta[j]) for j in (2, 3, 4, 5)])
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def simulate_dgp(cfg: DgpConfig, rng: np.random.Generator | None = None) -> list[IpdTrial]:
    """All five trials at the individual level."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n = cfg.n
    L = np.column_stack([rng.uniform(0.0, 1.0, n), rng.binomial(1, 0.5, n).astype(float)])
    x = rng.binomial(1, 0.5, n)
    P = membership_probabilities(cfg, L)
    u = rng.uniform(size=n)
    s = 1 + (u[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
    s = np.minimum(s, 5)
    phi0 = np.asarray(cfg.phi0)[s - 1]
    phi1 = np.asarray(cfg.phi1)[s - 1]
    b1, b2, b3 = cfg.shared
    eta = phi0 + phi1 * x + b1 * L[:, 0] + b2 * L[:, 1] + b3 * x * L[:, 1]
    y = (rng.uniform(size=n) < expit(eta)).astype(np.int8)
    trials = []
    for study in cfg.studies:
        sel = s == study
        trials.append(IpdTrial(study, x[sel], y[sel], L[sel], COVARIATES))
    return trials


def mask_trials(trials, ad_studies) -> tuple[list[IpdTrial], list[AdSummary]]:
    """Replace the listed trials by their published summaries."""
    ipd = [t for t in trials if t.study not in ad_studies]
    ads = [AdSummary.from_trial(t) for t in trials if t.study in ad_studies]
    return ipd, ads


@dataclass
class ReplicationResult:
    index: int
    estimates: dict
    variances: dict
    ipd_estimates: dict
    ipd_variances: dict
    max_balance_error: float = float("nan")
    failed: bool = False
    error: str | None = None


def ipd_only_comparator(ipd_trials, spec: OutcomeModelSpec | None = None) -> tuple[dict, dict]:
    """Equal-weight average of treatment and interaction coefficients over IPD trials only.

    Variances come from the robust sandwich of the per-trial fits.
    """
    spec = spec or dgp_spec()
    opts = PipelineOptions(pooling="equal", variance=True)
    rep = run_pipeline(ipd_trials, [], spec, opts)
    est = {"phibar1": rep.phibar.value, "interaction": rep.shared["X*L2"].value}
    var = {"phibar1": rep.phibar.se ** 2, "interaction": rep.shared["X*L2"].se ** 2}
    return est, var


def run_replication(cfg: DgpConfig, options: PipelineOptions | None = None, *, index: int = 0,
                    seed_seq: np.random.SeedSequence | None = None) -> ReplicationResult:
    """One simulated dataset through the full pipeline and the IPD-only comparator.

    Pipeline errors and failed internal checks are returned as a failure
    record rather than raised.
    """
    ss = seed_seq if seed_seq is not None else np.random.SeedSequence(cfg.seed)
    data_ss, pseudo_ss = ss.spawn(2)
    opts = replace(options or PipelineOptions(pooling="equal"),
                   seed=int(pseudo_ss.generate_state(1)[0]))
    spec = dgp_spec()
    try:
        trials = simulate_dgp(cfg, np.random.default_rng(data_ss))
        ipd, ads = mask_trials(trials, cfg.ad_studies)
        rep = run_pipeline(ipd, ads, spec, opts)
        balance = max((wf.balance_error for wf in rep.weight_fits.values()), default=0.0)
        if balance > BALANCE_TOL and all(wf.moment_spec.just_identified for wf in rep.weight_fits.values()):
            raise AdweightError(f"weight balance violated ({balance:.3g})")
        worst = max((pe.residual for pe in rep.pairs.values()), default=0.0)
        if worst > RESIDUAL_TOL:
            raise AdweightError(f"recovery residual too large ({worst:.3g})")
        est, var = {}, {}
        for j in cfg.ad_studies:
            for label, name in (("intercept", "phi0"), ("treatment", "phi1")):
                e = rep.coefficients[j][label]
                est[f"{name}[{j}]"], var[f"{name}[{j}]"] = e.value, _sq(e.se)
        est["phibar1"], var["phibar1"] = rep.phibar.value, _sq(rep.phibar.se)
        inter = rep.shared["X*L2"]
        est["interaction"], var["interaction"] = inter.value, _sq(inter.se)
        ipd_est, ipd_var = ipd_only_comparator(ipd, spec)
        return ReplicationResult(index, est, var, ipd_est, ipd_var, balance)
    except AdweightError as exc:
        log.info("replication %d failed: %s", index, exc)
        return ReplicationResult(index, {}, {}, {}, {}, failed=True, error=f"{exc.category}: {exc}")


def _sq(se):
    return float("nan") if se is None else se * se


@dataclass
class McRow:
    parameter: str
    truth: float
    bias: float
    var: float
    mean_var_hat: float
    coverage: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class McSummary:
    rows: list
    replications: int
    failures: int
    label: str = ""

    def row(self, parameter: str) -> McRow:
        for r in self.rows:
            if r.parameter == parameter:
                return r
        raise KeyError(parameter)

    def to_records(self) -> list[dict]:
        return [dict(r.to_dict(), approach=self.label, replications=self.replications, failures=self.failures)
                for r in self.rows]

    def to_text(self) -> str:
        head = f"{'Approach':<10}{'Parameter':<14}{'Bias':>12}{'Var':>12}{'Var_hat':>12}{'Coverage':>10}"
        lines = [head]
        for r in self.rows:
            lines.append(f"{self.label:<10}{r.parameter:<14}{r.bias:>12.3e}{r.var:>12.3e}"
                         f"{r.mean_var_hat:>12.3e}{r.coverage:>10.1f}")
        lines.append(f"({self.replications} successful replications, {self.failures} failed)")
        return "\n".join(lines)


def summarize_mc(estimates, variances, truth: dict, *, failures: int = 0, label: str = "") -> McSummary:
    """Bias, empirical variance (divisor R-1), mean estimated variance and Wald coverage.

    ``estimates`` and ``variances`` are sequences of dicts, one per
    successful replication.
    """
    estimates, variances = list(estimates), list(variances)
    if len(estimates) < 2:
        raise AdweightError("at least two successful replications are required to summarise")
    rows = []
    for name, t in truth.items():
        est = np.array([e[name] for e in estimates], dtype=float)
        vh = np.array([v[name] for v in variances], dtype=float)
        half = Z95 * np.sqrt(vh)
        covered = (est - half <= t) & (t <= est + half)
        rows.append(McRow(name, float(t), float(est.mean() - t), float(est.var(ddof=1)), float(vh.mean()),
                          float(100.0 * covered.mean())))
    return McSummary(rows, len(estimates), failures, label)


@dataclass
class StudyResult:
    config: DgpConfig
    replications: list
    ps: McSummary | None
    ipd: McSummary | None

    @property
    def failures(self) -> list:
        return [r for r in self.replications if r.failed]

    @property
    def max_balance_error(self) -> float:
        ok = [r.max_balance_error for r in self.replications if not r.failed]
        return max(ok) if ok else float("nan")

    def to_text(self) -> str:
        parts = [f"n = {self.config.n}, master seed = {self.config.seed}, "
                 f"replications = {len(self.replications)}, failures = {len(self.failures)}"]
        for s in (self.ps, self.ipd):
            if s is not None:
                parts += ["", s.to_text()]
        return "\n".join(parts)

    def to_records(self) -> list[dict]:
        out = []
        for s in (self.ps, self.ipd):
            if s is not None:
                out += [dict(r, n=self.config.n, seed=self.config.seed) for r in s.to_records()]
        return out


def _replicate(args):
    cfg, options, i = args
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(i,))
    return run_replication(cfg, options, index=i, seed_seq=ss)


def run_study(cfg: DgpConfig, n_rep: int = 500, options: PipelineOptions | None = None, *,
              workers: int = 1) -> StudyResult:
    """``n_rep`` replications; summaries computed in replication order."""
    if n_rep < 1:
        raise SchemaError("n_rep must be positive")
    options = options or PipelineOptions(pooling="equal")
    jobs = [(cfg, options, i) for i in range(n_rep)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_replicate, jobs, chunksize=max(1, n_rep // (4 * workers))))
    else:
        results = [_replicate(j) for j in jobs]
    results.sort(key=lambda r: r.index)
    ok = [r for r in results if not r.failed]
    n_fail = len(results) - len(ok)
    ps = ipd = None
    if len(ok) >= 2:
        ps = summarize_mc([r.estimates for r in ok], [r.variances for r in ok], cfg.truth(),
                          failures=n_fail, label="PS")
        ipd_truth = {"phibar1": cfg.phibar1, "interaction": cfg.shared[2]}
        ipd = summarize_mc([r.ipd_estimates for r in ok], [r.ipd_variances for r in ok], ipd_truth,
                           failures=n_fail, label="IPD")
    return StudyResult(cfg, results, ps, ipd)


# --------------------------------------------------------------------------
# auxiliary designs


def simulate_three_trial(n_per_trial: int = 600, seed: int = 0, *, treatment=(0.4, 0.35, 0.45)) -> list[IpdTrial]:
    """Three randomized trials with age, sex and baseline-severity covariates.

    Case-mix differs between trials; outcome coefficients of the
    covariates are common, treatment coefficients are trial-specific.
    """
    rng = np.random.default_rng(seed)
    shifts = [(0.0, 0.0, 0.0), (3.0, 0.08, 1.5), (-2.0, -0.05, -1.0)]
    intercepts = (-0.8, -0.6, -0.9)
    trials = []
    for s, ((da, ds, dp), a0, b1) in enumerate(zip(shifts, intercepts, treatment), start=1):
        n = n_per_trial
        age = rng.normal(45.0 + da, 12.0, n)
        sex = rng.binomial(1, 0.65 + ds, n).astype(float)
        pasi0 = rng.gamma(6.0, (20.0 + dp) / 6.0, n)
        x = rng.binomial(1, 0.5, n)
        eta = a0 + b1 * x - 0.01 * (age - 45.0) + 0.2 * sex + 0.03 * (pasi0 - 20.0)
        y = (rng.uniform(size=n) < expit(eta)).astype(int)
        trials.append(IpdTrial(s, x, y, np.column_stack([age, sex, pasi0]), ("age", "sex", "pasi0")))
    return trials


SUBGROUP_TRUTH = (0.2, 0.8, -0.5, 0.6)


def simulate_subgroup_dgp(n: int = 15000, seed: int = 0, *, truth=SUBGROUP_TRUTH,
                          ipd_truth=((0.3, 0.5, -0.2, 0.3), (0.1, 0.7, -0.4, 0.5))) -> list[IpdTrial]:
    """Three trials with a binary effect modifier ``L1`` and a continuous ``L2``.

    Trial 1 has trial-specific coefficients ``truth`` on (1, X, L1, X*L1);
    trials 2 and 3 use ``ipd_truth``.  Shared terms are ``L2`` and
    ``X*L2`` with coefficients (1.0, -0.5).  Membership follows a
    multinomial logit in (1, L1, L2) with trial 1 as reference.
    """
    rng = np.random.default_rng(seed)
    L = np.column_stack([rng.binomial(1, 0.5, n).astype(float), rng.uniform(0.0, 1.0, n)])
    x = rng.binomial(1, 0.5, n)
    Lt = np.column_stack([np.ones(n), L])
    logits = np.column_stack([np.zeros(n), Lt @ np.array([0.1, -0.3, 0.2]), Lt @ np.array([-0.1, 0.3, -0.2])])
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    s = 1 + (rng.uniform(size=n)[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
    s = np.minimum(s, 3)
    coefs = np.array([truth, *ipd_truth])[s - 1]
    eta = coefs[:, 0] + coefs[:, 1] * x + coefs[:, 2] * L[:, 0] + coefs[:, 3] * x * L[:, 0] + L[:, 1] - 0.5 * x * L[:, 1]
    y = (rng.uniform(size=n) < expit(eta)).astype(int)
    return [IpdTrial(k, x[s == k], y[s == k], L[s == k], ("L1", "L2")) for k in (1, 2, 3)]
