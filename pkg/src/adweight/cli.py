"""Command-line front-end: ``fit``, ``simulate`` and ``validate``.

Settings come from an optional YAML config file; command-line flags
override it.  Failures print a JSON error record to stderr and exit with
the error category's code (2 schema, 3 convergence, 4 overlap,
5 boundary or moment problems).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import AdweightError, SchemaError
from .io import ingest_ad, ingest_ipd, summarize_ipd
from .model import OutcomeModelSpec
from .pipeline import PipelineOptions, run_pipeline
from .weights import MomentSpec

log = logging.getLogger("adweight")


@dataclass
class AnalysisConfig:
    ipd: list = field(default_factory=list)
    ad: list = field(default_factory=list)
    covariates: list | None = None
    shared_terms: list | None = None
    subgroup_covariate: str | None = None
    strategy: str = "A"
    pooling: str = "size"
    trial_weighting: str = "equal"
    weight_terms: list | None = None
    moment_terms: list | None = None
    propensity: dict = field(default_factory=dict)
    joint_weights: bool = False
    sigma_correction: bool = False
    require_variances: bool = True
    seed: int = 0
    output: str | None = None

    @classmethod
    def from_mapping(cls, d: dict, base: Path | None = None) -> "AnalysisConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if base is not None:
            cfg.ipd = [str(base / p) for p in _as_list(cfg.ipd)]
            cfg.ad = [str(base / p) for p in _as_list(cfg.ad)]
        return cfg


def _as_list(v):
    if v is None:
        return []
    return [v] if isinstance(v, str) else list(v)


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise SchemaError(f"{p}: cannot read config ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{p}: config must be a mapping")
    return doc


def _propensity_flags(values) -> dict:
    out = {}
    for v in values or []:
        study, _, covs = v.partition("=")
        key = int(study) if study.lstrip("-").isdigit() else study
        out[key] = [c for c in covs.split(",") if c]
    return out


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) not in (None, [], False)}


def build_config(args) -> AnalysisConfig:
    raw = _load_config(args.config)
    base = Path(args.config).parent if args.config else None
    cfg = AnalysisConfig.from_mapping(raw, base)
    over = _overrides(args, ["ipd", "ad", "covariates", "shared_terms", "subgroup_covariate", "strategy", "pooling",
                             "trial_weighting", "weight_terms", "moment_terms", "seed", "output"])
    for k, v in over.items():
        setattr(cfg, k, v)
    if args.joint_weights:
        cfg.joint_weights = True
    if args.sigma_correction:
        cfg.sigma_correction = True
    if args.no_require_variances:
        cfg.require_variances = False
    if args.propensity:
        cfg.propensity = _propensity_flags(args.propensity)
    cfg.ipd, cfg.ad = _as_list(cfg.ipd), _as_list(cfg.ad)
    if not cfg.ipd:
        raise SchemaError("at least one IPD file is required")
    return cfg


def load_inputs(cfg: AnalysisConfig):
    trials = []
    for p in cfg.ipd:
        trials += ingest_ipd(p, cfg.covariates)
    if not trials:
        raise SchemaError("no IPD trials found")
    names = trials[0].covariate_names
    for t in trials:
        if set(t.covariate_names) != set(names):
            raise SchemaError(f"IPD trial {t.study}: covariates differ from trial {trials[0].study}")
    ads = []
    for p in cfg.ad:
        ads += ingest_ad(p, names, require_variances=cfg.require_variances)
    return trials, ads, names


def run_fit(cfg: AnalysisConfig):
    """Ingest, fit and (optionally) write ``<output>.json`` and ``<output>.txt``."""
    trials, ads, names = load_inputs(cfg)
    shared = cfg.shared_terms if cfg.shared_terms is not None else \
        [c for c in names if c != cfg.subgroup_covariate]
    spec = OutcomeModelSpec(names, shared, cfg.subgroup_covariate)
    ms = None
    if cfg.weight_terms is not None or cfg.moment_terms is not None:
        model = cfg.weight_terms if cfg.weight_terms is not None else ["1"] + list(names)
        ms = MomentSpec(model, cfg.moment_terms)
    opts = PipelineOptions(strategy=cfg.strategy, pooling=cfg.pooling, trial_weighting=cfg.trial_weighting,
                           moment_spec=ms, seed=cfg.seed, propensity=cfg.propensity,
                           joint_weights=cfg.joint_weights, sigma_correction=cfg.sigma_correction)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = run_pipeline(trials, ads, spec, opts)
    for w in caught:
        report.log.append(f"warning: {w.message}")
    doc = report.to_dict()
    doc["inputs"] = {"ipd": summarize_ipd(trials), "ad": [str(a.study) for a in ads]}
    if cfg.output:
        out = Path(cfg.output)
        out.with_suffix(".json").write_text(json.dumps(doc, indent=2, default=str))
        out.with_suffix(".txt").write_text(report.to_text() + "\n")
    return report, doc


def _cmd_fit(args) -> int:
    cfg = build_config(args)
    report, doc = run_fit(cfg)
    if args.format == "json":
        print(json.dumps(doc, indent=2, default=str))
    else:
        print(report.to_text())
    return 0


def _cmd_validate(args) -> int:
    cfg = build_config(args)
    trials, ads, names = load_inputs(cfg)
    doc = {"covariates": list(names), "ipd": summarize_ipd(trials),
           "ad": [{"study": a.study, "n_treated": a.n_arm(1), "n_control": a.n_arm(0)} for a in ads],
           "status": "ok"}
    if args.format == "json":
        print(json.dumps(doc, indent=2, default=str))
    else:
        for t in doc["ipd"]:
            print(f"IPD trial {t['study']}: n={t['n']} (treated {t['n_treated']}, control {t['n_control']})")
        for a in doc["ad"]:
            print(f"AD trial {a['study']}: treated {a['n_treated']}, control {a['n_control']}")
        print("ok")
    return 0


def _cmd_simulate(args) -> int:
    from .simulation import DgpConfig, run_study

    raw = _load_config(args.config)
    dgp_keys = set(DgpConfig.__dataclass_fields__)
    dgp = {k: v for k, v in raw.items() if k in dgp_keys}
    if "beta" in dgp:
        dgp["beta"] = {int(k): tuple(v) for k, v in dgp["beta"].items()}
    for k in ("phi0", "phi1", "shared", "ad_studies"):
        if k in dgp:
            dgp[k] = tuple(dgp[k])
    if args.n is not None:
        dgp["n"] = args.n
    if args.seed is not None:
        dgp["seed"] = args.seed
    reps = args.reps if args.reps is not None else int(raw.get("replications", 500))
    pooling = args.pooling or raw.get("pooling", "equal")
    strategy = args.strategy or raw.get("strategy", "A")
    cfg = DgpConfig(**dgp)
    result = run_study(cfg, reps, PipelineOptions(strategy=strategy, pooling=pooling), workers=args.workers)
    text = result.to_text()
    if args.output:
        out = Path(args.output)
        out.with_suffix(".json").write_text(json.dumps(
            {"n": cfg.n, "seed": cfg.seed, "replications": reps, "rows": result.to_records(),
             "failures": [{"index": r.index, "error": r.error} for r in result.failures]}, indent=2))
        out.with_suffix(".txt").write_text(text + "\n")
    if args.format == "json":
        print(json.dumps(result.to_records(), indent=2))
    else:
        print(text)
    return 0


def _add_fit_args(p):
    p.add_argument("--config", help="YAML analysis config")
    p.add_argument("--ipd", nargs="+", help="IPD files (delimited text)")
    p.add_argument("--ad", nargs="+", help="AD summary files (YAML or JSON)")
    p.add_argument("--covariates", nargs="+")
    p.add_argument("--shared-terms", nargs="+", dest="shared_terms",
                   help="shared outcome-model terms, e.g. age sex X*sex")
    p.add_argument("--subgroup-covariate", dest="subgroup_covariate")
    p.add_argument("--strategy", choices=["A", "B"])
    p.add_argument("--pooling", choices=["size", "equal"])
    p.add_argument("--trial-weighting", dest="trial_weighting", choices=["equal"])
    p.add_argument("--weight-terms", nargs="+", dest="weight_terms")
    p.add_argument("--moment-terms", nargs="+", dest="moment_terms")
    p.add_argument("--propensity", action="append", metavar="STUDY=COV1,COV2",
                   help="fit a propensity model for an observational IPD trial")
    p.add_argument("--joint-weights", action="store_true", dest="joint_weights")
    p.add_argument("--sigma-correction", action="store_true", dest="sigma_correction",
                   help="subtract within-trial sampling covariance from Sigma")
    p.add_argument("--no-require-variances", action="store_true", dest="no_require_variances")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="output path stem; writes .json and .txt")
    p.add_argument("--format", choices=["text", "json"], default="text")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adweight", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_fit_args(sub.add_parser("fit", help="fit the model to IPD and AD inputs"))
    _add_fit_args(sub.add_parser("validate", help="check input schemas only"))
    sim = sub.add_parser("simulate", help="Monte Carlo study of the five-trial design")
    sim.add_argument("--config", help="YAML DGP config")
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--strategy", choices=["A", "B"])
    sim.add_argument("--pooling", choices=["size", "equal"])
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--output")
    sim.add_argument("--format", choices=["text", "json"], default="text")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"fit": _cmd_fit, "validate": _cmd_validate, "simulate": _cmd_simulate}[args.command]
    try:
        return handler(args)
    except AdweightError as exc:
        print(json.dumps({"error": exc.to_dict()}), file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        print(json.dumps({"error": {"category": "schema", "module": "cli", "message": str(exc)}}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
