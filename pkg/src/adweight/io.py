"""Reading and writing trial data.

IPD files are delimited text with a header row: a study column, an arm
column, an outcome column, then covariates.  AD files are YAML (or JSON)
documents with one entry per trial::

    covariates: [age, pasi0, men]
    trials:
      - study: 1
        arms:
          treated: {n: 39, y_mean: 0.487, means: {...}, variances: {...}}
          control: {n: 41, y_mean: 0.122, means: {...}, variances: {...}}
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import yaml

from .errors import SchemaError
from .ipd import IpdTrial
from .weights import AdArm, AdSummary

STUDY_ALIASES = ("study", "trial", "s")
ARM_ALIASES = ("arm", "treat", "treatment", "x")
OUTCOME_ALIASES = ("outcome", "y")
ARM_KEYS = {"treated": 1, "treatment": 1, "1": 1, 1: 1, "control": 0, "0": 0, 0: 0}


def _find(columns, aliases, what, path) -> str:
    lower = {c.lower(): c for c in columns}
    for a in aliases:
        if a in lower:
            return lower[a]
    raise SchemaError(f"{path}: missing {what} column (expected one of {', '.join(aliases)})")


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def ingest_ipd(path, covariates: Sequence[str] | None = None, *, sep: str | None = None) -> list[IpdTrial]:
    """Parse an IPD file into one :class:`IpdTrial` per study.

    ``covariates`` selects and orders covariate columns; by default every
    column after study, arm and outcome is used, in file order.
    """
    path = Path(path)
    if sep is None:
        sep = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    try:
        df = pd.read_csv(path, sep=sep, skipinitialspace=True, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise SchemaError(f"{path}: cannot read ({exc})") from exc
    df.columns = [str(c).strip() for c in df.columns]
    study_col = _find(df.columns, STUDY_ALIASES, "study", path)
    arm_col = _find(df.columns, ARM_ALIASES, "arm", path)
    y_col = _find(df.columns, OUTCOME_ALIASES, "outcome", path)
    rest = [c for c in df.columns if c not in (study_col, arm_col, y_col)]
    if covariates is None:
        covariates = rest
    else:
        missing = [c for c in covariates if c not in df.columns]
        if missing:
            raise SchemaError(f"{path}: missing covariate columns {missing}")
    covariates = list(covariates)
    if not covariates:
        raise SchemaError(f"{path}: no covariate columns")

    for col in [arm_col, y_col]:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = ~vals.isin([0, 1])
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(f"{path}: row {i + 1}, column {col!r}: value {df[col].iloc[i]!r} is not 0 or 1")
    for col in covariates:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna() | ~np.isfinite(vals.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(f"{path}: row {i + 1}, column {col!r}: missing or non-numeric value {df[col].iloc[i]!r}")
    if df[study_col].isna().any():
        i = int(np.flatnonzero(df[study_col].isna().to_numpy())[0])
        raise SchemaError(f"{path}: row {i + 1}, column {study_col!r}: missing study id")

    trials = []
    for study, g in df.groupby(study_col, sort=False):
        x = g[arm_col].astype(int).to_numpy()
        for arm in (0, 1):
            if not (x == arm).any():
                raise SchemaError(f"{path}: study {study}: arm {arm} is empty")
        trials.append(IpdTrial(_plain(study), x, g[y_col].astype(int).to_numpy(),
                               g[covariates].to_numpy(dtype=float), tuple(covariates)))
    return trials


def summarize_ipd(trials: Sequence[IpdTrial]) -> list[dict]:
    """Row counts per arm, for reporting after ingestion."""
    return [{"study": t.study, "n": t.n, "n_treated": t.n_arm(1), "n_control": t.n_arm(0)} for t in trials]


def _load_doc(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc})") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: malformed document ({exc})") from exc


def _floats(d, where) -> dict:
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: expected a mapping")
    out = {}
    for k, v in d.items():
        try:
            out[str(k)] = float(v)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: value of {k!r} is not a number") from exc
    return out


def _arm(block, where, require_variances, covariates) -> AdArm:
    if not isinstance(block, dict):
        raise SchemaError(f"{where}: arm block must be a mapping")
    for key in ("n", "y_mean", "means"):
        if key not in block:
            raise SchemaError(f"{where}: missing field {key!r}")
    n = block["n"]
    if isinstance(n, bool) or not isinstance(n, (int, float)) or int(n) != n:
        raise SchemaError(f"{where}: count must be an integer")
    means = _floats(block["means"], f"{where}.means")
    variances = block.get("variances")
    if variances is None:
        if require_variances:
            raise SchemaError(f"{where}: missing field 'variances'")
    else:
        variances = _floats(variances, f"{where}.variances")
    if covariates is not None:
        extra = set(means) - set(covariates)
        if extra:
            raise SchemaError(f"{where}: covariates {sorted(extra)} are not declared")
    sub = block.get("subgroup_y_mean")
    if sub is not None:
        sub = {int(k): float(v) for k, v in sub.items()}
    return AdArm(int(n), means, variances, float(block["y_mean"]), _floats(block.get("moments", {}), f"{where}.moments"),
                 sub)


def ingest_ad(path, covariates: Sequence[str] | None = None, *, require_variances: bool = True) -> list[AdSummary]:
    """Parse an AD document into :class:`AdSummary` objects.

    ``covariates`` (e.g. from the IPD files) must match each trial's
    covariate set when given.  Arm probabilities come from the counts
    unless a trial sets ``arm_probability``.
    """
    path = Path(path)
    doc = _load_doc(path)
    if isinstance(doc, list):
        doc = {"trials": doc}
    if not isinstance(doc, dict) or "trials" not in doc:
        raise SchemaError(f"{path}: expected a 'trials' list")
    declared = doc.get("covariates")
    out = []
    for t, entry in enumerate(doc["trials"]):
        where = f"{path}: trial #{t + 1}"
        if not isinstance(entry, dict) or "study" not in entry or "arms" not in entry:
            raise SchemaError(f"{where}: needs 'study' and 'arms'")
        study = entry["study"]
        where = f"{path}: trial {study}"
        arms = {}
        for key, block in entry["arms"].items():
            x = ARM_KEYS.get(key if not isinstance(key, str) else key.lower())
            if x is None:
                raise SchemaError(f"{where}: unknown arm {key!r} (use treated/control or 1/0)")
            arms[x] = _arm(block, f"{where}, arm {key}", require_variances, declared)
        names = entry.get("covariates", declared)
        if names is None:
            names = list(arms[1].means) if 1 in arms else []
        names = tuple(names)
        if covariates is not None and set(names) != set(covariates):
            raise SchemaError(f"{where}: covariates {sorted(names)} do not match the IPD covariates "
                              f"{sorted(covariates)}")
        if covariates is not None:
            names = tuple(covariates)
        sub_cov = sub_frac = None
        if "subgroup" in entry:
            sub = entry["subgroup"]
            sub_cov = sub["covariate"]
            sub_frac = {int(k): float(v) for k, v in sub["fraction"].items()}
        out.append(AdSummary(study, names, arms, entry.get("arm_probability"), sub_cov, sub_frac))
    return out


def ad_to_dict(ads: Sequence[AdSummary]) -> dict:
    trials = []
    for a in ads:
        arms = {}
        for x, name in ((1, "treated"), (0, "control")):
            arm = a.arms[x]
            block = {"n": arm.n, "y_mean": arm.y_mean, "means": dict(arm.means)}
            if arm.variances is not None:
                block["variances"] = dict(arm.variances)
            if arm.moments:
                block["moments"] = dict(arm.moments)
            if arm.subgroup_y_mean is not None:
                block["subgroup_y_mean"] = {int(k): v for k, v in arm.subgroup_y_mean.items()}
            arms[name] = block
        entry = {"study": _plain(a.study), "covariates": list(a.covariate_names), "arms": arms}
        if a.arm_probability is not None:
            entry["arm_probability"] = a.arm_probability
        if a.subgroup_covariate is not None:
            entry["subgroup"] = {"covariate": a.subgroup_covariate,
                                 "fraction": {int(k): v for k, v in a.subgroup_fraction.items()}}
        trials.append(entry)
    return {"trials": trials}


def write_ad(ads: Sequence[AdSummary], path) -> None:
    """Write summaries as YAML, or JSON when the suffix is ``.json``."""
    path = Path(path)
    doc = ad_to_dict(ads)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(doc, indent=2))
    else:
        path.write_text(yaml.safe_dump(doc, sort_keys=False))


def write_ipd(trials: Sequence[IpdTrial], path) -> None:
    frames = []
    for t in trials:
        df = pd.DataFrame(t.L, columns=list(t.covariate_names))
        df.insert(0, "outcome", t.y.astype(int))
        df.insert(0, "arm", t.x.astype(int))
        df.insert(0, "study", t.study)
        frames.append(df)
    pd.concat(frames).to_csv(path, index=False, float_format="%.17g")
