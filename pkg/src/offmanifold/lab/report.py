"""Regime classification, report files, and rank-trend checks."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .. import __version__
from .config import config_hash

HEADER = ["objective", "param", "seed", "test_acc", "s_on", "s_off", "rho1", "rho2", "oracle_cos", "regime"]
NUMERIC = ["test_acc", "s_on", "s_off", "rho1", "rho2", "oracle_cos"]
FAILED = "Failed"


class Regime(str, Enum):
    WEAK = "Weak"
    BAYES_ALIGNED = "BayesAligned"
    EXCESSIVE = "Excessive"


@dataclass(frozen=True)
class Thresholds:
    max_acc: float
    delta_acc: float = 0.05


def _field(row: Mapping, key: str) -> float:
    if key not in row or row[key] is None:
        raise ValueError(f"missing field '{key}'")
    v = float(row[key])
    if not math.isfinite(v):
        raise ValueError(f"missing field '{key}' (not a finite number)")
    return v


def classify_regime(row: Mapping, thresholds: Thresholds) -> Regime:
    """Weak when not relatively off-manifold robust; otherwise split by accuracy against the sweep maximum."""
    s_on, s_off, acc = _field(row, "s_on"), _field(row, "s_off"), _field(row, "test_acc")
    if s_off >= s_on:
        return Regime.WEAK
    if acc >= (1.0 - thresholds.delta_acc) * thresholds.max_acc:
        return Regime.BAYES_ALIGNED
    return Regime.EXCESSIVE


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if not math.isfinite(v) else format(v, ".12g")


def _jsonable(v):
    if isinstance(v, float):
        return v if math.isfinite(v) else None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    return v


def build_rows(results, delta_acc: float) -> tuple[list[dict], float]:
    ok = [r for r in results if r.status == "ok"]
    accs = [r.row["test_acc"] for r in ok]
    max_acc = max(accs) if accs else float("nan")
    th = Thresholds(max_acc, delta_acc)
    rows = []
    for r in results:
        row = {"objective": r.point.objective, "param": r.point.param, "seed": r.point.seed}
        if r.status == "ok":
            row.update(r.row)
            try:
                row["regime"] = classify_regime(row, th).value
            except ValueError:
                row["regime"] = FAILED
        else:
            row.update({k: float("nan") for k in NUMERIC})
            row["regime"] = FAILED
        rows.append(row)
    return rows, max_acc


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in HEADER])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != HEADER:
            raise ValueError(f"unexpected report header {header}")
        rows = []
        for rec in reader:
            row = dict(zip(header, rec))
            row["param"] = float(row["param"])
            row["seed"] = int(row["seed"])
            for k in NUMERIC:
                row[k] = float(row[k])
            rows.append(row)
    return rows


def write(out: Path, cfg: dict, meta: dict, results, preset: str | None = None) -> list[dict]:
    """Single writer for report.csv, report.json and gradients.csv."""
    delta = float(cfg["regimes"]["delta_acc"])
    rows, max_acc = build_rows(results, delta)
    (out / "report.csv").write_text(rows_to_csv(rows))

    runs, grads = [], []
    for r, row in zip(results, rows):
        runs.append({"index": r.point.index, **{k: row[k] for k in HEADER}, "status": r.status,
                     "error": r.error, "extras": r.extras, "history": r.history})
        grads.append({"index": r.point.index, "objective": r.point.objective, "param": r.point.param,
                      "seed": r.point.seed, "gradients": r.gradients})
    doc = {
        "software_version": __version__,
        "config_hash": config_hash(cfg),
        "preset": preset,
        "data": meta,
        "seeds": cfg["grid"]["seeds"],
        "thresholds": {"delta_acc": delta, "max_accuracy": max_acc},
        "alignment_peaks": alignment_peaks(rows),
        "config": cfg,
        "runs": runs,
        "gradient_dumps": {"selector": "predicted class, pre-softmax logit", "runs": grads},
    }
    (out / "report.json").write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = max((len(g[0]) for g in (r.gradients for r in results) if g), default=0)
    w.writerow(["objective", "param", "seed", "point"] + [f"g_{i}" for i in range(dim)])
    for r in results:
        for j, g in enumerate(r.gradients):
            w.writerow([r.point.objective, _fmt(r.point.param), r.point.seed, j] + [_fmt(v) for v in g])
    (out / "gradients.csv").write_text(buf.getvalue())
    return rows


# checks


@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    bound: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: measured {self.measured:.6g} (required {self.bound})"


def consistency_problems(rows: Sequence[Mapping], delta_acc: float = 0.05) -> list[str]:
    """Rows whose stored regime disagrees with classify_regime on their own fields."""
    ok = [r for r in rows if r["regime"] != FAILED]
    if not ok:
        return []
    th = Thresholds(max(float(r["test_acc"]) for r in ok), delta_acc)
    problems = []
    for i, r in enumerate(rows):
        if r["regime"] == FAILED:
            continue
        want = classify_regime(r, th).value
        if want != r["regime"]:
            problems.append(f"row {i}: stored {r['regime']}, fields give {want}")
    return problems


def _by_objective(rows):
    groups: dict[str, list] = {}
    for r in rows:
        if r["regime"] != FAILED:
            groups.setdefault(r["objective"], []).append(r)
    return groups


def _spearman(x, y) -> float:
    if len(set(x)) < 2 or len(set(y)) < 2:
        return 0.0
    return float(spearmanr(x, y).statistic)


def per_param_means(rows, key: str) -> tuple[list[float], list[float]]:
    params = sorted({r["param"] for r in rows})
    means = [float(np.mean([r[key] for r in rows if r["param"] == p])) for p in params]
    return params, means


def trend_checks(rows: Sequence[Mapping], objectives: Sequence[str] | None = None) -> list[Check]:
    """Rank trends of a regularization sweep, on rows pooled over seeds.

    s_off must fall with the regularization strength; s_on must stay flat over
    the lower half of the grid and fall over the upper half; accuracy at the
    strongest setting must drop at least 0.1 below the sweep maximum.
    """
    checks = []
    groups = _by_objective(rows)
    all_ok = [r for r in rows if r["regime"] != FAILED]
    max_acc = max(r["test_acc"] for r in all_ok)
    for name in objectives or sorted(groups):
        g = groups.get(name, [])
        params = sorted({r["param"] for r in g})
        if len(params) < 4:
            checks.append(Check(f"{name}: grid size", len(params), ">= 4", False))
            continue
        half = len(params) // 2
        low = [r for r in g if r["param"] in params[:half]]
        high = [r for r in g if r["param"] in params[-half:]]
        rho_off = _spearman([r["param"] for r in g], [r["s_off"] for r in g])
        rho_low = _spearman([r["param"] for r in low], [r["s_on"] for r in low])
        rho_high = _spearman([r["param"] for r in high], [r["s_on"] for r in high])
        acc_top = float(np.mean([r["test_acc"] for r in g if r["param"] == params[-1]]))
        checks += [
            Check(f"{name}: spearman(s_off, param)", rho_off, "<= -0.8", rho_off <= -0.8),
            Check(f"{name}: spearman(s_on, param) lower half", rho_low, "within [-0.3, 0.3]", abs(rho_low) <= 0.3),
            Check(f"{name}: spearman(s_on, param) upper half", rho_high, "<= -0.5", rho_high <= -0.5),
            Check(f"{name}: accuracy drop at largest param", max_acc - acc_top, ">= 0.1", max_acc - acc_top >= 0.1),
        ]
    return checks


def alignment_checks(rows: Sequence[Mapping], objective: str = "gradnorm", min_gain: float = 0.1) -> list[Check]:
    """Mean oracle cosine rises from the first grid value to an interior maximum, then falls."""
    g = [r for r in _by_objective(rows).get(objective, []) if math.isfinite(r["oracle_cos"])]
    if not g:
        return [Check(f"{objective}: oracle cosine available", 0, "> 0 rows", False)]
    params, cos = per_param_means(g, "oracle_cos")
    k = int(np.argmax(cos))
    gain = cos[k] - cos[0]
    return [
        Check(f"{objective}: cosine peak is interior (index {k} of {len(cos)})", k,
              f"in [1, {len(cos) - 2}]", 0 < k < len(cos) - 1),
        Check(f"{objective}: cosine gain from first to peak", gain, f">= {min_gain}", gain >= min_gain),
        Check(f"{objective}: cosine drop from peak to last", cos[k] - cos[-1], "> 0", cos[-1] < cos[k]),
    ]


def alignment_peaks(rows: Sequence[Mapping]) -> dict:
    """Per objective, the grid value with the highest mean oracle cosine and its regime mix.

    Reported next to the regime labels; the two are not conflated.
    """
    out = {}
    for name, g in sorted(_by_objective(rows).items()):
        g = [r for r in g if math.isfinite(r["oracle_cos"])]
        if not g:
            continue
        params, cos = per_param_means(g, "oracle_cos")
        k = int(np.argmax(cos))
        regimes = sorted(r["regime"] for r in g if r["param"] == params[k])
        out[name] = {"param": params[k], "mean_oracle_cos": cos[k], "regimes": regimes}
    return out


def summary(rows: Sequence[Mapping]) -> str:
    lines = [f"{'objective':<11} {'param':>9} {'acc':>6} {'s_on':>9} {'s_off':>9} {'rho2':>7} {'cos':>6}  regime"]
    for name, g in _by_objective(rows).items():
        for p in sorted({r["param"] for r in g}):
            sel = [r for r in g if r["param"] == p]
            mean = {k: float(np.mean([r[k] for r in sel])) for k in NUMERIC}
            reg = ",".join(sorted({r["regime"] for r in sel}))
            lines.append(f"{name:<11} {p:>9.4g} {mean['test_acc']:>6.3f} {mean['s_on']:>9.4g} "
                         f"{mean['s_off']:>9.4g} {mean['rho2']:>7.3f} {mean['oracle_cos']:>6.3f}  {reg}")
    return "\n".join(lines)
