"""Hyperparameter sweeps over task groups, joint evaluation and trend reports."""
from __future__ import annotations

import concurrent.futures as cf
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from . import bounds, tasks
from .merging import MergeSpec, apply_merge, normalized_merge
from .params import MergeCoefficients
from .stability import replicate_seed
from .trainer import DivergenceError, FinetuneConfig, finetune

AXES = ("steps", "batch", "lr", "data_ratio", "num_tasks")
CSV_COLUMNS = ("axis_value", "method", "loss_mean", "loss_se", "acc_mean", "acc_se", "bound_total")
COLLAPSE_LOSS = 1e6
REGRESSION_HIT_TOL = 0.5
# the gap only feeds the optimization term; a capped L-BFGS run is close enough
SWEEP_ORACLE_ITERS = 300


@dataclass(frozen=True)
class SweepManifest:
    family: tasks.FamilyManifest
    base_config: FinetuneConfig
    axis: str
    axis_values: tuple
    merge_specs: tuple
    replicate_groups: int = 15
    seed: int = 0
    group_size: int = 8
    resample_groups: bool = True
    test_m: int = 2000
    probe_radius: float = bounds.DEFAULT_RADIUS
    probe_count: int = bounds.DEFAULT_PROBES
    sigma_m: Optional[int] = 1000
    C: float = bounds.DEFAULT_C
    zeta_coeff: int = 12

    def __post_init__(self):
        if isinstance(self.family, dict):
            object.__setattr__(self, "family", tasks.FamilyManifest.from_dict(self.family))
        if isinstance(self.base_config, dict):
            object.__setattr__(self, "base_config", FinetuneConfig.from_dict(self.base_config))
        specs = tuple(s if isinstance(s, MergeSpec) else MergeSpec.from_dict(s) for s in self.merge_specs)
        object.__setattr__(self, "merge_specs", specs)
        object.__setattr__(self, "axis_values", tuple(self.axis_values))
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}; expected one of {AXES}")
        if not self.axis_values:
            raise ValueError("axis_values must be nonempty")
        if list(self.axis_values) != sorted(self.axis_values):
            raise ValueError("axis_values must be sorted ascending")
        if self.replicate_groups < 1:
            raise ValueError("replicate_groups must be >= 1")
        if not specs:
            raise ValueError("need at least one merge spec")
        if self.axis == "num_tasks" and max(self.axis_values) > self.family.N:
            raise ValueError("num_tasks values exceed the task pool")
        if self.axis != "num_tasks" and self.group_size > self.family.N:
            raise ValueError("group_size exceeds the task pool")
        if self.test_m < 1:
            raise ValueError("test_m must be >= 1")

    def to_dict(self) -> dict:
        return {
            "family": self.family.to_dict(),
            "base_config": self.base_config.to_dict(),
            "axis": self.axis,
            "axis_values": list(self.axis_values),
            "merge_specs": [s.to_dict() for s in self.merge_specs],
            "replicate_groups": self.replicate_groups,
            "seed": self.seed,
            "group_size": self.group_size,
            "resample_groups": self.resample_groups,
            "test_m": self.test_m,
            "probe_radius": self.probe_radius,
            "probe_count": self.probe_count,
            "sigma_m": self.sigma_m,
            "C": self.C,
            "zeta_coeff": self.zeta_coeff,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepManifest":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown sweep manifest fields: {sorted(extra)}")
        return cls(**d)

    def with_seed(self, seed: int) -> "SweepManifest":
        d = self.to_dict()
        d["seed"] = seed
        d["family"]["seed"] = seed
        return SweepManifest.from_dict(d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def evaluate_joint(x, envs, test_m: int, seed: int, tol: float = REGRESSION_HIT_TOL):
    """Mean loss and accuracy over equal-size fresh test draws from every task.

    Accuracy is top-1 for classification and the fraction of absolute
    residuals within ``tol`` for regression.
    """
    if test_m < 1:
        raise ValueError("test_m must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    losses, hits = [], []
    for e in envs:
        X, y = tasks.fresh_samples(e, tasks.TEST, test_m, seed)
        fam = e.family
        losses.append(fam.losses(x, X, y))
        if e.distribution.family == "least-squares":
            hits.append(np.abs(X @ x - y) <= tol)
        else:
            hits.append(np.argmax(fam.logits(x, X), axis=1) == y)
    return float(np.mean(np.concatenate(losses))), float(np.mean(np.concatenate(hits)))


def _cell_config(m: SweepManifest, v, g: int, task_id: int) -> FinetuneConfig:
    cfg = m.base_config
    if m.axis == "steps":
        cfg = cfg.with_(K=int(v))
    elif m.axis == "batch":
        cfg = cfg.with_(b=int(v))
    elif m.axis == "lr":
        sch = cfg.schedule
        key = "eta0" if sch.kind == "exp-decay" else "eta"
        params = dict(sch.params)
        params[key] = float(v)
        cfg = cfg.with_(schedule=type(sch)(sch.kind, params))
    elif m.axis == "data_ratio":
        cfg = cfg.with_(data_ratio=float(v))
    return cfg.with_(seed=replicate_seed(m.seed, g, task_id))


def _members(m: SweepManifest, g: int, v) -> list[int]:
    size = int(v) if m.axis == "num_tasks" else m.group_size
    if not m.resample_groups:
        return list(range(size))
    perm = np.random.default_rng([int(m.seed), 0x6A, g]).permutation(m.family.N)
    # nested groups across the N axis: a prefix of one permutation
    return sorted(int(i) for i in perm[:size])


def _bound_lambdas(spec: MergeSpec, results, base):
    if spec.method == "normalized":
        return normalized_merge(base, results)[1].lambdas
    return MergeCoefficients.uniform(len(results))


def _run_group(m: SweepManifest, g: int) -> list[dict]:
    pool = tasks.tasks_from_manifest(m.family)
    x0 = tasks.pretrained_base(m.family)
    rows = []
    profiles: dict = {}
    gaps: dict = {}
    for v in m.axis_values:
        ids = _members(m, g, v)
        envs = [pool[i] for i in ids]
        cfgs = [_cell_config(m, v, g, i) for i in ids]
        try:
            results = [finetune(x0, e, c) for e, c in zip(envs, cfgs)]
        except DivergenceError as exc:
            for spec in m.merge_specs:
                rows.append(_collapsed_row(v, spec, g, f"fine-tune diverged at step {exc.step}"))
            continue
        key = tuple(ids)
        if key not in profiles:
            profiles[key] = bounds.probed_profile(envs, x0, m.probe_radius, m.probe_count,
                                                  replicate_seed(m.seed, g, 0xF0), m.sigma_m)
        ratio = cfgs[0].data_ratio
        used = [e.prefix(c.n_used(e.n)) for e, c in zip(envs, cfgs)]
        for spec in m.merge_specs:
            merged = apply_merge(spec, x0, results, envs)
            loss, acc = evaluate_joint(merged, envs, m.test_m, replicate_seed(m.seed, g, 0x7E))
            if not math.isfinite(loss) or loss > COLLAPSE_LOSS:
                rows.append(_collapsed_row(v, spec, g, "merged model collapsed"))
                continue
            lam = _bound_lambdas(spec, results, x0)
            gkey = (key, ratio, tuple(lam.weights.tolist()))
            if gkey not in gaps:
                gaps[gkey] = bounds.f0_gap(used, x0, lam, max_iter=SWEEP_ORACLE_ITERS)[0]
            inp = bounds.BoundInputs(
                profile=profiles[key],
                n=tuple(c.n_used(e.n) for e, c in zip(envs, cfgs)),
                b=tuple(c.b for c in cfgs),
                K=tuple(c.K for c in cfgs),
                lambdas=lam,
                eta_l=cfgs[0].schedule.eta_ref,
                C=m.C,
                f0_gap=gaps[gkey],
                zeta_coeff=m.zeta_coeff,
                f0_gap_estimated=True,
            )
            bd = bounds.excess_bound(inp)
            rows.append({
                "axis_value": v,
                "method": spec.method,
                "group": g,
                "collapsed": False,
                "loss": loss,
                "acc": acc,
                "bound_total": bd.total,
                "stability_term": bd.stability_term,
                "stability_component": bd.stability_component,
                "eps_sgd": bd.eps_sgd,
                "bound_digest": hashlib.sha256(bd.to_json().encode()).hexdigest()[:16],
            })
    return rows


def _collapsed_row(v, spec, g, reason):
    return {"axis_value": v, "method": spec.method, "group": g, "collapsed": True, "reason": reason}


def _mean_se(vals):
    a = np.asarray(vals, dtype=np.float64)
    if a.size == 0:
        return None, None
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), se


def aggregate(m: SweepManifest, rows: list[dict]) -> list[dict]:
    cells = []
    for v in m.axis_values:
        for spec in m.merge_specs:
            sel = [r for r in rows if r["axis_value"] == v and r["method"] == spec.method]
            ok = [r for r in sel if not r["collapsed"]]
            lm, ls = _mean_se([r["loss"] for r in ok])
            am, as_ = _mean_se([r["acc"] for r in ok])
            cell = {
                "axis_value": v,
                "method": spec.method,
                "loss_mean": lm,
                "loss_se": ls,
                "acc_mean": am,
                "acc_se": as_,
                "bound_total": _mean_se([r["bound_total"] for r in ok])[0],
                "stability_term": _mean_se([r["stability_term"] for r in ok])[0],
                "stability_component": _mean_se([r["stability_component"] for r in ok])[0],
                "eps_sgd": _mean_se([r["eps_sgd"] for r in ok])[0],
                "groups": len(ok),
                "collapsed": len(sel) - len(ok),
            }
            cells.append(cell)
    return cells


def run_sweep(m: SweepManifest, jobs: int = 1) -> dict:
    groups = range(m.replicate_groups)
    if jobs > 1:
        with cf.ProcessPoolExecutor(max_workers=jobs) as ex:
            per_group = list(ex.map(_run_group, [m] * m.replicate_groups, groups))
    else:
        per_group = [_run_group(m, g) for g in groups]
    rows = [r for grp in per_group for r in grp]
    cells = aggregate(m, rows)
    total = len(rows)
    collapsed = sum(r["collapsed"] for r in rows)
    report = {
        "manifest": m.to_dict(),
        "config_digest": m.digest(),
        "cells": cells,
        "rows": rows,
        "collapsed_cells": collapsed,
        "total_cells": total,
        "collapsed_fraction": collapsed / total if total else 0.0,
    }
    if len(m.axis_values) >= 3:
        report["trend"] = trend_report(report)
    return report


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


def _spearman(a, b):
    if len(set(a)) < 2 or len(set(b)) < 2:
        return "flat"
    return float(stats.spearmanr(a, b).statistic)


def trend_report(report: dict) -> dict:
    """Ordinal agreement between bound and loss along the swept axis, per method."""
    cells = report["cells"]
    values = sorted({c["axis_value"] for c in cells})
    if len(values) < 3:
        raise ValueError("trend report needs at least 3 axis values")
    out = {}
    for method in sorted({c["method"] for c in cells}):
        sel = [c for c in cells if c["method"] == method and c["loss_mean"] is not None]
        sel.sort(key=lambda c: c["axis_value"])
        xs = [c["axis_value"] for c in sel]
        loss = [c["loss_mean"] for c in sel]
        bound = [c["bound_total"] for c in sel]
        pairs, disagree = 0, []
        for k in range(len(sel) - 1):
            sl = _sign(loss[k + 1] - loss[k])
            sb = _sign(bound[k + 1] - bound[k])
            pairs += 1
            if sl != sb:
                disagree.append([xs[k], xs[k + 1]])
        out[method] = {
            "axis_values": xs,
            "sign_agreement": (pairs - len(disagree)) / pairs if pairs else "flat",
            "spearman_bound_loss": _spearman(bound, loss),
            "spearman_axis_loss": _spearman(xs, loss),
            "disagreements": disagree,
        }
    return out


def report_csv_rows(report: dict) -> list[list]:
    rows = []
    for c in report["cells"]:
        rows.append(["" if c[k] is None else c[k] for k in CSV_COLUMNS])
    return rows


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, NaN/inf as strings."""

    def fix(o):
        if isinstance(o, float):
            if math.isnan(o):
                return None
            if math.isinf(o):
                return "unbounded"
            return o
        if isinstance(o, dict):
            return {k: fix(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [fix(v) for v in o]
        if isinstance(o, np.generic):
            return fix(o.item())
        return o

    return json.dumps(fix(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"
