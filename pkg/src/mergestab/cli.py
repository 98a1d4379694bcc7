"""Command-line front end: ``mergestab <subcommand> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 divergence or a sweep
in which more than half the cells collapsed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import bounds, stability, sweep, tasks
from .merging import MergeSpec, apply_merge
from .params import ParamFormatError, read_params, write_params
from .trainer import DivergenceError, FinetuneConfig, finetune, load_result

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _family(d: dict, seed=None) -> tasks.FamilyManifest:
    m = tasks.FamilyManifest.from_dict(d)
    return m.replace(seed=seed) if seed is not None else m


def cmd_gen_tasks(a) -> int:
    m = _family(_load_json(a.manifest), a.seed)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(m.to_json() + "\n")
    envs = tasks.tasks_from_manifest(m)
    write_params(tasks.pretrained_base(m), out / "base.mrgl")
    summary = []
    for e in envs:
        ref = {"manifest": "manifest.json", "task_id": e.task_id}
        (out / f"task_{e.task_id}.json").write_text(json.dumps(ref, sort_keys=True, indent=2) + "\n")
        summary.append({"task_id": e.task_id, "n": e.n})
    sys.stdout.write(sweep.dumps({"family": m.family, "dim": m.loss_family().dim, "tasks": summary}))
    return EXIT_OK


def _task_env(path):
    ref = _load_json(path)
    m = tasks.FamilyManifest.from_dict(_load_json(Path(path).parent / ref["manifest"]))
    i = int(ref["task_id"])
    if not 0 <= i < m.N:
        raise ValueError(f"task_id {i} out of range for N={m.N}")
    return m, tasks.tasks_from_manifest(m)[i]


def cmd_finetune(a) -> int:
    m, env = _task_env(a.task)
    d = _load_json(a.config)
    if a.seed is not None:
        d["seed"] = a.seed
    cfg = FinetuneConfig.from_dict(d)
    base = read_params(a.base) if a.base else tasks.pretrained_base(m)
    res = finetune(base, env, cfg)
    res.save(a.output)
    sys.stdout.write(sweep.dumps({"output": str(a.output), "batch_index_sha256": res.log_digest(),
                                  "final_norm": float(np.linalg.norm(res.final))}))
    return EXIT_OK


def cmd_merge(a) -> int:
    d = _load_json(a.spec)
    if a.seed is not None:
        d["seed"] = a.seed
    spec = MergeSpec.from_dict(d)
    base = read_params(a.base)
    if spec.method == "normalized":
        experts = [load_result(p) for p in a.experts]
    else:
        experts = [read_params(p) for p in a.experts]
    envs = [_task_env(t)[1] for t in a.tasks] if a.tasks else None
    merged = apply_merge(spec, base, experts, envs)
    write_params(merged, a.output)
    sys.stdout.write(sweep.dumps({"output": str(a.output), "method": spec.method, "experts": len(experts)}))
    return EXIT_OK


def cmd_bound(a) -> int:
    inp = bounds.BoundInputs.from_dict(_load_json(a.inputs))
    bd = bounds.excess_bound(inp)
    d = bd.to_dict()
    d["stability_bound"] = bounds.stability_bound(inp)
    d["original_grad_bound"] = bounds.original_grad_bound(inp)
    _emit(sweep.dumps(d), a.output)
    if a.csv:
        _write_csv(a.csv, ["quantity", "value"], [[k, "" if v is None else v] for k, v in sorted(d.items())])
    return EXIT_OK


def _suite_configs(s, N):
    cfg = s["config"]
    if isinstance(cfg, list):
        if len(cfg) != N:
            raise ValueError("need one config per task")
        return [FinetuneConfig.from_dict(c) for c in cfg]
    return [FinetuneConfig.from_dict(cfg)] * N


def cmd_stability(a) -> int:
    s = _load_json(a.suite)
    known = {"family", "config", "mode", "task", "merge", "replicates", "seed", "gamma_grid", "draws", "fresh_m", "radius"}
    extra = set(s) - known
    if extra:
        raise ValueError(f"unknown suite fields: {sorted(extra)}")
    seed = a.seed if a.seed is not None else int(s.get("seed", 0))
    m = _family(s["family"], a.seed)
    envs = tasks.tasks_from_manifest(m)
    x0 = tasks.pretrained_base(m)
    cfgs = _suite_configs(s, len(envs))
    mode = s.get("mode", "global")
    reps = int(s.get("replicates", 50))
    radius = float(s.get("radius", bounds.DEFAULT_RADIUS))
    if m.family == "least-squares":
        prof = bounds.closed_form_profile(envs, x0, radius)
    else:
        prof = bounds.probed_profile(envs, x0, radius, seed=seed)
    out = {"config_digest": _digest(s, seed), "mode": mode}
    if mode == "local":
        i = int(s.get("task", 0))
        est = stability.empirical_local_stability(x0, envs[i], cfgs[i], reps, seed)
        bound = bounds.local_stability_bound(cfgs[i].K, cfgs[i].schedule.eta_ref, prof.sigma_sq[i],
                                             prof.zeta_sq[i], cfgs[i].n_used(envs[i].n), cfgs[i].b)
        out.update(estimate=est.eps_sq, ci=est.ci_halfwidth, bound_value=bound,
                   pass_rate=float(np.mean(np.asarray(est.samples) <= bound)), per_task=est.per_task)
    elif mode == "global":
        spec = MergeSpec.from_dict(s.get("merge", {"method": "uniform"}))
        est = stability.empirical_global_stability(x0, envs, cfgs, spec, reps, seed)
        inp = bounds.bound_inputs_for(envs, cfgs, [1.0 / len(envs)] * len(envs), prof, estimate_gap=False)
        bound = bounds.stability_bound(inp)
        out.update(estimate=est.eps_sq, ci=est.ci_halfwidth, bound_value=bound,
                   pass_rate=float(np.mean(np.asarray(est.samples) <= bound)), per_task=est.per_task,
                   cache_ok=est.cache_ok)
    elif mode == "lemma":
        spec = MergeSpec.from_dict(s.get("merge", {"method": "uniform"}))
        grid = [float(g) for g in s.get("gamma_grid", [0.1, 1.0, 10.0])]
        rep = stability.lemma_audit(x0, envs, cfgs, spec, grid, reps, seed, draws=int(s.get("draws", 1)),
                                    fresh_m=int(s.get("fresh_m", stability.DEFAULT_FRESH_M)), L=prof.L)
        out.update(estimate=rep.gen_gap, bound_value=rep.rhs_at_gamma_star, pass_rate=float(rep.holds),
                   lemma=rep.to_dict())
    else:
        raise ValueError(f"unknown stability mode {mode!r}")
    _emit(sweep.dumps(out), a.output)
    if a.csv:
        keys = ["mode", "estimate", "ci", "bound_value", "pass_rate"]
        _write_csv(a.csv, keys, [[out.get(k, "") for k in keys]])
    return EXIT_OK


def _digest(obj, seed) -> str:
    return hashlib.sha256(json.dumps({"suite": obj, "seed": seed}, sort_keys=True).encode()).hexdigest()[:16]


def cmd_sweep(a) -> int:
    m = sweep.SweepManifest.from_dict(_load_json(a.manifest))
    if a.seed is not None:
        m = m.with_seed(a.seed)
    report = sweep.run_sweep(m, jobs=a.jobs)
    _emit(sweep.dumps(report), a.output)
    if a.csv:
        _write_csv(a.csv, sweep.CSV_COLUMNS, sweep.report_csv_rows(report))
    if report["collapsed_fraction"] > 0.5:
        print(f"sweep collapsed in {report['collapsed_cells']} of {report['total_cells']} cells", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_report(a) -> int:
    report = _load_json(a.report)
    if "cells" not in report:
        raise ValueError(f"{a.report} is not a sweep report")
    _write_csv(a.csv, sweep.CSV_COLUMNS, sweep.report_csv_rows(report))
    if a.output or len(sorted({c["axis_value"] for c in report["cells"]})) >= 3:
        _emit(sweep.dumps(sweep.trend_report(report)), a.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mergestab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=None, help="override manifest seeds")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        return sp

    sp = add("gen-tasks", cmd_gen_tasks, "materialize a task family manifest")
    sp.add_argument("manifest")
    sp.add_argument("-o", "--output", required=True)

    sp = add("finetune", cmd_finetune, "fine-tune one task")
    sp.add_argument("task")
    sp.add_argument("config")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--base", help="base parameter file (default: the family's pretrained base)")

    sp = add("merge", cmd_merge, "merge experts into one model")
    sp.add_argument("spec")
    sp.add_argument("base")
    sp.add_argument("experts", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--tasks", nargs="*", help="task files (adaptive merge)")

    sp = add("bound", cmd_bound, "evaluate the excess-error bound")
    sp.add_argument("inputs")
    sp.add_argument("-o", "--output")
    sp.add_argument("--csv")

    sp = add("stability", cmd_stability, "measure stability or audit the generalization inequality")
    sp.add_argument("suite")
    sp.add_argument("-o", "--output")
    sp.add_argument("--csv")

    sp = add("sweep", cmd_sweep, "run a hyperparameter sweep")
    sp.add_argument("manifest")
    sp.add_argument("-o", "--output")
    sp.add_argument("--csv")

    sp = add("report", cmd_report, "convert a sweep report to CSV")
    sp.add_argument("report")
    sp.add_argument("--csv", required=True)
    sp.add_argument("-o", "--output")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return a.fn(a)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError, TypeError, FileNotFoundError, ParamFormatError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
