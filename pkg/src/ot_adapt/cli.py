"""ot-adapt command line: generate | pretrain | adapt | run | audit | ot-solve."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .evaluate import metric_audit, write_audit
from .experiment import aggregate, eval_suite, prepare_out_dir, run_seed, write_aggregate
from .model import load_checkpoint, save_checkpoint
from .ot_core import CostMatrix, sinkhorn, transport_cost
from .pseudo_label import METRIC_KINDS
from .synth import generate, read_dataset_csv, write_generated
from .trainer import BASELINES, TrainingDiverged, adapt, pretrain_source, write_report


def _load(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None):
        if len(set(args.seed)) != len(args.seed):
            raise ConfigError("--seed given twice with the same value")
        exp = replace(exp, seeds=tuple(args.seed))
    if getattr(args, "baseline", None):
        exp = replace(exp, adapt=replace(exp.adapt, baseline=args.baseline))
    if getattr(args, "out", None):
        exp = replace(exp, out_dir=args.out)
    return exp


def _max_workers(n_jobs: int) -> int:
    raw = os.environ.get("OT_ADAPT_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"OT_ADAPT_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError("OT_ADAPT_THREADS must be at least 1")
    return max(1, min(cap, n_jobs))


def cmd_generate(args) -> int:
    exp = _load(args)
    out = prepare_out_dir(exp, exp.out_dir)
    for seed in exp.seeds:
        spec, _ = exp.for_seed(seed)
        paths = write_generated(generate(spec), out / f"seed_{seed}")
        print(f"seed {seed}: " + ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_pretrain(args) -> int:
    exp = _load(args)
    out = prepare_out_dir(exp, exp.out_dir)
    for seed in exp.seeds:
        spec, cfg = exp.for_seed(seed)
        params = pretrain_source(cfg, generate(spec).source_train)
        path = out / f"seed_{seed}" / "pretrained.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, path)
        print(f"seed {seed}: {path}")
    return 0


def cmd_adapt(args) -> int:
    exp = _load(args)
    out = prepare_out_dir(exp, exp.out_dir)
    for seed in exp.seeds:
        spec, cfg = exp.for_seed(seed)
        data = generate(spec)
        params = (load_checkpoint(args.checkpoint) if args.checkpoint
                  else pretrain_source(cfg, data.source_train))
        suite = eval_suite(data, exp.trial_pairs, seed)
        adapted, report = adapt(cfg, params, data.source_train, data.target_adapt, suite)
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(adapted, seed_dir / "adapted.json")
        write_report(report, seed_dir / "adapt.csv", seed_dir / "adapt.json")
        final = report.summary()["final"]
        print(f"seed {seed}: target EER {report.initial['target_eer']:.4f} -> {final['target_eer']:.4f}")
    return 0


def _run_one(job):
    exp, seed, out = job
    return run_seed(exp, seed, out_dir=out)


def cmd_run(args) -> int:
    exp = _load(args)
    if args.dry_run:
        print(json.dumps(exp.to_dict(), indent=2, sort_keys=True))
        print(f"dry run: {len(exp.seeds)} seed(s) x {len(exp.grid)} cell(s); config is valid")
        return 0
    out = prepare_out_dir(exp, exp.out_dir)
    jobs = [(exp, seed, out) for seed in exp.seeds]
    workers = _max_workers(len(jobs))
    if workers == 1:
        results = [_run_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    agg = aggregate(results)
    write_aggregate(agg, out / "aggregate.json")
    for name, cell in agg["cells"].items():
        before, after = cell["initial"]["target_eer"], cell["final"]["target_eer"]
        print(f"{name}: target EER {before['mean']:.4f} -> {after['mean']:.4f} "
              f"(std {after['std']:.4f}, {after['n']} seeds)")
    return 0


def _audit_inputs(args, exp: ExperimentConfig, seed: int):
    if args.target:
        groups = read_dataset_csv(args.target)
        key = ("target", "adapt")
        if key not in groups:
            raise ConfigError(f"{args.target}: no target/adapt rows")
        return groups[key].X, groups[key].speakers
    spec, _ = exp.for_seed(seed)
    data = generate(spec)
    return data.target_adapt.X, data.target_adapt.speakers


def cmd_audit(args) -> int:
    exp = _load(args)
    params = load_checkpoint(args.checkpoint)
    seed = exp.seeds[0]
    X, y = _audit_inputs(args, exp, seed)
    if X.shape[1] != params.input_dim:
        raise ValueError(f"checkpoint expects {params.input_dim} input features, data has {X.shape[1]}")
    lam = exp.adapt.lambda_pl if args.lam is None else args.lam
    rows = metric_audit(params, X, y, lam=lam, batch_size=exp.adapt.batch_size, seed=seed)
    if args.out:
        path = prepare_out_dir(exp, args.out) / "audit.csv"
        write_audit(rows, path)
        print(path)
    else:
        sys.stdout.write(",".join(rows[0]) + "\n")
        for r in rows:
            sys.stdout.write(",".join(format(v, ".6f") if isinstance(v, float) else v for v in r.values()) + "\n")
    return 0


def _read_matrix(path, ndmin):
    """Whitespace- or comma-delimited numeric text."""
    text = Path(path).read_text()
    return np.loadtxt(text.splitlines(), delimiter="," if "," in text else None, ndmin=ndmin)


def cmd_ot_solve(args) -> int:
    cost = CostMatrix(_read_matrix(args.cost, 2))
    u1 = _read_matrix(args.source_marginal, 1) if args.source_marginal else None
    u2 = _read_matrix(args.target_marginal, 1) if args.target_marginal else None
    plan = sinkhorn(cost, u1, u2, lam=args.lam, tol=args.tol, max_iter=args.max_iter)
    summary = {"cost": transport_cost(plan, cost), "iterations": plan.iterations_used,
               "marginal_violation": plan.marginal_violation, "lambda": plan.lam, "solver": plan.solver}
    if args.out:
        np.savetxt(args.out, plan.coupling, fmt="%.17g")
    print(json.dumps(summary, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ot-adapt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="experiment JSON (defaults used when omitted)")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--seed", type=int, action="append", help="seed; repeat for several")

    sp = sub.add_parser("generate", help="write source/target dataset CSVs")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("pretrain", help="train on labelled source data and save a checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="adapt a checkpoint to the target domain")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, help="pretrained checkpoint (pretrains when omitted)")
    sp.add_argument("--baseline", choices=BASELINES)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("run", help="pretrain + adapt every grid cell for every seed, then aggregate")
    common(sp)
    sp.add_argument("--baseline", choices=BASELINES)
    sp.add_argument("--dry-run", action="store_true", help="validate the config and stop")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("audit", help=f"pseudo-label accuracy table ({', '.join(METRIC_KINDS)})")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--target", type=Path, help="target CSV from 'generate' (regenerated when omitted)")
    sp.add_argument("--lambda", dest="lam", type=float, help="entropic weight for the ROT/PROT rows")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("ot-solve", help="entropic OT for a cost matrix stored as text")
    sp.add_argument("cost", type=Path)
    sp.add_argument("--source-marginal", type=Path)
    sp.add_argument("--target-marginal", type=Path)
    sp.add_argument("--lambda", dest="lam", type=float, default=0.1)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--max-iter", type=int, default=10000)
    sp.add_argument("--out", help="write the plan as whitespace-delimited text")
    sp.set_defaults(func=cmd_ot_solve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, TrainingDiverged) as exc:
        print(f"ot-adapt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
