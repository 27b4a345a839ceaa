"""Per-seed experiment pipeline: generate -> pretrain -> adapt (per grid cell) -> evaluate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, GridCell, dump_config
from .model import ModelParams, save_checkpoint
from .synth import DomainData, generate, make_trials
from .trainer import EvalSuite, RunReport, adapt, pretrain_source, write_report


@dataclass
class SeedResult:
    seed: int
    pretrained: ModelParams
    reports: dict[str, RunReport]


def eval_suite(data: DomainData, trial_pairs: int, seed: int, audit: bool = True) -> EvalSuite:
    # source_test and target_test hold the same speakers in the same order, so one list serves both
    trials = make_trials(data.source_test.speakers, trial_pairs, seed)
    return EvalSuite(data.source_test, data.target_test, trials, trials,
                     data.target_adapt if audit else None)


def run_seed(exp: ExperimentConfig, seed: int, cells=None, baseline: str | None = None,
             out_dir=None) -> SeedResult:
    spec, base = exp.for_seed(seed)
    data = generate(spec)
    suite = eval_suite(data, exp.trial_pairs, seed)
    pretrained = pretrain_source(base, data.source_train)
    reports = {}
    for cell in (exp.grid if cells is None else cells):
        cfg = exp.cell_config(cell, seed)
        if baseline is not None:
            cfg = replace(cfg, baseline=baseline)
        _, reports[cell.name] = adapt(cfg, pretrained, data.source_train, data.target_adapt, suite)
    result = SeedResult(seed, pretrained, reports)
    if out_dir is not None:
        write_seed(result, out_dir)
    return result


def write_seed(result: SeedResult, out_dir) -> None:
    out = Path(out_dir)
    seed_dir = out / f"seed_{result.seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.pretrained, seed_dir / "pretrained.json")
    for name, report in result.reports.items():
        write_report(report, seed_dir / f"{name}.csv", seed_dir / f"{name}.json")


def _stats(values):
    arr = np.array(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0)), "n": len(values)}


def aggregate(results: list[SeedResult]) -> dict:
    """Mean and (population) std over seeds of the initial and final metrics per grid cell."""
    cells = results[0].reports.keys()
    out = {"seeds": [r.seed for r in results], "cells": {}}
    for name in cells:
        entry = {}
        for stage in ("initial", "final"):
            rows = [r.reports[name].summary()[stage] for r in results]
            keys = [k for k in rows[0] if k != "epoch" and isinstance(rows[0][k], (int, float))]
            entry[stage] = {k: _stats([row[k] for row in rows]) for k in keys
                            if all(math.isfinite(row[k]) for row in rows)}
        out["cells"][name] = entry
    return out


def write_aggregate(agg: dict, path) -> None:
    Path(path).write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")


def prepare_out_dir(exp: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(exp, out / "config.json")
    return out


def single_cell(name: str, **overrides) -> GridCell:
    return GridCell(name, overrides)

