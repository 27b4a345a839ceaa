"""Experiment configuration: JSON file <-> validated dataclasses.

A config file holds four sections::

    {"domain": {...DomainSpec fields...},
     "adapt": {...AdaptConfig fields, "joint": {...JointCostConfig fields...}},
     "seeds": [0, 1, 2],
     "out_dir": "runs/default",
     "trial_pairs": 3000,
     "grid": [{"name": "jpot_pl", "eta": 1.0, "beta": 0.1}, ...]}

Every section is optional; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .joint_cost import JointCostConfig
from .synth import DomainSpec
from .trainer import AdaptConfig

TOP_KEYS = ("domain", "adapt", "seeds", "out_dir", "trial_pairs", "grid")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridCell:
    """One ablation cell: a name plus AdaptConfig overrides."""

    name: str
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    domain: DomainSpec = field(default_factory=DomainSpec)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs/default"
    trial_pairs: int = 3000
    grid: tuple[GridCell, ...] = (GridCell("default"),)

    def for_seed(self, seed: int) -> tuple[DomainSpec, AdaptConfig]:
        return replace(self.domain, seed=seed), replace(self.adapt, seed=seed)

    def cell_config(self, cell: GridCell, seed: int) -> AdaptConfig:
        base = self.adapt.to_dict()
        merged = {**base, **cell.overrides, "seed": seed}
        if isinstance(cell.overrides.get("joint"), dict):
            merged["joint"] = {**base["joint"], **cell.overrides["joint"]}
        return _build(AdaptConfig, merged, f"grid.{cell.name}")

    def to_dict(self) -> dict:
        return {
            "domain": dataclasses.asdict(self.domain),
            "adapt": self.adapt.to_dict(),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "trial_pairs": self.trial_pairs,
            "grid": [{"name": c.name, **c.overrides} for c in self.grid],
        }


def _check_type(section, key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        default = getattr(defaults, key)
        if key == "joint":
            value = value if isinstance(value, JointCostConfig) else _build(JointCostConfig, value, f"{section}.joint")
        elif key == "bias_b":
            if not (value == "batch-mean" or (isinstance(value, (int, float)) and not isinstance(value, bool))):
                raise ConfigError(f"{section}.bias_b: expected a number or 'batch-mean'")
        elif key == "target_speaker_subset":
            if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise ConfigError(f"{section}.{key}: expected an integer or null")
        else:
            _check_type(section, key, value, default)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, float):
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _grid(cells) -> tuple[GridCell, ...]:
    if not isinstance(cells, list) or not cells:
        raise ConfigError("grid: expected a non-empty list")
    out, names = [], set()
    for k, cell in enumerate(cells):
        if not isinstance(cell, dict) or not isinstance(cell.get("name"), str):
            raise ConfigError(f"grid[{k}]: each cell needs a string 'name'")
        overrides = {key: v for key, v in cell.items() if key != "name"}
        _build(AdaptConfig, overrides, f"grid[{k}]")  # validate eagerly
        if cell["name"] in names:
            raise ConfigError(f"grid: duplicate cell name {cell['name']!r}")
        names.add(cell["name"])
        out.append(GridCell(cell["name"], overrides))
    return tuple(out)


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(doc) - set(TOP_KEYS))
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    kw = {}
    if "domain" in doc:
        kw["domain"] = _build(DomainSpec, doc["domain"], "domain")
    if "adapt" in doc:
        kw["adapt"] = _build(AdaptConfig, doc["adapt"], "adapt")
    if "seeds" in doc:
        seeds = doc["seeds"]
        if (not isinstance(seeds, list) or not seeds
                or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
            raise ConfigError("seeds: expected a non-empty list of nonnegative integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds: duplicates")
        kw["seeds"] = tuple(seeds)
    if "out_dir" in doc:
        if not isinstance(doc["out_dir"], str) or not doc["out_dir"]:
            raise ConfigError("out_dir: expected a non-empty string")
        kw["out_dir"] = doc["out_dir"]
    if "trial_pairs" in doc:
        tp = doc["trial_pairs"]
        if not isinstance(tp, int) or isinstance(tp, bool) or tp < 1:
            raise ConfigError("trial_pairs: expected a positive integer")
        kw["trial_pairs"] = tp
    if "grid" in doc:
        kw["grid"] = _grid(doc["grid"])
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
