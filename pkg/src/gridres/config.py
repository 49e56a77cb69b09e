"""Run configuration: defaults, YAML loading and validation.

The default microgrid is the 33-bus study fleet: five storage units, five
diesel generators, six PV plants and twenty loads, priced at 0.2 / 0.5 /
0.3 / 1.5 $/MWh with 15-minute slots. Bus placements spread the devices
over the feeder; they are a documented choice of this toolkit, not part of
the published feeder data.

YAML schema (all sections optional, defaults apply):

    microgrid:
      slot_hours: 0.25
      initial_soc: 0.5
      costs: {ess: 0.2, gen: 0.5, grid: 0.3, load: 1.5}
      ess:        [{id, p_min, p_max, energy_cap, soc_min, soc_max,
                    eff_charge, eff_discharge, bus}, ...]
      generators: [{id, p_min, p_max, bus}, ...]
      pv:         [{id, p_max, bus}, ...]
      loads:      [{id, p_max, bus}, ...]
    outage:
      peak_prob: 0.3
      width_slots: 4.0
      breakpoints: 4
      shift_range: 3
      duration_range: [12, 15]
      forced_onset: null      # slot index for deterministic scenarios
      forced_duration: null
      forced_peak_slot: null
    data:
      source: synth           # or a CSV path
      days: 64
      window: 8
      forecast_std_pv: 0.05
      forecast_std_load: 0.03
      stress_pv: 1.0
      stress_load: 1.0
    train:
      episodes: 400
      gamma: 0.99
      tau: 0.001
      lr_actor: 0.00025
      lr_critic: 0.00025
      lr_gru: 0.00025
      batch_size: 128
      update_every: 24
      updates_per: 1
      warmup_steps: 8000
      replay_capacity: 100000
      noise_sigma_start: 0.2
      noise_sigma_end: 0.02
      grad_clip: 1.0
      hidden: 64
      gru_shared: true        # per-agent encoders are reserved, not implemented
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any

import yaml

from .grid import CostParams, EssSpec, GeneratorSpec, LoadSpec, MicrogridConfig, PvSpec


class ConfigError(ValueError):
    """Invalid configuration; carries every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  - " + "\n  - ".join(problems))


ESS_TABLE = [
    ("ESS1", -2.0, 2.0, 6.0, 6),
    ("ESS2", -1.5, 1.5, 4.0, 10),
    ("ESS3", -2.0, 2.0, 6.0, 16),
    ("ESS4", -1.0, 1.0, 3.0, 25),
    ("ESS5", -1.0, 1.0, 3.0, 30),
]
GEN_TABLE = [
    ("Gen1", 2.0, 3), ("Gen2", 1.0, 8), ("Gen3", 1.0, 21),
    ("Gen4", 1.0, 27), ("Gen5", 1.0, 33),
]
PV_TABLE = [
    ("PV1", 1.0, 7), ("PV2", 2.0, 13), ("PV3", 2.0, 20),
    ("PV4", 1.0, 24), ("PV5", 1.0, 29), ("PV6", 2.0, 32),
]
LOAD_TABLE = [
    ("Load1", 0.23, 2), ("Load2", 0.51, 4), ("Load3", 0.32, 5),
    ("Load4", 0.46, 7), ("Load5", 0.23, 9), ("Load6", 1.14, 11),
    ("Load7", 0.51, 12), ("Load8", 0.46, 14), ("Load9", 0.23, 15),
    ("Load10", 0.51, 17), ("Load11", 0.46, 18), ("Load12", 0.32, 19),
    ("Load13", 0.51, 22), ("Load14", 0.46, 23), ("Load15", 1.14, 24),
    ("Load16", 0.23, 26), ("Load17", 0.51, 28), ("Load18", 0.23, 29),
    ("Load19", 0.51, 31), ("Load20", 0.46, 32),
]


def default_dict() -> dict[str, Any]:
    """The fully resolved default configuration as plain data."""
    return {
        "microgrid": {
            "slot_hours": 0.25,
            "initial_soc": 0.5,
            "costs": {"ess": 0.2, "gen": 0.5, "grid": 0.3, "load": 1.5},
            "ess": [
                {"id": i, "p_min": lo, "p_max": hi, "energy_cap": cap,
                 "soc_min": 0.1, "soc_max": 0.9, "eff_charge": 0.999,
                 "eff_discharge": 1.001, "bus": bus}
                for i, lo, hi, cap, bus in ESS_TABLE
            ],
            "generators": [
                {"id": i, "p_min": 0.0, "p_max": p, "bus": bus}
                for i, p, bus in GEN_TABLE
            ],
            "pv": [{"id": i, "p_max": p, "bus": bus} for i, p, bus in PV_TABLE],
            "loads": [{"id": i, "p_max": p, "bus": bus} for i, p, bus in LOAD_TABLE],
        },
        "outage": {
            "peak_prob": 0.3,
            "width_slots": 4.0,
            "breakpoints": 4,
            "shift_range": 3,
            "duration_range": [12, 15],
            "forced_onset": None,
            "forced_duration": None,
            "forced_peak_slot": None,
        },
        "data": {
            "source": "synth",
            "days": 64,
            "window": 8,
            "forecast_std_pv": 0.05,
            "forecast_std_load": 0.03,
            "stress_pv": 1.0,
            "stress_load": 1.0,
        },
        "train": {
            "episodes": 400,
            "gamma": 0.99,
            "tau": 0.001,
            "lr_actor": 0.00025,
            "lr_critic": 0.00025,
            "lr_gru": 0.00025,
            "batch_size": 128,
            "update_every": 24,
            "updates_per": 1,
            "warmup_steps": 8000,
            "replay_capacity": 100000,
            "noise_sigma_start": 0.2,
            "noise_sigma_end": 0.02,
            "grad_clip": 1.0,
            "hidden": 64,
            "gru_shared": True,
        },
    }


def _merge(base: dict, override: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            problems.append(f"{path}{key}: unknown key")
            continue
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.", problems)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_dict(path: str | None = None,
                 overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Defaults merged with an optional YAML file and programmatic overrides.

    Collects every validation problem before raising, so a bad file is fixed
    in one round trip.
    """
    problems: list[str] = []
    resolved = default_dict()
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
        if not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        resolved = _merge(resolved, loaded, "", problems)
    if overrides:
        resolved = _merge(resolved, overrides, "", problems)
    _validate(resolved, problems)
    if problems:
        raise ConfigError(problems)
    return resolved


def _validate(cfg: dict[str, Any], problems: list[str]) -> None:
    train = cfg["train"]
    for key in ("episodes", "batch_size", "update_every", "updates_per",
                "replay_capacity", "hidden"):
        if not isinstance(train[key], int) or train[key] <= 0:
            problems.append(f"train.{key}: must be a positive integer")
    for key in ("gamma", "tau", "lr_actor", "lr_critic", "lr_gru",
                "noise_sigma_start", "noise_sigma_end", "grad_clip"):
        if not isinstance(train[key], (int, float)) or train[key] <= 0:
            problems.append(f"train.{key}: must be positive")
    if train["warmup_steps"] < 0:
        problems.append("train.warmup_steps: must be >= 0")
    if train["gru_shared"] is not True:
        problems.append("train.gru_shared: only the shared encoder is implemented")
    total_steps = cfg["train"]["episodes"] * 96
    if train["warmup_steps"] >= total_steps:
        problems.append("train.warmup_steps: must be below total environment steps")

    outage = cfg["outage"]
    if not 0.0 <= outage["peak_prob"] <= 1.0:
        problems.append("outage.peak_prob: must be in [0, 1]")
    if outage["width_slots"] <= 0:
        problems.append("outage.width_slots: must be positive")
    lo, hi = outage["duration_range"]
    if not (isinstance(lo, int) and isinstance(hi, int) and 0 < lo <= hi):
        problems.append("outage.duration_range: need integers 0 < lo <= hi")

    data = cfg["data"]
    if data["window"] < 1:
        problems.append("data.window: must be >= 1")
    if data["days"] < 4:
        problems.append("data.days: need at least 4 days for a split")
    for key in ("forecast_std_pv", "forecast_std_load"):
        if data[key] < 0:
            problems.append(f"data.{key}: must be >= 0")
    for key in ("stress_pv", "stress_load"):
        if data[key] <= 0:
            problems.append(f"data.{key}: must be positive")

    try:
        build_microgrid(cfg)
    except (ValueError, KeyError, TypeError) as exc:
        problems.append(f"microgrid: {exc}")


def build_microgrid(cfg: dict[str, Any]) -> MicrogridConfig:
    """Instantiate the validated fleet objects from a resolved config dict."""
    mg = cfg["microgrid"]
    costs = CostParams(
        lambda_ess=mg["costs"]["ess"],
        lambda_gen=mg["costs"]["gen"],
        lambda_grid=mg["costs"]["grid"],
        lambda_load=mg["costs"]["load"],
        slot_hours=mg["slot_hours"],
    )
    return MicrogridConfig(
        ess=tuple(EssSpec(**e) for e in mg["ess"]),
        generators=tuple(GeneratorSpec(**g) for g in mg["generators"]),
        pv=tuple(PvSpec(**p) for p in mg["pv"]),
        loads=tuple(LoadSpec(**l) for l in mg["loads"]),
        costs=costs,
        initial_soc=mg["initial_soc"],
    )


def default_config() -> MicrogridConfig:
    return build_microgrid(default_dict())
