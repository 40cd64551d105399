"""YAML run configuration: schema, defaults, validation and digests.

Every tunable constant of the simulator appears in ``DEFAULTS``; a config
file only needs to name what it changes. Money is written in currency units
(``12.5`` is 12.50) and converted to integer cents on load.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import replace
from typing import Any

import yaml

from . import scenarios
from .bettors import BettorSpec, Strategy
from .prediction import BeliefProfile, ParamNoise
from .race import Competitor, RaceConfig, RaceConfigError, StepDist
from .session import EPOCH_MS, BettorGroup, SessionConfig, build_population

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# defaults shared by every bettor group unless the group overrides them
BETTOR_DEFAULTS: dict[str, Any] = {
    "balance": 1000.0,
    "revise_interval": 10.0,
    "shade": 0.3,
    "aggression_cap": 10,
    "improve_cap": 5,
    "improve_after": 10.0,
    "max_open_orders": 1,
    "confidence": 0.6,
    "confidence_jitter": 0.05,
    "p_back": 0.5,
    "underdog_gap": 10.0,
    "linex_window": 10.0,
    "bias_strength": 0.3,
    "stake_multiples": [2, 5, 10],
    "stake_min": 2.0,
    "stake_max": 20.0,
    "dryruns": 100,
    "param_noise": {"step": 0.0, "pref": 0.0, "resp": 0.0},
    "post_noise": 0.0,
    "shared_oracle": False,
}

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "race": {
        # three_horse | random | twins | custom
        "scenario": "random",
        "race_id": "race",
        "runners": 6,
        "field_seed": 1,
        "length": 3400.0,
        "tick": 1.0,
        "interactions": True,
        "betting_close": None,
        "factors": [],
        "pref_form": "distance",
        "pref_k": 1.0,
        "competitors": [],
    },
    "session": {
        "pre_race_duration": 60.0,
        "commission_rate": 0.05,
        "crossing": True,
        "epoch_ms": EPOCH_MS,
        "oracle_dryruns": 100,
        "oracle_interval": 5.0,
        "market_depth": 3,
        "sentiment_bettors": [],
        "audit": False,
    },
    "bettors": {
        "defaults": BETTOR_DEFAULTS,
        "groups": [
            {"strategy": "ZI", "count": 60},
            {"strategy": "LW", "count": 25},
            {"strategy": "UD", "count": 25},
            {"strategy": "BTF", "count": 25},
            {"strategy": "Linex", "count": 25},
            {"strategy": "RB", "count": 20, "shared_oracle": True},
            {"strategy": "RP", "count": 20, "shared_oracle": True, "post_noise": 0.02},
        ],
    },
    "probs": {
        "snapshot_t": 60.0,
        "dryruns": 1000,
        "param_noise": {"step": 0.0, "pref": 0.0, "resp": 0.0},
        "post_noise": 0.0,
    },
    "batch": {"sessions": 10},
    "liquidity": {"depths": [1, 2, 3]},
}

COMPETITOR_KEYS = {"id", "name", "step", "pref", "phases", "boundary_sd", "level_sd", "theta_ahead",
                   "theta_behind", "spur_boost", "block_prob", "spur_prob"}
GROUP_KEYS = set(BETTOR_DEFAULTS) | {"strategy", "count"}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and base[k] and k != "param_noise":
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None) -> dict:
    """Merged configuration; raises ConfigError for unreadable or invalid files."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(raw or {}, source=path)


def parse_config(raw: dict, source: str = "<config>") -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {version!r}")
    cfg = _merge(DEFAULTS, raw)
    build_session(cfg)  # validates everything eagerly
    return cfg


def digest(cfg: dict) -> str:
    """sha256 of the canonical JSON form; independent of key order."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _cents(x) -> int:
    return int(round(float(x) * 100))


def _competitor(d: dict) -> Competitor:
    extra = set(d) - COMPETITOR_KEYS
    if extra:
        raise ConfigError(f"unknown competitor keys {sorted(extra)}")
    kw = dict(d)
    step = kw.pop("step", {"kind": "uniform", "a": 10.0, "b": 20.0})
    kw["step"] = StepDist(step.get("kind", "uniform"), float(step["a"]), float(step["b"]))
    kw["pref"] = tuple(float(x) for x in kw.get("pref", ()))
    if "phases" in kw:
        kw["phases"] = tuple((float(b), float(lv)) for b, lv in kw["phases"])
    return Competitor(**kw)


def build_race(cfg: dict) -> tuple[RaceConfig, list[Competitor]]:
    r = cfg["race"]
    try:
        kind = r["scenario"]
        if kind == "three_horse":
            race, field = scenarios.three_horse(r["interactions"])
        elif kind == "twins":
            race, field = scenarios.twins(r["interactions"], float(r["length"]))
        elif kind == "random":
            race, field = scenarios.random_field(int(r["runners"]), int(r["field_seed"]), float(r["length"]),
                                                 r["race_id"], len(r["factors"]), r["interactions"])
        elif kind == "custom":
            field = [_competitor(c) for c in r["competitors"]]
            race = RaceConfig(r["race_id"], float(r["length"]), tuple(c.id for c in field))
        else:
            raise ConfigError(f"unknown race scenario {kind!r}")
        over = {"tick": float(r["tick"]), "betting_close": r["betting_close"],
                "pref_form": r["pref_form"], "pref_k": float(r["pref_k"])}
        if kind == "custom" or r["factors"]:
            over["factors"] = tuple(float(x) for x in r["factors"])
        if kind == "custom":
            over["interactions"] = bool(r["interactions"])
        race = replace(race, **over)
        race.validate(field)
    except (RaceConfigError, TypeError, KeyError) as e:
        raise ConfigError(f"invalid race config: {e}") from None
    return race, field


def _profile(d: dict) -> BeliefProfile:
    return BeliefProfile(int(d["dryruns"]), ParamNoise(**d["param_noise"]), float(d["post_noise"]))


def build_groups(cfg: dict) -> list[BettorGroup]:
    b = cfg["bettors"]
    groups = []
    for g in b["groups"]:
        extra = set(g) - GROUP_KEYS
        if extra:
            raise ConfigError(f"unknown bettor group keys {sorted(extra)}")
        d = {**b["defaults"], **g}
        try:
            strategy = Strategy(d["strategy"])
        except ValueError:
            raise ConfigError(f"unknown strategy {d['strategy']!r}") from None
        over = {
            "balance": _cents(d["balance"]), "revise_interval": float(d["revise_interval"]),
            "shade": float(d["shade"]), "aggression_cap": int(d["aggression_cap"]),
            "improve_cap": int(d["improve_cap"]), "improve_after": float(d["improve_after"]),
            "max_open_orders": int(d["max_open_orders"]), "confidence": float(d["confidence"]),
            "underdog_gap": float(d["underdog_gap"]), "linex_window": float(d["linex_window"]),
            "bias_strength": float(d["bias_strength"]),
            "stake_multiples": tuple(int(x) for x in d["stake_multiples"]),
            "stake_min": _cents(d["stake_min"]), "stake_max": _cents(d["stake_max"]),
            "profile": _profile(d), "shared_oracle": bool(d["shared_oracle"]),
        }
        if int(d["count"]) < 0:
            raise ConfigError("bettor group count must be >= 0")
        groups.append(BettorGroup(strategy, int(d["count"]), float(d["p_back"]),
                                  float(d["confidence_jitter"]), over))
    return groups


def build_session(cfg: dict, seed: int | None = None) -> SessionConfig:
    race, field = build_race(cfg)
    seed = int(cfg["seed"] if seed is None else seed)
    try:
        pop = build_population(build_groups(cfg), seed)
        for spec in pop:
            spec.validate(race.tick)
        s = cfg["session"]
        sc = SessionConfig(race, tuple(field), pop, float(s["pre_race_duration"]), float(s["commission_rate"]),
                           bool(s["crossing"]), seed, int(s["epoch_ms"]), int(s["oracle_dryruns"]),
                           float(s["oracle_interval"]), tuple(int(x) for x in s["sentiment_bettors"]),
                           int(s["market_depth"]), bool(s["audit"]))
        sc.validate()
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"invalid session config: {e}") from None
    return sc


def probs_profile(cfg: dict) -> BeliefProfile:
    try:
        return _profile(cfg["probs"])
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"invalid probs config: {e}") from None


def dump_defaults() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False)
