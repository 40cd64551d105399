"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every file is written below ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import datagen
from .config import ConfigError
from .prediction import estimate_probs, fair_decimal_odds
from .race import RaceStreams, advance_tick, run_race, start_race
from .session import min_bettors, nonempty_market_prob, run_batch, run_session

log = logging.getLogger("betsim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(top: bool) -> argparse.ArgumentParser:
    # flags work before or after the subcommand; the subcommand copy must not
    # overwrite values given before it, so its defaults are suppressed
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    c = _Parser(add_help=False)
    c.add_argument("--config", default=d(None), help="YAML config file (defaults fill anything it omits)")
    c.add_argument("--seed", type=_u64, default=d(None), help="master seed, overrides the config")
    c.add_argument("--out", default=d(os.environ.get("BBE_OUT", "out")),
                   help="output directory (default: $BBE_OUT or ./out)")
    c.add_argument("--workers", type=int, default=d(1), help="worker processes for batch runs")
    c.add_argument("--format", choices=("csv", "jsonl", "all"), default=d("all"),
                   help="artifact formats for session and batch runs")
    c.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return c


def build_parser() -> argparse.ArgumentParser:
    top, common = _common(True), _common(False)
    p = _Parser(prog="betsim", description="Agent-based betting exchange simulator.", parents=[top])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("race", parents=[common], help="run one race; write trajectories and rebased CSV")
    sub.add_parser("probs", parents=[common], help="win probabilities at a race snapshot")
    sub.add_parser("session", parents=[common], help="run one betting session; write all artifacts")
    b = sub.add_parser("batch", parents=[common], help="run i.i.d. sessions and write a manifest")
    b.add_argument("--sessions", type=int, help="number of sessions (overrides batch.sessions)")
    q = sub.add_parser("liquidity", parents=[common], help="liquidity arithmetic for a field size")
    q.add_argument("--runners", type=int, required=True)
    q.add_argument("--depth", type=int, action="append", help="grid depth(s) for the bettor table")
    sub.add_parser("defaults", parents=[common], help="print the default config as YAML")
    return p


def _write(out: str, name: str, text: str) -> str:
    path = os.path.join(out, name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def _manifest(out: str, command: str, cfg: dict, seed: int, paths: list[str]) -> None:
    entry = {"subcommand": command, "config_digest": cfgmod.digest(cfg), "seed": seed,
             "outputs": sorted(os.path.relpath(p, out) for p in paths)}
    _write(out, "run_manifest.json", json.dumps(entry, indent=1, sort_keys=True) + "\n")


def cmd_race(args, cfg, seed) -> list[str]:
    race, field = cfgmod.build_race(cfg)
    rec = run_race(race, field, seed)
    paths = [_write(args.out, "race.csv", datagen.write_trajectories(rec)),
             _write(args.out, "rebased.csv", datagen.write_rebased(datagen.rebase_record(rec), rec.names))]
    order = ", ".join(rec.names[i] for i in rec.finish_order)
    print(f"finish order: {order}")
    return paths


def cmd_probs(args, cfg, seed) -> list[str]:
    race, field = cfgmod.build_race(cfg)
    profile = cfgmod.probs_profile(cfg)
    t_snap = float(cfg["probs"]["snapshot_t"])
    streams = RaceStreams(seed, race.race_id, race.field)
    state = start_race(race, field, streams)
    while state.t + 1e-9 < t_snap and not state.over:
        state = advance_tick(state, race, field, streams)
    est = estimate_probs(state, race, field, profile, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,))))
    lines = ["competitor,name,position,probability,fair_odds"]
    for i, c in enumerate(field):
        p = float(est.probs[i])
        lines.append(f"{c.id},{c.name},{state.positions[i]:.3f},{p:.6f},{fair_decimal_odds(p):.2f}")
    text = "\n".join(lines) + "\n"
    print(f"snapshot t={state.t:g}s, {est.n_samples} dry runs")
    print(text, end="")
    return [_write(args.out, "probs.csv", text)]


def _formats(args) -> tuple[str, ...]:
    return ("csv", "jsonl") if args.format == "all" else (args.format,)


def cmd_session(args, cfg, seed) -> list[str]:
    sc = cfgmod.build_session(cfg, seed)
    rec = run_session(sc)
    paths = datagen.write_session(rec, args.out, _formats(args))
    matched = sum(1 for e in rec.journal if e["kind"] == "match")
    print(f"winner: {rec.race.names[rec.winner]}; matched bets: {matched}; "
          f"commission: {rec.commission_pot / 100:.2f}")
    return paths


def cmd_batch(args, cfg, seed) -> list[str]:
    sc = cfgmod.build_session(cfg, seed)
    n = args.sessions if args.sessions is not None else int(cfg["batch"]["sessions"])
    if n < 1:
        raise ConfigError("batch needs at least one session")
    entries = run_batch(sc, n, args.out, workers=max(1, args.workers), formats=_formats(args))
    failed = [e for e in entries if "error" in e]
    print(f"{len(entries) - len(failed)}/{len(entries)} sessions written to {args.out}")
    for e in failed:
        print(f"session {e['index']}: {e['error']}", file=sys.stderr)
    paths = [os.path.join(args.out, "manifest.jsonl")]
    for e in entries:
        paths += [os.path.join(args.out, p) for p in e.get("files", {})]
    if failed:
        raise RuntimeError(f"{len(failed)} session(s) failed")
    return paths


def cmd_liquidity(args, cfg, seed) -> list[str]:
    n = args.runners
    if n < 1:
        raise ConfigError("--runners must be >= 1")
    depths = args.depth or [int(d) for d in cfg["liquidity"]["depths"]]
    if any(d < 1 for d in depths):
        raise ConfigError("--depth must be >= 1")
    p = nonempty_market_prob(n)
    print(f"runners: {n}")
    print(f"nonempty market probability: {p:.6g}")
    print("depth,min_bettors")
    for d in depths:
        print(f"{d},{min_bettors(n, d)}")
    return []


COMMANDS = {"race": cmd_race, "probs": cmd_probs, "session": cmd_session, "batch": cmd_batch,
            "liquidity": cmd_liquidity}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "defaults":
        print(cfgmod.dump_defaults(), end="")
        return 0
    try:
        cfg = cfgmod.load_config(args.config)
        seed = int(cfg["seed"]) if args.seed is None else args.seed
        if args.command != "liquidity":
            os.makedirs(args.out, exist_ok=True)
        paths = COMMANDS[args.command](args, cfg, seed)
        if args.command != "liquidity":
            _manifest(args.out, args.command, cfg, seed, paths)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
