"""Betting sessions: a race, a market and a bettor population run together.

A session runs a pre-race window (the race is parked at its start state
while bettors form starting prices), turns the market in-play, then
interleaves race ticks with bettor decisions until betting closes. The race
is then run out and the market settled to the winner.

Time is kept in integer milliseconds from the start of the session, so the
in-play transition happens at ``pre_race_duration * 1000``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from . import ladder
from .bettors import (
    IN_PLAY_ONLY,
    Bettor,
    BettorSpec,
    Cancel,
    Observation,
    Strategy,
    Submit,
)
from .exchange import Market, OrderRejected, Phase, SettlementReport, replay_journal
from .prediction import BeliefProfile, ProbEstimate, estimate_probs
from .race import Competitor, RaceConfig, RaceRecord, RaceState, RaceStreams, _params, advance_tick, start_race

log = logging.getLogger(__name__)

EPOCH_MS = 1_609_459_200_000  # 2021-01-01T00:00:00Z


class SessionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SessionConfig:
    race: RaceConfig
    competitors: tuple[Competitor, ...]
    bettors: tuple[BettorSpec, ...]
    pre_race_duration: float = 60.0
    commission_rate: float = 0.05
    crossing: bool = True
    seed: int = 0
    epoch_ms: int = EPOCH_MS
    # shared ground-truth estimate for bettors in shared-oracle mode
    oracle_dryruns: int = 100
    oracle_interval: float = 5.0
    sentiment_bettors: tuple[int, ...] = ()
    market_depth: int = 3
    audit: bool = False

    def validate(self) -> None:
        self.race.validate(self.competitors)
        if len(self.bettors) < 2:
            raise SessionConfigError("a session needs at least two bettors")
        ids = [b.bettor_id for b in self.bettors]
        if len(set(ids)) != len(ids):
            raise SessionConfigError("bettor ids must be unique")
        if self.pre_race_duration < 0:
            raise SessionConfigError("pre_race_duration must be >= 0")
        if not 0 <= self.commission_rate < 1:
            raise SessionConfigError("commission_rate must lie in [0, 1)")
        if self.oracle_dryruns < 0 or self.oracle_interval <= 0:
            raise SessionConfigError("bad oracle settings")
        for b in self.bettors:
            try:
                b.validate(self.race.tick)
            except ValueError as e:
                raise SessionConfigError(str(e)) from None
        if not set(self.sentiment_bettors) <= set(ids):
            raise SessionConfigError("sentiment_bettors must name bettors in the session")


@dataclass
class MarketTick:
    """Top-of-book summary for one competitor at one instant."""

    ms: int
    competitor: int
    best_back: float | None
    best_lay: float | None
    last_traded: float | None
    volume: int


@dataclass
class SessionRecord:
    config: SessionConfig
    race: RaceRecord
    journal: list[dict]
    initial_balances: dict[int, int]
    balances: dict[int, int]
    pnl: dict[int, int]
    settlement: SettlementReport
    sentiment: dict[int, list[tuple[float, np.ndarray]]]
    market_series: list[MarketTick]
    rejected: int = 0
    fallbacks: int = 0
    commission_pot: int = 0

    @property
    def winner(self) -> int:
        return self.race.winner

    def to_json(self) -> str:
        """Canonical serialization; equal sessions give equal bytes."""
        doc = {
            "seed": self.config.seed,
            "race_csv": self.race.to_csv(),
            "journal": self.journal,
            "initial_balances": {str(k): v for k, v in sorted(self.initial_balances.items())},
            "balances": {str(k): v for k, v in sorted(self.balances.items())},
            "pnl": {str(k): v for k, v in sorted(self.pnl.items())},
            "winner": self.settlement.winner,
            "commission_pot": self.commission_pot,
            "rounding_remainder": str(self.settlement.rounding_remainder),
            "sentiment": {str(b): [[t, [round(float(x), 12) for x in p]] for t, p in s]
                          for b, s in sorted(self.sentiment.items())},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_jsonable)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x)}")


def _seq(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=key)


class _Oracle:
    """Lazily computed shared estimate, refreshed at most every ``interval`` seconds."""

    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(_seq(cfg.seed, 2))
        self.profile = BeliefProfile(cfg.oracle_dryruns)
        self.cached: ProbEstimate | None = None
        self.cached_at = -math.inf
        self.snapshot: RaceState | None = None
        self.now = 0.0

    def __call__(self) -> ProbEstimate:
        stale = self.cached is None or (self.now - self.cached_at >= self.cfg.oracle_interval
                                        and self.snapshot.t != self.cached.snapshot_time)
        if stale:
            self.cached = estimate_probs(self.snapshot, self.cfg.race, self.cfg.competitors,
                                         self.profile, self.rng)
            self.cached_at = self.now
        return self.cached


def _cadence(spec: BettorSpec, dt: float) -> tuple[int, int]:
    """(period, phase) in ticks: the bettor acts on ticks k with k % period == phase."""
    every = max(1, int(round(spec.revise_interval / dt)))
    return every, int(round(spec.offset / dt)) % every


def run_session(cfg: SessionConfig) -> SessionRecord:
    """Run one session end to end; deterministic in ``cfg``."""
    cfg.validate()
    race, comps = cfg.race, list(cfg.competitors)
    dt = race.tick
    balances = {b.bettor_id: b.balance for b in cfg.bettors}
    market = Market(race.field, balances, crossing=cfg.crossing, audit=cfg.audit)
    specs = sorted(cfg.bettors, key=lambda b: b.bettor_id)
    agents = [Bettor(s, np.random.default_rng(_seq(cfg.seed, 1, s.bettor_id)), comps) for s in specs]
    cadence = [_cadence(s, dt) for s in specs]

    streams = RaceStreams(_race_seed(cfg.seed), race.race_id, race.field)
    state = start_race(race, comps, streams)
    params = _params(race, comps)
    max_ticks = 1_000_000
    history = np.empty((1024, race.n))
    history[0] = state.positions
    n_hist = 1

    oracle = _Oracle(cfg)
    sentiment: dict[int, list] = {b: [] for b in cfg.sentiment_bettors}
    series: list[MarketTick] = []
    rejected = 0

    pre_ticks = int(round(cfg.pre_race_duration / dt))
    in_play_ms = int(round(cfg.pre_race_duration * 1000))

    def snapshot_market(ms: int) -> None:
        for c in race.field:
            bb, bl = market.best_back(c), market.best_lay(c)
            lt = market.last_traded.get(c)
            series.append(MarketTick(ms, c, None if bb is None else ladder.odds_of(bb),
                                     None if bl is None else ladder.odds_of(bl),
                                     None if lt is None else ladder.odds_of(lt), market.traded_volume[c]))

    def act(k: int, ms: int, in_play: bool) -> None:
        nonlocal rejected
        obs = Observation(ms / 1000.0, in_play, state, race, comps, history[:n_hist], market, oracle)
        oracle.snapshot, oracle.now = state, ms / 1000.0
        for agent, (every, phase) in zip(agents, cadence):
            spec = agent.spec
            if k % every != phase:
                continue
            if not in_play and spec.strategy in IN_PLAY_ONLY:
                continue
            for a in agent.decide(obs):
                if isinstance(a, Cancel):
                    market.cancel(a.order_id, ms)
                    continue
                try:
                    market.submit(spec.bettor_id, a.competitor, a.side, a.tick, a.stake, ms)
                except OrderRejected as e:
                    rejected += 1
                    log.debug("bettor %d: %s", spec.bettor_id, e)
            if spec.bettor_id in sentiment and agent.last_belief is not None:
                sentiment[spec.bettor_id].append((float(state.t), agent.last_belief.copy()))

    # pre-race
    for k in range(pre_ticks):
        ms = int(round(k * dt * 1000))
        act(k, ms, False)
        snapshot_market(ms)

    # the book is empty at the first in-play instant; bettors next act after the first tick
    market.transition_in_play(in_play_ms)
    k = pre_ticks
    snapshot_market(in_play_ms)

    # in-play
    while not state.over:
        state = advance_tick(state, race, comps, streams, params)
        if n_hist == len(history):
            history = np.concatenate([history, np.empty_like(history)])
        history[n_hist] = state.positions
        n_hist += 1
        k += 1
        if n_hist > max_ticks:
            raise RuntimeError("race did not finish within the tick budget")
        ms = in_play_ms + int(round(state.t * 1000))
        if market.phase is Phase.IN_PLAY:
            if state.n_finished >= race.close_after:
                market.close(ms)
            else:
                act(k, ms, True)
            snapshot_market(ms)

    ms = in_play_ms + int(round(state.t * 1000))
    if market.phase is Phase.IN_PLAY:
        market.close(ms)
    winner = state.finish_order()[0]
    report = market.settle(winner, cfg.commission_rate, ms)

    rec = RaceRecord(race, tuple(c.name for c in comps), np.arange(n_hist) * dt,
                     history[:n_hist].copy(), state.finish_times.copy(), cfg.seed)
    final = {b: a.balance for b, a in market.accounts.items()}
    return SessionRecord(
        cfg, rec, market.journal, dict(balances), final,
        {b: final[b] - balances[b] for b in balances}, report, sentiment, series, rejected,
        sum(a.fallbacks for a in agents), market.commission_pot)


def _race_seed(seed: int) -> int:
    return int(_seq(seed, 0).generate_state(2, np.uint64)[0])


def replay_balances(record: SessionRecord) -> dict[int, int]:
    m = replay_journal(record.journal, record.initial_balances, record.config.race.field,
                       record.config.crossing)
    return {b: a.balance for b, a in m.accounts.items()}


# populations ---------------------------------------------------------------

@dataclass(frozen=True)
class BettorGroup:
    """``count`` bettors sharing a strategy; per-bettor details are drawn."""

    strategy: Strategy
    count: int
    p_back: float = 0.5
    confidence_jitter: float = 0.05
    overrides: dict = field(default_factory=dict)


def build_population(groups: Iterable[BettorGroup], seed: int, first_id: int = 0) -> tuple[BettorSpec, ...]:
    """Bettor specs with drawn direction, revise offset and confidence."""
    rng = np.random.default_rng(_seq(seed, 3))
    out = []
    i = first_id
    for g in groups:
        for _ in range(g.count):
            base = BettorSpec(i, Strategy(g.strategy), **g.overrides)
            conf = float(np.clip(base.confidence + rng.uniform(-1, 1) * g.confidence_jitter, 0.05, 0.95))
            spec = replace(base, backs=bool(rng.random() < g.p_back),
                           offset=float(rng.uniform(0, base.revise_interval)), confidence=conf)
            out.append(spec)
            i += 1
    return tuple(out)


# batches -------------------------------------------------------------------

def session_seed(master: int, index: int) -> int:
    h = hashlib.sha256(f"{int(master)}:{int(index)}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _batch_job(args) -> dict:
    index, cfg, out_dir, formats = args
    from .datagen import write_session

    entry: dict[str, Any] = {"index": index, "seed": cfg.seed}
    try:
        rec = run_session(cfg)
        sub = os.path.join(out_dir, f"session_{index:05d}")
        paths = write_session(rec, sub, formats)
        entry["winner"] = rec.winner
        entry["files"] = {os.path.relpath(p, out_dir): _file_digest(p) for p in paths}
        entry["record_digest"] = rec.digest()
    except Exception as e:  # reported per session, the batch carries on
        entry["error"] = f"{type(e).__name__}: {e}"
    return entry


def _file_digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def run_batch(template: SessionConfig, count: int, out_dir: str, workers: int = 1,
              formats: Sequence[str] = ("csv", "jsonl")) -> list[dict]:
    """Run ``count`` i.i.d. sessions and write a manifest sorted by index."""
    if count < 1:
        raise SessionConfigError("batch needs at least one session")
    template.validate()
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(i, replace(template, seed=session_seed(template.seed, i)), out_dir, tuple(formats))
            for i in range(count)]
    if workers <= 1:
        entries = [_batch_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            entries = list(ex.map(_batch_job, jobs, chunksize=max(1, count // (workers * 4))))
    entries.sort(key=lambda e: e["index"])
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    return entries


# liquidity arithmetic --------------------------------------------------------

def min_bettors(n_runners: int, depth: int) -> int:
    """Bettors needed to fill a grid view ``depth`` cells deep on both sides."""
    if n_runners < 1 or depth < 1:
        raise ValueError("need n_runners >= 1 and depth >= 1")
    return 4 * depth * n_runners


def nonempty_market_prob(n_runners: int) -> float:
    """N!/N^N, evaluated in log space."""
    if n_runners < 1:
        raise ValueError("need n_runners >= 1")
    n = n_runners
    return math.exp(math.lgamma(n + 1) - n * math.log(n))


def simulate_nonempty(n_runners: int, trials: int, rng: np.random.Generator) -> float:
    """Fraction of one-bet markets in which every competitor trades.

    N counterparty pairs: in each pair one bettor picks a competitor and a
    direction uniformly at random and the other takes the opposite side at
    the same tick, so every bet matches. The market is nonempty when every
    competitor has at least one matched bet.
    """
    n = n_runners
    hits = 0
    for _ in range(trials):
        m = Market(range(n), {b: 10_000 for b in range(2 * n)})
        tick = ladder.index_of(2.0)
        for pair in range(n):
            c = int(rng.integers(n))
            side = "back" if rng.random() < 0.5 else "lay"
            other = "lay" if side == "back" else "back"
            m.submit(2 * pair, c, side, tick, 100)
            m.submit(2 * pair + 1, c, other, tick, 100)
        hits += len({b.competitor for b in m.matched}) == n
    return hits / trials
