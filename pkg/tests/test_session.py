import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from betsim import scenarios
from betsim.bettors import BettorSpec, Strategy
from betsim.exchange import Phase
from betsim.prediction import BeliefProfile
from betsim.race import Competitor, RaceConfig, StepDist
from betsim.session import (
    BettorGroup,
    SessionConfig,
    SessionConfigError,
    build_population,
    min_bettors,
    nonempty_market_prob,
    replay_balances,
    run_batch,
    run_session,
    session_seed,
    simulate_nonempty,
)


def small_session(seed=0, n=4, bettors=40, audit=True, length=600.0, **kw):
    race, field = scenarios.random_field(n, seed=1, length=length)
    groups = [BettorGroup(Strategy.ZI, bettors // 4), BettorGroup(Strategy.LW, bettors // 8),
              BettorGroup(Strategy.UD, bettors // 8), BettorGroup(Strategy.BTF, bettors // 8),
              BettorGroup(Strategy.LINEX, bettors // 8),
              BettorGroup(Strategy.RB, bettors // 8, overrides={"shared_oracle": True}),
              BettorGroup(Strategy.RP, bettors // 8, overrides={"shared_oracle": True,
                                                                "profile": BeliefProfile(50, post_noise=0.02)})]
    pop = build_population(groups, seed)
    return SessionConfig(race, tuple(field), pop, pre_race_duration=30.0, seed=seed, audit=audit, **kw)


# liquidity arithmetic ----------------------------------------------------

def test_min_bettors():
    assert min_bettors(9, 3) == 108
    assert min_bettors(2, 1) == 8
    assert min_bettors(1, 1) == 4


def test_nonempty_market_prob():
    assert nonempty_market_prob(2) == pytest.approx(0.5)
    assert nonempty_market_prob(5) == pytest.approx(0.0384)
    assert nonempty_market_prob(10) == pytest.approx(3.6288e-4)
    assert nonempty_market_prob(1) == pytest.approx(1.0)
    # log space keeps large fields finite
    assert 0 < nonempty_market_prob(500) < 1e-200


def test_simulated_nonempty_small():
    f = simulate_nonempty(2, 2000, np.random.default_rng(0))
    assert abs(f - 0.5) < 3 * math.sqrt(0.25 / 2000)


# sessions -----------------------------------------------------------------

def test_minimal_market_one_bet():
    race = RaceConfig("solo", 100.0, (0,))
    field = (Competitor(0, "Only", StepDist("uniform", 10, 12)),)
    bettors = (BettorSpec(0, Strategy.ZI, balance=1000, backs=True, shade=0, stake_min=1000, stake_max=1000),
               BettorSpec(1, Strategy.ZI, balance=10, backs=False, shade=0, stake_min=1000, stake_max=1000))
    rec = run_session(SessionConfig(race, field, bettors, pre_race_duration=20.0, audit=True))
    matches = [e for e in rec.journal if e["kind"] == "match"]
    assert len(matches) == 1 and matches[0]["stake"] == 1000
    assert rec.pnl == {0: 10 - 1, 1: -10}
    assert rec.commission_pot == 1


def test_session_conserves_money_and_replays():
    rec = run_session(small_session(seed=3))
    m0 = sum(rec.initial_balances.values())
    assert all(e["money"] == m0 for e in rec.journal)
    assert sum(rec.balances.values()) + rec.commission_pot == m0
    assert all(v >= 0 for v in rec.balances.values())
    assert replay_balances(rec) == rec.balances
    assert sum(1 for e in rec.journal if e["kind"] == "match") > 0


def test_session_deterministic():
    a = run_session(small_session(seed=5, audit=False))
    b = run_session(small_session(seed=5, audit=False))
    c = run_session(small_session(seed=6, audit=False))
    assert a.to_json() == b.to_json()
    assert a.digest() != c.digest()


def test_phase_legality():
    rec = run_session(small_session(seed=2))
    in_play = next(e["seq"] for e in rec.journal if e["kind"] == "phase" and e["phase"] == Phase.IN_PLAY.value)
    closed = next(e["seq"] for e in rec.journal if e["kind"] == "phase" and e["phase"] == Phase.CLOSED.value)
    # everything unmatched was swept right before the in-play event
    live = {}
    for e in rec.journal[:in_play]:
        for c, side, tick, v in e["cells"]:
            live[c, side, tick] = v
    assert all(v == 0 for v in live.values())
    assert not any(e["kind"] == "submit" for e in rec.journal[closed:])
    pt = [e["ms"] for e in rec.journal]
    assert pt == sorted(pt)


def test_betting_closes_at_nth_finisher():
    cfg = small_session(seed=4)
    cfg = replace(cfg, race=replace(cfg.race, betting_close=1))
    rec = run_session(cfg)
    closed = next(e for e in rec.journal if e["kind"] == "phase" and e["phase"] == Phase.CLOSED.value)
    first = float(np.min(rec.race.finish_times))
    assert closed["ms"] <= 30_000 + math.ceil(first) * 1000
    assert rec.settlement.winner == rec.race.winner


def test_sentiment_recorded_for_rp():
    cfg = small_session(seed=1)
    rp = next(b.bettor_id for b in cfg.bettors if b.strategy is Strategy.RP)
    rec = run_session(replace(cfg, sentiment_bettors=(rp,)))
    s = rec.sentiment[rp]
    assert len(s) > 3
    assert all(abs(p.sum() - 1) < 1e-9 for _, p in s)


def test_config_validation():
    cfg = small_session()
    with pytest.raises(SessionConfigError):
        replace(cfg, bettors=cfg.bettors[:1]).validate()
    with pytest.raises(SessionConfigError):
        replace(cfg, pre_race_duration=-1).validate()
    with pytest.raises(SessionConfigError):
        replace(cfg, bettors=(cfg.bettors[0], cfg.bettors[0])).validate()


def test_population_builder():
    pop = build_population([BettorGroup(Strategy.ZI, 100), BettorGroup(Strategy.RB, 10)], seed=0)
    assert [b.bettor_id for b in pop] == list(range(110))
    assert 25 < sum(b.backs for b in pop[:100]) < 75
    assert all(0 <= b.offset < b.revise_interval for b in pop)


# batches -----------------------------------------------------------------

def test_session_seed_stable():
    assert session_seed(1, 0) == session_seed(1, 0) != session_seed(1, 1)


def test_batch_worker_count_invariance(tmp_path):
    cfg = small_session(audit=False, bettors=16)
    a = run_batch(cfg, 4, str(tmp_path / "w1"), workers=1)
    b = run_batch(cfg, 4, str(tmp_path / "w4"), workers=4)
    assert a == b
    assert [e["index"] for e in a] == [0, 1, 2, 3]
    assert all("error" not in e for e in a)
    for e in a:
        for rel, digest in e["files"].items():
            with open(tmp_path / "w1" / rel, "rb") as f1, open(tmp_path / "w4" / rel, "rb") as f2:
                assert f1.read() == f2.read()
    lines = (tmp_path / "w1" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 4 and json.loads(lines[2])["seed"] == session_seed(cfg.seed, 2)


def test_batch_symmetric_split(tmp_path):
    race, field = scenarios.twins(length=200.0)
    pop = build_population([BettorGroup(Strategy.ZI, 4)], seed=0)
    cfg = SessionConfig(race, tuple(field), pop, pre_race_duration=10.0)
    entries = run_batch(cfg, 100, str(tmp_path), formats=("csv",))
    wins = sum(e["winner"] == 0 for e in entries)
    assert 40 <= wins <= 60


def test_batch_reports_errors_per_session(tmp_path):
    cfg = small_session(audit=False, bettors=16)
    blocker = tmp_path / "session_00001"
    blocker.write_text("not a directory")
    entries = run_batch(cfg, 3, str(tmp_path), formats=("csv",))
    assert "error" in entries[1]
    assert "error" not in entries[0] and "error" not in entries[2]
