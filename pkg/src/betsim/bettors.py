"""Bettor agents: pick a competitor, form a belief, quote odds, size stakes."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import ladder
from .exchange import Market, Order, Side, lay_liability
from .prediction import BeliefProfile, ProbEstimate, distort, estimate_probs, fair_decimal_odds, perturb_params
from .race import Competitor, RaceConfig, RaceState


class Strategy(str, Enum):
    ZI = "ZI"
    LW = "LW"
    UD = "UD"
    BTF = "BTF"
    LINEX = "Linex"
    RB = "RB"
    RP = "RP"


# heuristics with nothing to go on before the off
IN_PLAY_ONLY = frozenset({Strategy.LW, Strategy.UD, Strategy.LINEX})


@dataclass(frozen=True)
class BettorSpec:
    bettor_id: int
    strategy: Strategy
    balance: int = 100_000  # cents
    revise_interval: float = 10.0
    offset: float = 0.0
    backs: bool = True  # back the pick, else lay the least-likely competitor
    shade: float = 0.3
    aggression_cap: int = 10
    improve_cap: int = 5
    improve_after: float = 10.0
    max_open_orders: int = 1
    confidence: float = 0.6
    underdog_gap: float = 10.0
    linex_window: float = 10.0
    profile: BeliefProfile = BeliefProfile()
    shared_oracle: bool = False
    bias_strength: float = 0.3
    stake_multiples: tuple[int, ...] = (2, 5, 10)
    stake_min: int = 200
    stake_max: int = 2_000

    def validate(self, tick: float = 1.0) -> None:
        if self.revise_interval < tick:
            raise ValueError(f"bettor {self.bettor_id}: revise interval shorter than a race tick")
        if not 0 <= self.shade <= 1:
            raise ValueError(f"bettor {self.bettor_id}: shade must be in [0, 1]")
        if not set(self.stake_multiples) <= {2, 5, 10} or not self.stake_multiples:
            raise ValueError(f"bettor {self.bettor_id}: stake multiples must be drawn from 2, 5, 10")
        if not 0 < self.stake_min <= self.stake_max:
            raise ValueError(f"bettor {self.bettor_id}: need 0 < stake_min <= stake_max")
        if self.balance < 0 or self.max_open_orders < 1:
            raise ValueError(f"bettor {self.bettor_id}: bad balance or order cap")


@dataclass(frozen=True)
class Submit:
    competitor: int
    side: Side
    tick: int
    stake: int


@dataclass(frozen=True)
class Cancel:
    order_id: int


BetAction = Submit | Cancel


@dataclass
class Observation:
    """What every bettor sees on one tick. Treat as read-only."""

    t: float
    in_play: bool
    race: RaceState
    config: RaceConfig
    field: Sequence[Competitor]
    history: np.ndarray  # positions per elapsed tick, first row is the start
    market: Market
    oracle: Callable[[], ProbEstimate] | None = None

    def touch(self, competitor: int) -> tuple[int | None, int | None]:
        return self.market.best_back(competitor), self.market.best_lay(competitor)


# picks -------------------------------------------------------------------

def confident_belief(n: int, pick: int, confidence: float) -> np.ndarray:
    if n == 1:
        return np.ones(1)
    b = np.full(n, (1 - confidence) / (n - 1))
    b[pick] = confidence
    return b


def leader_wins(positions: Sequence[float]) -> int:
    return int(np.argmax(positions))


def underdog(positions: Sequence[float], gap: float) -> int:
    order = sorted(range(len(positions)), key=lambda i: (-positions[i], i))
    if len(order) < 2:
        return order[0]
    p1, p2 = order[0], order[1]
    return p2 if positions[p1] - positions[p2] < gap else p1


def linex_predicted_finish(t: float, positions, speeds, length: float, finish_times=None) -> np.ndarray:
    pos = np.asarray(positions, float)
    v = np.asarray(speeds, float)
    with np.errstate(divide="ignore"):
        eta = t + np.where(v > 0, (length - pos) / np.where(v > 0, v, 1), np.inf)
    if finish_times is not None:
        ft = np.asarray(finish_times, float)
        eta = np.where(np.isnan(ft), eta, ft)
    return eta


def linex(t: float, history: np.ndarray, tick: float, window: float, length: float,
          finish_times=None) -> int | None:
    """Earliest predicted finisher under constant speeds; None without history."""
    k = min(int(round(window / tick)), len(history) - 1)
    if k < 1:
        return None
    speeds = (history[-1] - history[-1 - k]) / (k * tick)
    eta = linex_predicted_finish(t, history[-1], speeds, length, finish_times)
    return int(np.argmin(eta))


def back_the_favourite(market: Market, competitors: Sequence[int]) -> int | None:
    best, best_odds = None, None
    for i, c in enumerate(competitors):
        o = market.mid_odds(c)
        if o is None and c in market.last_traded:
            o = ladder.odds_of(market.last_traded[c])
        if o is not None and (best_odds is None or o < best_odds):
            best, best_odds = i, o
    return best


def longshot_distort(p: np.ndarray, bias_strength: float) -> np.ndarray:
    """Power distortion p^g / sum p^g with g = 1 - bias; g < 1 flattens beliefs."""
    g = 1.0 - bias_strength
    q = np.power(np.asarray(p, float), g)
    return q / q.sum()


def pick(spec: BettorSpec, obs: Observation, rng: np.random.Generator,
         private_field: Sequence[Competitor] | None = None) -> tuple[int, np.ndarray, bool]:
    """Competitor index, belief vector, and whether the strategy fell back to random."""
    n = obs.config.n
    s = spec.strategy
    idx = None
    if s in (Strategy.RP, Strategy.RB):
        if spec.shared_oracle and obs.oracle is not None:
            est = obs.oracle()
            probs = distort(est.probs, spec.profile.post_noise, rng) if spec.profile.post_noise else est.probs
        else:
            probs = estimate_probs(obs.race, obs.config, private_field or obs.field, spec.profile, rng).probs
        if s is Strategy.RB:
            probs = longshot_distort(probs, spec.bias_strength)
        return int(np.argmax(probs)), probs, False
    if s is Strategy.LW:
        idx = leader_wins(obs.race.positions)
    elif s is Strategy.UD:
        idx = underdog(obs.race.positions, spec.underdog_gap)
    elif s is Strategy.LINEX:
        idx = linex(obs.t, obs.history, obs.config.tick, spec.linex_window, obs.config.length,
                    obs.race.finish_times)
    elif s is Strategy.BTF:
        idx = back_the_favourite(obs.market, obs.config.field)
    fallback = idx is None
    if fallback or s is Strategy.ZI:
        idx = int(rng.integers(n))
        if s is Strategy.ZI:
            return idx, np.full(n, 1.0 / n), False
    return idx, confident_belief(n, idx, spec.confidence), fallback


# quoting and staking -------------------------------------------------------

def fair_tick(p: float) -> int:
    return ladder.nearest_index(fair_decimal_odds(p))


def quote_odds(p: float, side: Side, touch: tuple[int | None, int | None] | None = None,
               shade: float = 0.0, cap: int = 10, improve_cap: int = 5) -> int:
    """Ladder tick to quote at for belief ``p``.

    Backs ask for longer odds than fair, lays offer shorter; ``shade`` in
    [0, 1] scales the markup up to ``cap`` ticks. With a live touch on our
    own side the quote goes no more than ``improve_cap`` ticks through it.
    """
    return _quote(fair_tick(p), side, touch, shade, cap, improve_cap)


def _quote(fair: int, side: Side, touch, shade: float, cap: int, improve_cap: int) -> int:
    markup = int(round(shade * cap))
    bb, bl = touch if touch is not None else (None, None)
    if side is Side.BACK:
        q = fair + markup
        if bb is not None:
            q = max(q, bb - improve_cap)
        return ladder.clamp_index(max(q, fair))
    q = fair - markup
    if bl is not None:
        q = min(q, bl + improve_cap)
    return ladder.clamp_index(min(q, fair))


def affordable_stake(balance: int, side: Side, tick: int) -> int:
    if side is Side.BACK:
        return balance
    k = ladder.hundredths(tick) - 100
    return balance * 100 // k


def round_to_multiple(amount: int, multiple: int) -> int:
    """Round cents to the nearest multiple (half up)."""
    return (amount + multiple // 2) // multiple * multiple


def stake_size(spec: BettorSpec, affordable: int, rng: np.random.Generator) -> int:
    """Stake in cents, or 0 when nothing sensible is affordable."""
    if affordable < spec.stake_min:
        return 0
    hi = min(spec.stake_max, affordable)
    stake = int(rng.integers(spec.stake_min, hi + 1))
    if spec.strategy is not Strategy.RB:
        return stake
    m = int(rng.choice(spec.stake_multiples)) * 100
    r = round_to_multiple(stake, m)
    if r > affordable:
        r = affordable // m * m
    if r == 0:
        # the drawn multiple does not fit; fall back to the smallest one
        m = min(spec.stake_multiples) * 100
        r = affordable // m * m
    return r


class Bettor:
    """Stateful agent wrapping a spec with its own RNG and private beliefs."""

    def __init__(self, spec: BettorSpec, rng: np.random.Generator,
                 competitors: Sequence[Competitor] | None = None):
        self.spec = spec
        self.rng = rng
        self.private_field = (perturb_params(competitors, spec.profile.param_noise, rng)
                              if competitors is not None else None)
        n = len(competitors) if competitors is not None else 0
        # rank[c] is the position of competitor c in this bettor's private tie-break order
        self._rank = np.argsort(rng.permutation(n)) if n else None
        self.fallbacks = 0
        self.last_belief: np.ndarray | None = None

    def _least_likely(self, belief: np.ndarray) -> int:
        lo = belief.min()
        cands = [i for i, x in enumerate(belief.tolist()) if x - lo <= 1e-12]
        if self._rank is None or len(cands) == 1:
            return cands[0]
        return min(cands, key=lambda c: self._rank[c])

    def decide(self, obs: Observation) -> list[BetAction]:
        spec = self.spec
        if not obs.in_play and spec.strategy in IN_PLAY_ONLY:
            return []
        idx, belief, fell_back = pick(spec, obs, self.rng, self.private_field)
        self.fallbacks += fell_back
        self.last_belief = belief
        if spec.backs:
            side, target = Side.BACK, idx
        else:
            side, target = Side.LAY, self._least_likely(belief)
        p = min(max(float(belief[target]), 1e-6), 1 - 1e-6)
        comp = obs.config.field[target]
        fair = fair_tick(p)
        tick = _quote(fair, side, obs.touch(comp), spec.shade, spec.aggression_cap, spec.improve_cap)

        market = obs.market
        balance = market.accounts[spec.bettor_id].balance
        actions: list[BetAction] = []
        working = 0
        for o in market.open_orders(spec.bettor_id):
            if o.competitor != comp or o.side is not side or working >= spec.max_open_orders:
                actions.append(Cancel(o.order_id))
                balance += o.reserve
                continue
            outside = o.tick < fair if side is Side.BACK else o.tick > fair
            if outside:
                actions.append(Cancel(o.order_id))
                balance += o.reserve
                continue
            age = obs.t - o.arrival_ms / 1000.0
            if o.tick != tick and age >= spec.improve_after:
                better = o.tick - 1 if side is Side.BACK else o.tick + 1
                within = better >= fair if side is Side.BACK else better <= fair
                if within and 0 <= better < ladder.N_TICKS:
                    balance += o.reserve
                    stake = min(o.unmatched, affordable_stake(balance, side, better))
                    actions.append(Cancel(o.order_id))
                    if stake > 0:
                        actions.append(Submit(comp, side, better, stake))
                        balance -= stake if side is Side.BACK else lay_liability(stake, better)
            working += 1
        if working == 0:
            stake = stake_size(spec, affordable_stake(balance, side, tick), self.rng)
            if stake > 0:
                actions.append(Submit(comp, side, tick, stake))
        return actions
