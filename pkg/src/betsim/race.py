"""Discrete-time track race: point competitors moving along a 1-D track.

Each competitor owns an independent random stream keyed by
(master seed, race id, competitor id), so a competitor's draws never depend
on who else is in the field. Every tick consumes exactly three uniforms per
competitor per run (step, block, spur) whether or not they are used.

The tick kernel works on ``(runs, competitors)`` arrays so the same code
advances a single race or a whole Monte-Carlo ensemble of continuations.
"""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import ndtri

EPS_MIN = 0.01
MAX_TICKS = 1_000_000
_TRUNC = 2.0  # jitter noise is truncated at +-2 sd


class RaceConfigError(ValueError):
    pass


class RaceStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepDist:
    """Per-tick step distribution: ``uniform(a=lo, b=hi)`` or ``lognormal(a=mu, b=sigma)``."""

    kind: str = "uniform"
    a: float = 10.0
    b: float = 20.0

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return (self.a + self.b) / 2
        return math.exp(self.a + self.b**2 / 2)

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "uniform":
            return self.a + (self.b - self.a) * u
        u = np.clip(u, 1e-12, 1 - 1e-12)
        return np.exp(self.a + self.b * ndtri(u))

    def validate(self) -> None:
        if self.kind == "uniform":
            if not (0 < self.a <= self.b):
                raise RaceConfigError(f"uniform step needs 0 < lo <= hi, got ({self.a}, {self.b})")
        elif self.kind == "lognormal":
            if self.b < 0:
                raise RaceConfigError("lognormal sigma must be >= 0")
        else:
            raise RaceConfigError(f"unknown step distribution {self.kind!r}")


@dataclass(frozen=True)
class Competitor:
    id: int
    name: str
    step: StepDist = StepDist()
    pref: tuple[float, ...] = ()
    # (end of phase as race fraction, responsiveness level); last phase runs to the line
    phases: tuple[tuple[float, float], ...] = ((1.0, 1.0),)
    boundary_sd: float = 0.0
    level_sd: float = 0.0
    theta_ahead: float = 5.0
    theta_behind: float = 5.0
    spur_boost: float = 1.15
    block_prob: float = 1.0
    spur_prob: float = 0.3

    def validate(self) -> None:
        self.step.validate()
        if any(not 0 <= x <= 1 for x in self.pref):
            raise RaceConfigError(f"{self.name}: preference entries must lie in [0, 1]")
        if not self.phases:
            raise RaceConfigError(f"{self.name}: empty phase schedule")
        ends = [b for b, _ in self.phases]
        if any(not 0 < b < 1 for b in ends[:-1]) or not 0 < ends[-1] <= 1:
            raise RaceConfigError(f"{self.name}: phase boundaries must lie in (0, 1)")
        if any(x >= y for x, y in zip(ends, ends[1:])):
            raise RaceConfigError(f"{self.name}: phase boundaries must be strictly increasing")
        # level 0 is the manual collapse hatch (fall, crash)
        if any(not (0.7 <= lv <= 1.0 or lv == 0.0) for _, lv in self.phases):
            raise RaceConfigError(f"{self.name}: phase levels must lie in [0.7, 1.0]")
        if min(self.theta_ahead, self.theta_behind, self.boundary_sd, self.level_sd) < 0:
            raise RaceConfigError(f"{self.name}: thresholds and jitter sds must be >= 0")
        if self.spur_boost < 1:
            raise RaceConfigError(f"{self.name}: spur boost must be >= 1")
        if not (0 <= self.block_prob <= 1 and 0 <= self.spur_prob <= 1):
            raise RaceConfigError(f"{self.name}: probabilities must lie in [0, 1]")


def random_competitor(cid: int, name: str, rng: np.random.Generator, n_factors: int = 0,
                      step_lo: tuple[float, float] = (9.0, 11.0), step_width: tuple[float, float] = (4.0, 8.0),
                      boundary_sd: float = 0.03, level_sd: float = 0.03, **kw) -> Competitor:
    """Competitor with 2-4 random phase boundaries and levels drawn from U(0.7, 1.0)."""
    nb = int(rng.integers(2, 5))
    bounds = np.sort(rng.uniform(0.05, 0.95, nb))
    while np.any(np.diff(bounds) <= 0):
        bounds = np.sort(rng.uniform(0.05, 0.95, nb))
    levels = rng.uniform(0.7, 1.0, nb + 1)
    lo = float(rng.uniform(*step_lo))
    hi = lo + float(rng.uniform(*step_width))
    phases = tuple((float(b), float(lv)) for b, lv in zip([*bounds, 1.0], levels))
    pref = tuple(float(x) for x in rng.uniform(0, 1, n_factors))
    c = Competitor(cid, name, StepDist("uniform", lo, hi), pref, phases, boundary_sd, level_sd, **kw)
    c.validate()
    return c


@dataclass(frozen=True)
class RaceConfig:
    race_id: str
    length: float
    field: tuple[int, ...]
    factors: tuple[float, ...] = ()
    start_positions: tuple[float, ...] | None = None
    tick: float = 1.0
    betting_close: int | None = None  # None: last finisher; n: nth finisher
    interactions: bool = True
    pref_form: str = "distance"  # or "legacy"
    pref_k: float = 1.0

    @property
    def n(self) -> int:
        return len(self.field)

    @property
    def starts(self) -> np.ndarray:
        if self.start_positions is None:
            return np.zeros(self.n)
        return np.asarray(self.start_positions, dtype=float)

    def validate(self, competitors: Sequence[Competitor] | None = None) -> None:
        if self.length <= 0:
            raise RaceConfigError("track length must be > 0")
        if self.n < 1 or len(set(self.field)) != self.n:
            raise RaceConfigError("field must list distinct competitor ids")
        if self.tick <= 0:
            raise RaceConfigError("tick must be > 0")
        if self.start_positions is not None:
            if len(self.start_positions) != self.n:
                raise RaceConfigError("start_positions must match the field size")
            if any(not 0 <= s < self.length for s in self.start_positions):
                raise RaceConfigError("start positions must lie in [0, length)")
        if self.betting_close is not None and not 1 <= self.betting_close <= self.n:
            raise RaceConfigError("betting_close must be in 1..n")
        if any(not 0 <= f <= 1 for f in self.factors):
            raise RaceConfigError("factor entries must lie in [0, 1]")
        if self.pref_form not in ("distance", "legacy") or self.pref_k <= 0:
            raise RaceConfigError("bad preference form")
        if competitors is not None:
            if tuple(c.id for c in competitors) != self.field:
                raise RaceConfigError("competitors must be given in field order")
            for c in competitors:
                c.validate()
                if len(c.pref) != len(self.factors):
                    raise RaceConfigError(f"{c.name}: preference vector has wrong dimension")

    @property
    def close_after(self) -> int:
        return self.n if self.betting_close is None else self.betting_close


def race_key(race_id: str) -> int:
    return int.from_bytes(hashlib.sha256(race_id.encode()).digest()[:8], "little")


class RaceStreams:
    """One independent generator per competitor for ``runs`` parallel runs."""

    def __init__(self, seed: int, race_id: str, competitor_ids: Sequence[int], runs: int = 1):
        self.seed = int(seed)
        self.runs = runs
        key = race_key(race_id)
        self.gens = [np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(self.seed, spawn_key=(key, int(cid))))) for cid in competitor_ids]

    @classmethod
    def from_rng(cls, rng: np.random.Generator, race_id: str, competitor_ids, runs: int = 1) -> "RaceStreams":
        return cls(int(rng.integers(0, 2**63)), race_id, competitor_ids, runs)

    def ticks(self, k: int) -> np.ndarray:
        """Uniforms of shape (n, k, 3, runs)."""
        out = np.empty((len(self.gens), k, 3, self.runs))
        for g, o in zip(self.gens, out):
            g.random(out=o)
        return out


# scalar model functions ------------------------------------------------

def nearest_ahead(c: int, d: Sequence[float]) -> tuple[int, float] | None:
    best = None
    for i, x in enumerate(d):
        gap = x - d[c]
        if i != c and gap > 0 and (best is None or gap < best[1]):
            best = (i, gap)
    return best


def nearest_behind(c: int, d: Sequence[float]) -> tuple[int, float] | None:
    best = None
    for i, x in enumerate(d):
        gap = d[c] - x
        if i != c and gap > 0 and (best is None or gap < best[1]):
            best = (i, gap)
    return best


def preference_coeff(comp: Competitor, factors: Sequence[float], k: float = 1.0,
                     form: str = "distance") -> float:
    if len(factors) != len(comp.pref):
        raise RaceConfigError(f"{comp.name}: preference vector has wrong dimension")
    if not factors:
        return 1.0
    dist = math.dist(factors, comp.pref)
    if form == "legacy":
        v = (k - dist) / k
    else:
        v = 1 - dist / math.sqrt(len(factors))
    return min(max(v, EPS_MIN), 1.0)


def phase_level(phases: Sequence[tuple[float, float]], race_frac: float) -> float:
    for end, level in phases[:-1]:
        if race_frac < end:
            return level
    return phases[-1][1]


def responsiveness(comp: Competitor, race_frac: float, gap_behind: float | None,
                   rng, phases: Sequence[tuple[float, float]] | None = None,
                   interactions: bool = True) -> float:
    """Phase level at ``race_frac``, boosted when a pursuer is within range."""
    level = phase_level(comp.phases if phases is None else phases, race_frac)
    u = rng.random()
    if interactions and gap_behind is not None and gap_behind <= comp.theta_behind and u < comp.spur_prob:
        level *= comp.spur_boost
    return max(level, EPS_MIN)


def step_size(comp: Competitor, resp: float, pref: float, gap_ahead: float | None,
              last_own: float, last_ahead: float | None, rng, interactions: bool = True) -> float:
    """One forward step; ``rng`` supplies the step then the blocking uniform."""
    raw = float(comp.step.from_uniform(np.array([rng.random()]))[0])
    u_block = rng.random()
    s = max(resp * pref, EPS_MIN) * raw
    if (interactions and gap_ahead is not None and gap_ahead <= comp.theta_ahead
            and u_block < comp.block_prob):
        return resp * min(last_own, last_ahead)
    return s


# kernel ----------------------------------------------------------------

@njit(cache=True)
def _kernel(pos, last, fin, nfin, t0, dt, length, bounds, levels, pref, th_a, th_b,
            beta, qb, qs, raw, u, interactions, stop_k, hist):
    R, n = pos.shape
    T = raw.shape[1]
    newpos = np.empty(n)
    newlast = np.empty(n)
    done = np.empty(n, np.bool_)
    for k in range(T):
        t = t0 + k * dt
        active = False
        for r in range(R):
            if nfin[r] >= stop_k:
                continue
            active = True
            # finished set as of the start of the tick (synchronous update)
            for c in range(n):
                done[c] = not np.isnan(fin[r, c])
            for c in range(n):
                newpos[c] = pos[r, c]
                newlast[c] = last[r, c]
                if done[c]:
                    continue
                x = pos[r, c]
                frac = x / length
                j = 0
                while frac >= bounds[r, c, j]:
                    j += 1
                resp = levels[r, c, j]
                ahead = -1
                gap_a = np.inf
                gap_b = np.inf
                if interactions:
                    for i in range(n):
                        if i == c or done[i]:
                            continue
                        g = pos[r, i] - x
                        if g > 0.0 and g < gap_a:
                            gap_a = g
                            ahead = i
                        elif g < 0.0 and -g < gap_b:
                            gap_b = -g
                    if gap_b <= th_b[c] and u[c, k, 2, r] < qs[c]:
                        resp *= beta[c]
                if resp < EPS_MIN:
                    resp = EPS_MIN
                mult = resp * pref[c]
                if mult < EPS_MIN:
                    mult = EPS_MIN
                s = mult * raw[c, k, r]
                if ahead >= 0 and gap_a <= th_a[c] and u[c, k, 1, r] < qb[c]:
                    s = resp * min(last[r, c], last[r, ahead])
                y = x + s
                newlast[c] = s
                if y >= length:
                    fin[r, c] = t + dt * (length - x) / s
                    nfin[r] += 1
                    y = length
                newpos[c] = y
            for c in range(n):
                pos[r, c] = newpos[c]
                last[r, c] = newlast[c]
        if not active:
            return k
        if hist.shape[0] > 0:
            for r in range(R):
                for c in range(n):
                    hist[k, r, c] = pos[r, c]
    return T


@dataclass
class _Params:
    length: float
    dt: float
    pref: np.ndarray
    th_a: np.ndarray
    th_b: np.ndarray
    beta: np.ndarray
    qb: np.ndarray
    qs: np.ndarray
    interactions: bool
    dists: list[StepDist]


def _params(config: RaceConfig, competitors: Sequence[Competitor]) -> _Params:
    f = np.array
    return _Params(
        float(config.length), float(config.tick),
        f([preference_coeff(c, config.factors, config.pref_k, config.pref_form) for c in competitors]),
        f([c.theta_ahead for c in competitors], float), f([c.theta_behind for c in competitors], float),
        f([c.spur_boost for c in competitors], float), f([c.block_prob for c in competitors], float),
        f([c.spur_prob for c in competitors], float), bool(config.interactions),
        [c.step for c in competitors])


def _truncnorm(u: np.ndarray) -> np.ndarray:
    lo = 0.5 * math.erfc(_TRUNC / math.sqrt(2))
    return ndtri(lo + (1 - 2 * lo) * u)


def _jitter(competitors: Sequence[Competitor], streams: RaceStreams) -> tuple[np.ndarray, np.ndarray]:
    """Realize per-run phase schedules; returns (bounds, levels) of shape (R, n, K)."""
    R, n = streams.runs, len(competitors)
    K = max(len(c.phases) for c in competitors)
    bounds = np.full((R, n, K), np.inf)
    levels = np.zeros((R, n, K))
    for ci, (c, g) in enumerate(zip(competitors, streams.gens)):
        m = len(c.phases)
        u = g.random((R, 2 * m))
        b = np.array([e for e, _ in c.phases[:-1]], float)
        lv = np.array([x for _, x in c.phases], float)
        if m > 1:
            bj = b + c.boundary_sd * _truncnorm(u[:, : m - 1])
            bounds[:, ci, : m - 1] = np.sort(np.clip(bj, 1e-3, 1 - 1e-3), axis=1)
        lj = lv + c.level_sd * _truncnorm(u[:, m:])
        levels[:, ci, :m] = np.where(lv > 0, np.maximum(lj, EPS_MIN), 0.0)
        levels[:, ci, m:] = levels[:, ci, m - 1: m]
    return bounds, levels


@dataclass
class RaceState:
    t: float
    positions: np.ndarray
    last_steps: np.ndarray
    finish_times: np.ndarray
    bounds: np.ndarray | None = None  # realized phase schedule, (n, K)
    levels: np.ndarray | None = None
    ticks: int = 0

    @property
    def n_finished(self) -> int:
        return int(np.sum(~np.isnan(self.finish_times)))

    @property
    def over(self) -> bool:
        return self.n_finished == len(self.positions)

    def finish_order(self) -> list[int]:
        ft = self.finish_times
        done = [i for i in range(len(ft)) if not np.isnan(ft[i])]
        return sorted(done, key=lambda i: (ft[i], i))

    def leader_order(self) -> list[int]:
        """Current ranking: finishers by time, then by position descending."""
        order = self.finish_order()
        rest = [i for i in range(len(self.positions)) if np.isnan(self.finish_times[i])]
        rest.sort(key=lambda i: (-self.positions[i], i))
        return order + rest

    def copy(self) -> "RaceState":
        cp = lambda a: None if a is None else a.copy()
        return RaceState(self.t, self.positions.copy(), self.last_steps.copy(),
                         self.finish_times.copy(), cp(self.bounds), cp(self.levels), self.ticks)


def initial_state(config: RaceConfig, competitors: Sequence[Competitor]) -> RaceState:
    n = config.n
    return RaceState(0.0, config.starts.copy(), np.array([c.step.mean for c in competitors], float),
                     np.full(n, np.nan))


def start_race(config: RaceConfig, competitors: Sequence[Competitor], streams: RaceStreams) -> RaceState:
    """Initial state with this run's jittered phase schedule drawn from ``streams``."""
    config.validate(competitors)
    state = initial_state(config, competitors)
    b, lv = _jitter(competitors, streams)
    state.bounds, state.levels = b[0], lv[0]
    return state


def _run_kernel(p: _Params, pos, last, fin, nfin, t0, bounds, levels, u, stop_k, hist=None):
    raw = np.empty((u.shape[0], u.shape[1], u.shape[3]))
    for c, d in enumerate(p.dists):
        raw[c] = d.from_uniform(u[c, :, 0, :])
    if hist is None:
        hist = np.empty((0, 1, 1))
    return _kernel(pos, last, fin, nfin, t0, p.dt, p.length, bounds, levels, p.pref, p.th_a,
                   p.th_b, p.beta, p.qb, p.qs, raw, u, p.interactions, stop_k, hist)


def advance_tick(state: RaceState, config: RaceConfig, competitors: Sequence[Competitor],
                 streams: RaceStreams, params: _Params | None = None) -> RaceState:
    """Advance every unfinished competitor by one synchronous tick."""
    if state.over:
        raise RaceStateError("race is already over")
    if state.bounds is None:
        raise RaceStateError("state has no realized phase schedule; use start_race")
    p = params or _params(config, competitors)
    s = state.copy()
    pos, last, fin = s.positions[None, :], s.last_steps[None, :], s.finish_times[None, :]
    nfin = np.array([s.n_finished], np.int64)
    _run_kernel(p, pos, last, fin, nfin, s.t, s.bounds[None], s.levels[None], streams.ticks(1), len(s.positions))
    s.positions, s.last_steps, s.finish_times = pos[0], last[0], fin[0]
    s.t = state.t + config.tick
    s.ticks = state.ticks + 1
    return s


@dataclass
class RaceRecord:
    config: RaceConfig
    names: tuple[str, ...]
    times: np.ndarray
    positions: np.ndarray  # (ticks + 1, n)
    finish_times: np.ndarray
    seed: int | None

    @property
    def finish_order(self) -> list[int]:
        ft = self.finish_times
        return sorted(range(len(ft)), key=lambda i: (ft[i], i))

    @property
    def winner(self) -> int:
        return self.finish_order[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["t", *self.names]) + "\n")
        for t, row in zip(self.times, self.positions):
            buf.write(_fmt(t) + "," + ",".join(f"{x:.3f}" for x in row) + "\n")
        return buf.getvalue()


def _fmt(t: float) -> str:
    return f"{t:.3f}".rstrip("0").rstrip(".") if t != int(t) else str(int(t))


def _ticks_needed(pos, last, nfin, stop_k: int, length: float) -> float:
    """Rough tick count until every run has ``stop_k`` finishers."""
    todo = nfin < stop_k
    rem = length - pos[todo]
    est = np.where(rem > 0, rem / np.maximum(last[todo], EPS_MIN), np.inf)
    est.sort(axis=1)
    kth = np.take_along_axis(est, np.clip(stop_k - nfin[todo] - 1, 0, pos.shape[1] - 1)[:, None], 1)
    return float(np.max(kth)) * 1.15 + 2


def _continue(state: RaceState, config: RaceConfig, competitors, streams: RaceStreams,
              stop_k: int, record: bool, resample: bool):
    p = _params(config, competitors)
    R = streams.runs
    if resample or state.bounds is None:
        bounds, levels = _jitter(competitors, streams)
    else:
        bounds = np.repeat(state.bounds[None], R, 0)
        levels = np.repeat(state.levels[None], R, 0)
    pos = np.repeat(state.positions[None], R, 0)
    last = np.repeat(state.last_steps[None], R, 0)
    fin = np.repeat(state.finish_times[None], R, 0)
    nfin = np.full(R, state.n_finished, np.int64)
    t = state.t
    hists = []
    total = 0
    cap = max(1, (1 << 22) // (R * len(competitors) * 3))
    # chunks are sized from each run's latest step lengths; draws are
    # chunk-invariant so this only affects speed
    while np.any(nfin < stop_k):
        chunk = int(min(max(_ticks_needed(pos, last, nfin, stop_k, config.length) / config.tick, 8), cap))
        u = streams.ticks(chunk)
        hist = np.full((chunk, R, len(competitors)), np.nan) if record else None
        k = _run_kernel(p, pos, last, fin, nfin, t, bounds, levels, u, stop_k, hist)
        if record:
            hists.append(hist[:k])
        t += k * config.tick
        total += k
        if total > MAX_TICKS:
            raise RaceStateError("race did not finish within the tick budget")
    return pos, fin, hists, total


def run_race(config: RaceConfig, competitors: Sequence[Competitor], seed: int,
             streams: RaceStreams | None = None) -> RaceRecord:
    """Run a complete race from the configured start; deterministic in ``seed``."""
    config.validate(competitors)
    streams = streams or RaceStreams(seed, config.race_id, config.field)
    state = initial_state(config, competitors)
    _, fin, hists, total = _continue(state, config, competitors, streams, config.n, True, True)
    traj = np.concatenate([config.starts[None], *[h[:, 0, :] for h in hists]])
    times = np.arange(total + 1) * config.tick
    return RaceRecord(config, tuple(c.name for c in competitors), times, traj, fin[0], seed)


def run_race_from(snapshot: RaceState, config: RaceConfig, competitors: Sequence[Competitor],
                  streams: RaceStreams, keep_schedule: bool = False) -> list[int]:
    """Finish order of one continuation of ``snapshot``.

    The phase schedule is redrawn from ``streams`` unless ``keep_schedule``,
    so a t=0 snapshot continued with a fresh stream reproduces ``run_race``.
    """
    _check_snapshot(snapshot, config)
    _, fin, _, _ = _continue(snapshot, config, competitors, streams, config.n, False, not keep_schedule)
    ft = fin[0]
    return sorted(range(config.n), key=lambda i: (ft[i], i))


def simulate_winners(snapshot: RaceState, config: RaceConfig, competitors: Sequence[Competitor],
                     streams: RaceStreams, keep_schedule: bool = False) -> np.ndarray:
    """Winner index of each of ``streams.runs`` i.i.d. continuations."""
    _check_snapshot(snapshot, config)
    R = streams.runs
    if snapshot.n_finished:
        return np.full(R, snapshot.finish_order()[0])
    _, fin, _, _ = _continue(snapshot, config, competitors, streams, 1, False, not keep_schedule)
    return np.argmin(np.where(np.isnan(fin), np.inf, fin), axis=1)


def _check_snapshot(snapshot: RaceState, config: RaceConfig) -> None:
    n = config.n
    if not (len(snapshot.positions) == len(snapshot.last_steps) == len(snapshot.finish_times) == n):
        raise RaceConfigError("snapshot does not match the race field")


def with_overrides(comp: Competitor, **kw) -> Competitor:
    return replace(comp, **kw)
