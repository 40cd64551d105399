"""Win-probability estimates from ensembles of dry-run race continuations."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import ladder
from .race import Competitor, RaceConfig, RaceState, RaceStreams, StepDist, simulate_winners


@dataclass(frozen=True)
class ParamNoise:
    """Lognormal multiplicative noise sds per parameter class."""

    step: float = 0.0
    pref: float = 0.0
    resp: float = 0.0

    def __post_init__(self):
        if min(self.step, self.pref, self.resp) < 0:
            raise ValueError("noise sds must be >= 0")

    @property
    def zero(self) -> bool:
        return self.step == self.pref == self.resp == 0


@dataclass(frozen=True)
class BeliefProfile:
    n_dryruns: int = 100
    param_noise: ParamNoise = ParamNoise()
    post_noise: float = 0.0

    def __post_init__(self):
        if self.n_dryruns < 0 or self.post_noise < 0:
            raise ValueError("n_dryruns and post_noise must be >= 0")


@dataclass
class ProbEstimate:
    probs: np.ndarray
    n_samples: int
    snapshot_time: float
    wins: np.ndarray | None = None


def perturb_params(competitors: Sequence[Competitor], noise: ParamNoise,
                   rng: np.random.Generator) -> list[Competitor]:
    """Private copy of the field with each parameter class scaled by exp(N(0, sd))."""
    if noise.zero:
        return list(competitors)
    out = []
    for c in competitors:
        kw = {}
        if noise.step:
            f = float(np.exp(rng.normal(0, noise.step)))
            if c.step.kind == "uniform":
                kw["step"] = StepDist("uniform", max(c.step.a * f, 1e-9), max(c.step.b * f, 1e-9))
            else:
                kw["step"] = StepDist(c.step.kind, c.step.a + np.log(f), c.step.b)
        if noise.pref and c.pref:
            f = np.exp(rng.normal(0, noise.pref, len(c.pref)))
            kw["pref"] = tuple(float(x) for x in np.clip(np.asarray(c.pref) * f, 0, 1))
        if noise.resp:
            f = np.exp(rng.normal(0, noise.resp, len(c.phases)))
            kw["phases"] = tuple((b, float(lv * g)) for (b, lv), g in zip(c.phases, f))
        out.append(replace(c, **kw))
    return out


def estimate_probs(snapshot: RaceState, config: RaceConfig, competitors: Sequence[Competitor],
                   profile: BeliefProfile, rng: np.random.Generator) -> ProbEstimate:
    """Laplace-smoothed win frequencies over ``profile.n_dryruns`` continuations."""
    n, d = config.n, profile.n_dryruns
    if d == 0:
        probs = np.full(n, 1.0 / n)
        wins = np.zeros(n, np.int64)
    else:
        field = perturb_params(competitors, profile.param_noise, rng)
        streams = RaceStreams.from_rng(rng, config.race_id, config.field, runs=d)
        wins = np.bincount(simulate_winners(snapshot, config, field, streams), minlength=n)
        probs = (wins + 1.0) / (d + n)
    if profile.post_noise:
        probs = distort(probs, profile.post_noise, rng)
    return ProbEstimate(probs, d, snapshot.t, wins)


def distort(probs: np.ndarray, sd: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise on a probability vector, floored and renormalized."""
    p = np.maximum(probs + rng.normal(0, sd, len(probs)), 1e-6)
    return p / p.sum()


def win_counts(snapshot: RaceState, config: RaceConfig, competitors: Sequence[Competitor],
               runs: int, seed: int, batch: int = 20_000) -> np.ndarray:
    """Raw win counts over ``runs`` continuations, split into memory-sized batches."""
    rng = np.random.default_rng(seed)
    wins = np.zeros(config.n, np.int64)
    left = runs
    while left:
        k = min(batch, left)
        streams = RaceStreams.from_rng(rng, config.race_id, config.field, runs=k)
        wins += np.bincount(simulate_winners(snapshot, config, competitors, streams), minlength=config.n)
        left -= k
    return wins


def fair_decimal_odds(p: float) -> float:
    if not p > 0:
        raise ValueError(f"probability must be > 0, got {p}")
    return min(max(1.0 / p, ladder.MIN_ODDS), ladder.MAX_ODDS)
