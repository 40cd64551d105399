"""Decimal-odds tick ladder from 1.01 to 1000.

Odds are carried internally as integer hundredths (``201`` is 2.01) so that
ladder lookups and liability arithmetic stay exact.
"""
from __future__ import annotations

import bisect
import math

# (band upper bound, step) in hundredths; each band starts where the previous ended.
_BANDS = (
    (200, 1),
    (300, 2),
    (400, 5),
    (600, 10),
    (1000, 20),
    (2000, 50),
    (3000, 100),
    (5000, 200),
    (10000, 500),
    (100000, 1000),
)


def _build() -> tuple[int, ...]:
    ticks = [101]
    lo = 101
    for hi, step in _BANDS:
        v = ticks[-1] + step
        while v <= hi:
            ticks.append(v)
            v += step
        lo = hi
    assert ticks[-1] == 100000 and lo == 100000
    return tuple(ticks)


TICKS: tuple[int, ...] = _build()
N_TICKS = len(TICKS)
MIN_ODDS = TICKS[0] / 100
MAX_ODDS = TICKS[-1] / 100
_INDEX = {v: i for i, v in enumerate(TICKS)}


class OffLadderError(ValueError):
    pass


def odds_of(index: int) -> float:
    return TICKS[index] / 100


def hundredths(index: int) -> int:
    return TICKS[index]


def index_of(odds: float | int) -> int:
    """Exact ladder index of ``odds``; raises OffLadderError if not a tick."""
    h = round(float(odds) * 100)
    if abs(float(odds) * 100 - h) > 1e-6:
        raise OffLadderError(f"odds {odds} are not on the ladder")
    try:
        return _INDEX[h]
    except KeyError:
        raise OffLadderError(f"odds {odds} are not on the ladder") from None


def is_tick(odds: float) -> bool:
    try:
        index_of(odds)
    except OffLadderError:
        return False
    return True


def nearest_index(odds: float) -> int:
    """Index of the tick closest to ``odds`` (clamped to the ladder range)."""
    if not math.isfinite(odds) or odds >= MAX_ODDS:
        return N_TICKS - 1
    h = odds * 100
    j = bisect.bisect_left(TICKS, h)
    if j <= 0:
        return 0
    if j >= N_TICKS:
        return N_TICKS - 1
    return j if TICKS[j] - h < h - TICKS[j - 1] else j - 1


def clamp_index(index: int) -> int:
    return min(max(index, 0), N_TICKS - 1)
