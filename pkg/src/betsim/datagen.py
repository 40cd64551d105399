"""Analysis-ready artifacts from races and sessions.

Writers are pure functions of their inputs. Timestamps come from simulated
time plus a configured epoch, never from the wall clock.

Market stream format (one JSON object per line)::

    {"op": "mcm", "clk": "<n>", "pt": <epoch ms>, "mc": [{"id": <market>, ...}]}

The first line carries a ``marketDefinition`` with the runners. Each later
line batches every exchange event that shares a timestamp. Runner changes
``rc`` use Betfair-style keys: ``atb`` is money available to back (resting
lays), ``atl`` is money available to lay (resting backs), each a list of
``[odds, amount]`` with amount 0 meaning the level is gone; ``trd`` lists
``[odds, total traded at those odds]``. Amounts are in currency units with
two decimals.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import ladder
from .race import RaceRecord

_STATUS = {"PreRace": ("OPEN", False), "InPlay": ("OPEN", True), "Closed": ("CLOSED", True)}


# trajectories ------------------------------------------------------------

def write_trajectories(record: RaceRecord) -> str:
    return record.to_csv()


def read_trajectories(text: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    names = rows[0][1:]
    data = np.array([[float(x) for x in r] for r in rows[1:]])
    return names, data[:, 0], data[:, 1:]


@dataclass
class RebasedSeries:
    intercept: float
    slope: float
    times: np.ndarray
    residuals: np.ndarray  # (ticks, competitors)

    def fit(self) -> np.ndarray:
        return self.intercept + self.slope * self.times

    def restore(self) -> np.ndarray:
        return self.residuals + self.fit()[:, None]


def rebase(times: Sequence[float], positions: np.ndarray) -> RebasedSeries:
    """Subtract one least-squares line pooled over every competitor's points."""
    t = np.asarray(times, float)
    d = np.asarray(positions, float)
    if d.ndim == 1:
        d = d[:, None]
    if len(t) < 2:
        raise ValueError("rebasing needs at least two time points")
    tt = np.repeat(t, d.shape[1])
    slope, intercept = np.polyfit(tt, d.ravel(), 1)
    return RebasedSeries(float(intercept), float(slope), t, d - (intercept + slope * t)[:, None])


def rebase_record(record: RaceRecord) -> RebasedSeries:
    return rebase(record.times, record.positions)


def write_rebased(series: RebasedSeries, names: Sequence[str]) -> str:
    buf = io.StringIO()
    buf.write(",".join(["t", *names]) + "\n")
    for t, row in zip(series.times, series.residuals):
        buf.write(_fmt_t(t) + "," + ",".join(f"{x:.3f}" for x in row) + "\n")
    return buf.getvalue()


def _fmt_t(t: float) -> str:
    return str(int(t)) if t == int(t) else f"{t:.3f}".rstrip("0")


# market stream -----------------------------------------------------------

def _money(cents: int) -> float:
    return round(cents / 100, 2)


def write_market_stream(journal: Sequence[dict], market_id: str, runners: Sequence[tuple[int, str]],
                        epoch_ms: int) -> list[str]:
    """Market-change messages for ``journal``; one line per timestamp batch."""
    dumps = lambda m: json.dumps(m, separators=(",", ":"))
    header = {"op": "mcm", "clk": "0", "pt": epoch_ms,
              "mc": [{"id": market_id, "img": True, "marketDefinition": {
                  "status": "OPEN", "inPlay": False,
                  "runners": [{"id": c, "name": name} for c, name in runners]}}]}
    lines = [dumps(header)]
    traded: dict[tuple[int, int], int] = {}
    i = 0
    while i < len(journal):
        ms = journal[i]["ms"]
        j = i
        cells: dict[tuple[int, str, int], int] = {}
        trades: dict[tuple[int, int], int] = {}
        md = None
        while j < len(journal) and journal[j]["ms"] == ms:
            ev = journal[j]
            for c, side, tick, v in ev["cells"]:
                cells[c, side, tick] = v
            if ev["kind"] == "match":
                key = ev["competitor"], ev["tick"]
                traded[key] = traded.get(key, 0) + ev["stake"]
                trades[key] = traded[key]
            elif ev["kind"] == "phase":
                status, in_play = _STATUS[ev["phase"]]
                md = {"status": status, "inPlay": in_play}
            elif ev["kind"] == "settle":
                md = {"status": "CLOSED", "inPlay": True, "settledWinner": ev["winner"]}
            j += 1
        rc: dict[int, dict] = {}
        for (c, side, tick), v in sorted(cells.items()):
            key = "atl" if side == "back" else "atb"
            rc.setdefault(c, {"id": c}).setdefault(key, []).append([ladder.odds_of(tick), _money(v)])
        for (c, tick), v in sorted(trades.items()):
            rc.setdefault(c, {"id": c}).setdefault("trd", []).append([ladder.odds_of(tick), _money(v)])
        mc: dict = {"id": market_id}
        if rc:
            mc["rc"] = [rc[c] for c in sorted(rc)]
        if md is not None:
            mc["marketDefinition"] = md
        lines.append(dumps({"op": "mcm", "clk": str(len(lines)), "pt": epoch_ms + ms, "mc": [mc]}))
        i = j
    return lines


@dataclass
class StreamBook:
    """Book state rebuilt from a market stream."""

    cells: dict[tuple[int, str, int], int]
    traded: dict[tuple[int, int], int]
    status: str
    in_play: bool
    winner: int | None = None


def replay_market_stream(lines: Iterable[str]) -> StreamBook:
    book = StreamBook({}, {}, "OPEN", False)
    for line in lines:
        msg = json.loads(line)
        for mc in msg["mc"]:
            if mc.get("img"):
                book.cells.clear()
                book.traded.clear()
            md = mc.get("marketDefinition")
            if md:
                book.status, book.in_play = md["status"], md["inPlay"]
                book.winner = md.get("settledWinner", book.winner)
            for r in mc.get("rc", []):
                c = r["id"]
                for key, side in (("atb", "lay"), ("atl", "back")):
                    for odds, amount in r.get(key, []):
                        k = (c, side, ladder.index_of(odds))
                        cents = int(round(amount * 100))
                        if cents:
                            book.cells[k] = cents
                        else:
                            book.cells.pop(k, None)
                for odds, amount in r.get("trd", []):
                    book.traded[c, ladder.index_of(odds)] = int(round(amount * 100))
    return book


# time series ------------------------------------------------------------

def _odds(x: float | None) -> str:
    return "" if x is None else f"{x:.2f}"


def write_market_series(series) -> str:
    """Top of book per competitor per instant: ms, competitor, touch, last traded, volume."""
    buf = io.StringIO()
    buf.write("ms,competitor,best_back,best_lay,last_traded,volume\n")
    for r in series:
        buf.write(f"{r.ms},{r.competitor},{_odds(r.best_back)},{_odds(r.best_lay)},"
                  f"{_odds(r.last_traded)},{r.volume / 100:.2f}\n")
    return buf.getvalue()


def write_sentiment(series: Sequence[tuple[float, np.ndarray]], names: Sequence[str]) -> str:
    """Belief series as percentages; each row sums to 100 up to rounding."""
    buf = io.StringIO()
    buf.write(",".join(["t", *names]) + "\n")
    for t, p in series:
        p = np.asarray(p, float)
        pct = 100.0 * p / p.sum()
        buf.write(_fmt_t(t) + "," + ",".join(f"{x:.2f}" for x in pct) + "\n")
    return buf.getvalue()


# session bundle ------------------------------------------------------------

def write_session(record, out_dir: str, formats: Sequence[str] = ("csv", "jsonl")) -> list[str]:
    """Write every artifact of a session under ``out_dir``; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    formats = {"csv", "jsonl"} if "all" in formats else set(formats)
    names = record.race.names
    files: dict[str, str] = {}
    if "csv" in formats:
        files["race.csv"] = write_trajectories(record.race)
        files["rebased.csv"] = write_rebased(rebase_record(record.race), names)
        files["market.csv"] = write_market_series(record.market_series)
        for b, s in sorted(record.sentiment.items()):
            files[f"sentiment_{b}.csv"] = write_sentiment(s, names)
    if "jsonl" in formats:
        cfg = record.config
        runners = list(zip(cfg.race.field, names))
        files["market_stream.jsonl"] = "\n".join(
            write_market_stream(record.journal, cfg.race.race_id, runners, cfg.epoch_ms)) + "\n"
    summary = {
        "seed": record.config.seed,
        "winner": int(record.winner),
        "finish_order": [int(i) for i in record.race.finish_order],
        "pnl": {str(k): v for k, v in sorted(record.pnl.items())},
        "commission_pot": record.commission_pot,
        "matched_bets": sum(1 for e in record.journal if e["kind"] == "match"),
        "rejected": record.rejected,
        "record_digest": record.digest(),
    }
    files["summary.json"] = json.dumps(summary, sort_keys=True, indent=1) + "\n"
    paths = []
    for name in sorted(files):
        p = os.path.join(out_dir, name)
        with open(p, "w", encoding="utf-8", newline="\n") as f:
            f.write(files[name])
        paths.append(p)
    return paths
