"""Win-market betting exchange for a single race.

All money is integer cents and all odds are ladder tick indices, so every
accounting identity holds exactly. Lay liabilities use the usual exchange
convention ``stake * (odds - 1)``: the layer escrows that amount rounded up
when the order arrives, and each matched slice carries its liability
rounded down, with the difference refunded at fill time.
"""
from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable

from . import ladder


class Side(str, Enum):
    BACK = "back"
    LAY = "lay"


class Phase(str, Enum):
    PRE_RACE = "PreRace"
    IN_PLAY = "InPlay"
    CLOSED = "Closed"


class Status(str, Enum):
    OPEN = "Open"
    PART_FILLED = "PartFilled"
    FILLED = "Filled"
    CANCELLED = "Cancelled"
    EXPIRED = "Expired"


class ExchangeError(Exception):
    pass


class OrderRejected(ExchangeError):
    pass


class MarketStateError(ExchangeError):
    pass


def lay_liability(stake: int, tick: int, round_up: bool = True) -> int:
    k = ladder.hundredths(tick) - 100
    q, r = divmod(stake * k, 100)
    return q + (1 if round_up and r else 0)


@dataclass(slots=True)
class Order:
    order_id: int
    bettor_id: int
    competitor: int
    side: Side
    tick: int
    stake: int
    arrival_seq: int
    arrival_ms: int
    unmatched: int
    reserve: int
    status: Status = Status.OPEN

    @property
    def odds(self) -> float:
        return ladder.odds_of(self.tick)

    @property
    def is_open(self) -> bool:
        return self.unmatched > 0 and self.status in (Status.OPEN, Status.PART_FILLED)


@dataclass(frozen=True, slots=True)
class MatchedBet:
    back_order_id: int
    lay_order_id: int
    backer: int
    layer: int
    competitor: int
    tick: int
    stake: int
    liability: int
    match_ms: int

    @property
    def odds(self) -> float:
        return ladder.odds_of(self.tick)


@dataclass(slots=True)
class Account:
    bettor_id: int
    balance: int
    escrow: int = 0


@dataclass
class SubmissionReport:
    order_id: int
    matches: list[MatchedBet]
    resting_unmatched: int


@dataclass
class SettlementReport:
    winner: int
    net: dict[int, int]
    commission: dict[int, int]
    commission_total: int
    rounding_remainder: Fraction

    @property
    def credited(self) -> dict[int, int]:
        return {b: n - self.commission.get(b, 0) for b, n in self.net.items()}


class Market:
    """Order book, accounts, and journal for one race's win market.

    ``crossing=True`` lets marketable orders trade through the touch at the
    resting order's odds; ``crossing=False`` only pairs equal odds.
    """

    def __init__(
        self,
        competitors: Iterable[int],
        accounts: Iterable[Account] | dict[int, int] = (),
        crossing: bool = True,
        audit: bool = False,
    ):
        self.competitors = tuple(competitors)
        self._cset = frozenset(self.competitors)
        if isinstance(accounts, dict):
            accounts = [Account(b, bal) for b, bal in accounts.items()]
        self.accounts: dict[int, Account] = {a.bettor_id: a for a in accounts}
        self.crossing = crossing
        self.audit = audit
        self.phase = Phase.PRE_RACE
        self.settled = False
        self.commission_pot = 0
        self.orders: dict[int, Order] = {}
        self.matched: list[MatchedBet] = []
        self.journal: list[dict] = []
        self.last_traded: dict[int, int] = {}
        self.traded_volume: dict[int, int] = {c: 0 for c in self.competitors}
        self._seq = 0
        self._queues: dict[tuple[int, Side], dict[int, deque[Order]]] = {}
        self._agg: dict[tuple[int, Side], dict[int, int]] = {}
        self._active: dict[tuple[int, Side], list[int]] = {}
        for c in self.competitors:
            for s in Side:
                self._queues[c, s] = {}
                self._agg[c, s] = {}
                self._active[c, s] = []
        self._open_by_bettor: dict[int, dict[int, Order]] = {}
        self._money0 = self.total_money()

    # accounts ---------------------------------------------------------

    def open_account(self, bettor_id: int, balance: int) -> Account:
        if bettor_id in self.accounts:
            raise ExchangeError(f"account {bettor_id} already exists")
        if balance < 0:
            raise ExchangeError("opening balance must be non-negative")
        acct = self.accounts[bettor_id] = Account(bettor_id, balance)
        self._money0 += balance
        return acct

    def total_money(self) -> int:
        return sum(a.balance + a.escrow for a in self.accounts.values()) + self.commission_pot

    def open_orders(self, bettor_id: int) -> list[Order]:
        return list(self._open_by_bettor.get(bettor_id, {}).values())

    # book views ---------------------------------------------------------

    def best_back(self, competitor: int) -> int | None:
        """Lowest-odds unmatched back tick (the back touch)."""
        a = self._active[competitor, Side.BACK]
        return a[0] if a else None

    def best_lay(self, competitor: int) -> int | None:
        """Highest-odds unmatched lay tick (the lay touch)."""
        a = self._active[competitor, Side.LAY]
        return a[-1] if a else None

    def aggregate(self, competitor: int, side: Side, tick: int) -> int:
        return self._agg[competitor, side].get(tick, 0)

    def mid_odds(self, competitor: int) -> float | None:
        bb, bl = self.best_back(competitor), self.best_lay(competitor)
        if bb is not None and bl is not None:
            return (ladder.odds_of(bb) + ladder.odds_of(bl)) / 2
        if bb is not None:
            return ladder.odds_of(bb)
        if bl is not None:
            return ladder.odds_of(bl)
        return None

    def grid_view(self, depth: int = 3) -> list[dict]:
        """Best ``depth`` back and lay cells per competitor, favourite first.

        Cells are ``(odds, stake_cents)`` listed from the touch outward.
        """
        if depth < 1:
            raise ValueError("depth must be >= 1")
        rows = []
        for c in self.competitors:
            backs = self._active[c, Side.BACK][:depth]
            lays = self._active[c, Side.LAY][::-1][:depth]
            rows.append({
                "competitor": c,
                "back": [(ladder.odds_of(t), self._agg[c, Side.BACK][t]) for t in backs],
                "lay": [(ladder.odds_of(t), self._agg[c, Side.LAY][t]) for t in lays],
                "mid": self.mid_odds(c),
            })
        rows.sort(key=lambda r: (r["mid"] is None, r["mid"] or 0.0, r["competitor"]))
        return rows

    def ladder_view(self, competitor: int) -> list[tuple[float, int, int]]:
        """Sparse full-depth ladder: ``(odds, back_agg, lay_agg)`` ascending."""
        if competitor not in self._cset:
            raise ExchangeError(f"unknown competitor {competitor}")
        ticks = sorted(set(self._active[competitor, Side.BACK]) | set(self._active[competitor, Side.LAY]))
        b, l = self._agg[competitor, Side.BACK], self._agg[competitor, Side.LAY]
        return [(ladder.odds_of(t), b.get(t, 0), l.get(t, 0)) for t in ticks]

    def cells(self) -> dict[tuple[int, str, int], int]:
        """All nonzero book cells keyed by (competitor, side, tick)."""
        out = {}
        for (c, s), agg in self._agg.items():
            for t, v in agg.items():
                out[c, s.value, t] = v
        return out

    # internals ----------------------------------------------------------

    def _log(self, event: dict) -> None:
        event["seq"] = len(self.journal)
        if self.audit:
            money = self.total_money()
            if money != self._money0:
                raise AssertionError(f"money not conserved: {money} != {self._money0} after {event}")
            event["money"] = money
        self.journal.append(event)

    def _set_cell(self, c: int, side: Side, tick: int, delta: int, cells: list) -> None:
        agg = self._agg[c, side]
        v = agg.get(tick, 0) + delta
        active = self._active[c, side]
        if v:
            if tick not in agg:
                bisect.insort(active, tick)
            agg[tick] = v
        else:
            del agg[tick]
            del active[bisect.bisect_left(active, tick)]
            q = self._queues[c, side].get(tick)
            if q is not None and not any(o.unmatched for o in q):
                del self._queues[c, side][tick]
        cells.append((c, side.value, tick, v))

    def _release(self, order: Order, status: Status, cells: list) -> int:
        amount = order.unmatched
        if amount == 0:
            return 0
        acct = self.accounts[order.bettor_id]
        acct.balance += order.reserve
        acct.escrow -= order.reserve
        released = order.reserve
        order.reserve = 0
        order.unmatched = 0
        order.status = status
        self._open_by_bettor[order.bettor_id].pop(order.order_id, None)
        self._set_cell(order.competitor, order.side, order.tick, -amount, cells)
        return released

    def _fill(self, resting: Order, incoming: Order, ms: int, cells: list) -> MatchedBet:
        s = min(resting.unmatched, incoming.unmatched)
        tick = resting.tick
        back, lay = (resting, incoming) if resting.side is Side.BACK else (incoming, resting)
        liability = lay_liability(s, tick, round_up=False)

        back.unmatched -= s
        back.reserve -= s
        old = lay.reserve
        lay.unmatched -= s
        lay.reserve = lay_liability(lay.unmatched, lay.tick)
        refund = old - lay.reserve - liability
        assert refund >= 0
        layer = self.accounts[lay.bettor_id]
        layer.balance += refund
        layer.escrow -= refund

        for o in (back, lay):
            if o.unmatched == 0:
                o.status = Status.FILLED
                self._open_by_bettor[o.bettor_id].pop(o.order_id, None)
            else:
                o.status = Status.PART_FILLED
        self._set_cell(resting.competitor, resting.side, tick, -s, cells)

        bet = MatchedBet(back.order_id, lay.order_id, back.bettor_id, lay.bettor_id,
                         resting.competitor, tick, s, liability, ms)
        self.matched.append(bet)
        self.last_traded[bet.competitor] = tick
        self.traded_volume[bet.competitor] += s
        self._log({"kind": "match", "ms": ms, "back_id": back.order_id, "lay_id": lay.order_id,
                   "competitor": bet.competitor, "tick": tick, "stake": s,
                   "liability": liability, "refund": refund, "cells": cells[:]})
        cells.clear()
        return bet

    def _candidate_ticks(self, order: Order) -> list[int]:
        opp = Side.LAY if order.side is Side.BACK else Side.BACK
        active = self._active[order.competitor, opp]
        if not self.crossing:
            return [order.tick] if order.tick in self._agg[order.competitor, opp] else []
        if order.side is Side.BACK:
            # lays at odds >= ours, best (highest) first
            i = bisect.bisect_left(active, order.tick)
            return active[i:][::-1]
        i = bisect.bisect_right(active, order.tick)
        return active[:i]

    # operations ---------------------------------------------------------

    def submit(self, bettor_id: int, competitor: int, side: Side | str, tick: int,
               stake: int, ms: int = 0) -> SubmissionReport:
        """Place a back or lay; match what is marketable and rest the rest."""
        side = Side(side)
        if self.phase is Phase.CLOSED:
            raise OrderRejected("market is closed")
        if competitor not in self._cset:
            raise OrderRejected(f"unknown competitor {competitor}")
        if not (isinstance(tick, int) and 0 <= tick < ladder.N_TICKS):
            raise OrderRejected(f"tick {tick!r} is off the ladder")
        if not isinstance(stake, int) or stake <= 0:
            raise OrderRejected("stake must be a positive integer number of cents")
        acct = self.accounts.get(bettor_id)
        if acct is None:
            raise OrderRejected(f"unknown bettor {bettor_id}")
        need = stake if side is Side.BACK else lay_liability(stake, tick)
        if need > acct.balance:
            raise OrderRejected("insufficient funds")

        self._seq += 1
        oid = self._seq
        order = Order(oid, bettor_id, competitor, side, tick, stake, oid, ms, stake, need)
        acct.balance -= need
        acct.escrow += need
        self.orders[oid] = order
        self._open_by_bettor.setdefault(bettor_id, {})[oid] = order
        self._log({"kind": "submit", "ms": ms, "order_id": oid, "bettor": bettor_id,
                   "competitor": competitor, "side": side.value, "tick": tick,
                   "stake": stake, "reserve": need, "cells": []})

        matches = []
        cells: list = []
        opp = Side.LAY if side is Side.BACK else Side.BACK
        queues = self._queues[competitor, opp]
        for t in self._candidate_ticks(order):
            q = queues[t]
            while order.unmatched and q:
                resting = q[0]
                if resting.unmatched == 0:
                    q.popleft()
                    continue
                matches.append(self._fill(resting, order, ms, cells))
                if resting.unmatched == 0:
                    q.popleft()
            if not q and t in queues and t not in self._agg[competitor, opp]:
                del queues[t]
            if not order.unmatched:
                break

        if order.unmatched:
            self._queues[competitor, side].setdefault(tick, deque()).append(order)
            self._set_cell(competitor, side, tick, order.unmatched, cells)
            self._log({"kind": "rest", "ms": ms, "order_id": oid, "amount": order.unmatched,
                       "cells": cells[:]})
        return SubmissionReport(oid, matches, order.unmatched)

    def cancel(self, order_id: int, ms: int = 0) -> int:
        """Cancel the unmatched remainder of an order; returns the amount."""
        order = self.orders.get(order_id)
        if order is None:
            raise ExchangeError(f"unknown order {order_id}")
        if not order.is_open:
            return 0
        cells: list = []
        amount = order.unmatched
        released = self._release(order, Status.CANCELLED, cells)
        self._log({"kind": "cancel", "ms": ms, "order_id": order_id, "amount": amount,
                   "released": released, "cells": cells})
        return amount

    def _sweep(self, status: Status, ms: int) -> int:
        n = 0
        for order in list(self.orders.values()):
            if order.is_open:
                cells: list = []
                amount = order.unmatched
                released = self._release(order, status, cells)
                kind = "cancel" if status is Status.CANCELLED else "expire"
                self._log({"kind": kind, "ms": ms, "order_id": order.order_id, "amount": amount,
                           "released": released, "sweep": True, "cells": cells})
                n += 1
        for queues in self._queues.values():
            queues.clear()
        return n

    def transition_in_play(self, ms: int = 0) -> int:
        """Cancel every unmatched remainder and turn the market in-play."""
        if self.phase is not Phase.PRE_RACE:
            raise MarketStateError(f"cannot go in-play from {self.phase.value}")
        n = self._sweep(Status.CANCELLED, ms)
        self.phase = Phase.IN_PLAY
        self._log({"kind": "phase", "ms": ms, "phase": self.phase.value, "cells": []})
        return n

    def close(self, ms: int = 0) -> int:
        """Expire every unmatched remainder and close betting."""
        if self.phase is not Phase.IN_PLAY:
            raise MarketStateError(f"cannot close from {self.phase.value}")
        n = self._sweep(Status.EXPIRED, ms)
        self.phase = Phase.CLOSED
        self._log({"kind": "phase", "ms": ms, "phase": self.phase.value, "cells": []})
        return n

    def settle(self, winner: int, commission_rate: float | Fraction = 0, ms: int = 0) -> SettlementReport:
        if winner not in self._cset:
            raise ExchangeError(f"winner {winner} is not in the field")
        if self.phase is not Phase.CLOSED:
            raise MarketStateError("market must be closed before settlement")
        if self.settled:
            raise MarketStateError("market already settled")
        rate = Fraction(commission_rate).limit_denominator(10**9)
        net: dict[int, int] = {}
        for bet in self.matched:
            backer, layer = self.accounts[bet.backer], self.accounts[bet.layer]
            backer.escrow -= bet.stake
            layer.escrow -= bet.liability
            if bet.competitor == winner:
                backer.balance += bet.stake + bet.liability
                delta = bet.liability
            else:
                layer.balance += bet.stake + bet.liability
                delta = -bet.stake
            net[bet.backer] = net.get(bet.backer, 0) + delta
            net[bet.layer] = net.get(bet.layer, 0) - delta

        commission: dict[int, int] = {}
        remainder = Fraction(0)
        for b in sorted(net):
            if net[b] > 0 and rate:
                exact = net[b] * rate
                charged = -(-exact.numerator // exact.denominator)
                remainder += charged - exact
                commission[b] = charged
                self.accounts[b].balance -= charged
                self.commission_pot += charged
        self.settled = True
        report = SettlementReport(winner, net, commission, sum(commission.values()), remainder)
        self._log({"kind": "settle", "ms": ms, "winner": winner,
                   "commission_rate": str(rate), "net": dict(sorted(net.items())),
                   "commission": commission, "cells": []})
        return report

    # checks -------------------------------------------------------------

    def recomputed_escrow(self) -> dict[int, int]:
        esc = {b: 0 for b in self.accounts}
        for o in self.orders.values():
            if o.is_open:
                esc[o.bettor_id] += o.reserve
        if not self.settled:
            for bet in self.matched:
                esc[bet.backer] += bet.stake
                esc[bet.layer] += bet.liability
        return esc

    def check_invariants(self) -> None:
        assert self.total_money() == self._money0, "money not conserved"
        for b, e in self.recomputed_escrow().items():
            a = self.accounts[b]
            assert a.escrow == e, f"escrow mismatch for {b}: {a.escrow} != {e}"
            assert a.balance >= 0 and a.escrow >= 0
        for (c, s), agg in self._agg.items():
            want: dict[int, int] = {}
            for o in self.orders.values():
                if o.is_open and o.competitor == c and o.side is s:
                    want[o.tick] = want.get(o.tick, 0) + o.unmatched
            assert agg == want, f"aggregate mismatch on {(c, s)}"
            assert self._active[c, s] == sorted(agg)
        if self.crossing:
            for c in self.competitors:
                bb, bl = self.best_back(c), self.best_lay(c)
                assert bb is None or bl is None or bl < bb, f"crossed book on {c}"


def replay_journal(journal: list[dict], initial_balances: dict[int, int],
                   competitors: Iterable[int], crossing: bool = True) -> Market:
    """Re-execute the command events of ``journal`` on a fresh market."""
    m = Market(competitors, dict(initial_balances), crossing=crossing)
    for ev in journal:
        k = ev["kind"]
        if k == "submit":
            m.submit(ev["bettor"], ev["competitor"], Side(ev["side"]), ev["tick"], ev["stake"], ev["ms"])
        elif k == "cancel" and not ev.get("sweep"):
            m.cancel(ev["order_id"], ev["ms"])
        elif k == "phase":
            if ev["phase"] == Phase.IN_PLAY.value:
                m.transition_in_play(ev["ms"])
            elif ev["phase"] == Phase.CLOSED.value:
                m.close(ev["ms"])
        elif k == "settle":
            m.settle(ev["winner"], Fraction(ev["commission_rate"]), ev["ms"])
    return m
