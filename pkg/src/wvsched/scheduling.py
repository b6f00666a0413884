"""Packet scheduling within one slot.

Two families: the decomposed sequential scheduler, which walks the context
DAG root-by-root and sizes each DU's transmission against a per-DU
continuation value, and the simple reference schedulers (EDF, FIFO, HDF)
that fill a fixed packet capacity in a static order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from wvsched.model import Context, GopTemplate, ModelError, ScheduleAction
from wvsched.mdp import ChannelView


def dependency_order_check(edges: Sequence[tuple[int, int]],
                           order: Sequence[int]) -> bool:
    """True iff no slot index appears in `order` before one of its ancestors."""
    pos = {idx: k for k, idx in enumerate(order)}
    return all(pos[p] < pos[c] for p, c in edges)


# ---------------------------------------------------------------------------
# Per-DU continuation tables
# ---------------------------------------------------------------------------

class SingleDuModel:
    """One DU instance's scheduling problem over its lifetime in the window.

    State: (age since entering the context, remaining packets, channel-view
    state). Per-slot payoff is (1-delta) * (q - price) * sends; the value of
    later recurrences of the same DU does not depend on today's sends, so the
    instance is solved with terminal value zero.
    """

    def __init__(self, du, window: int, view: ChannelView, discount: float):
        self.du = du
        self.window = int(window)
        self.view = view
        self.discount = float(discount)
        self.cap = du.max_size

    def solve(self, price: np.ndarray) -> "DuValueTable":
        """Backward induction over ages; returns value and post-decision tables."""
        n_view = len(self.view)
        w, cap, delta = self.window, self.cap, self.discount
        values = np.zeros((w + 1, cap + 1, n_view))       # values[w] == 0 terminal
        post = np.zeros((w, cap + 1, n_view))
        margin = (1.0 - delta) * (self.du.distortion_impact - np.asarray(price))
        for age in range(w - 1, -1, -1):
            if age < w - 1:
                post[age] = values[age + 1] @ self.view.transition.T
            # q[y, x, v]: send y of x packets at this age
            for x in range(cap + 1):
                ys = np.arange(x + 1)
                q = ys[:, None] * margin[None, :] + delta * post[age, x - ys, :]
                values[age, x] = q.max(axis=0)
        return DuValueTable(self, values, post)


@dataclass
class DuValueTable:
    """Solved per-DU tables: values[age, x, view] and post[age, x_after, view]."""

    model: SingleDuModel
    values: np.ndarray
    post: np.ndarray

    def continuation(self, age: int, x_after: int, view_state: int) -> float:
        """E[value at age+1 | channel], 0 when the DU expires after this slot."""
        if age >= self.model.window - 1:
            return 0.0
        return float(self.post[age, x_after, view_state])

    def post_slice(self, age: int, x: int, view_state: int) -> np.ndarray:
        """Continuations for sends y = 0..x, i.e. post[age, x - y] vectorized."""
        if age >= self.model.window - 1:
            return np.zeros(x + 1)
        return self.post[age, x::-1, view_state]


def build_du_tables(template: GopTemplate, view: ChannelView, discount: float,
                    price: np.ndarray) -> dict[int, DuValueTable]:
    """Solve one SingleDuModel per DU type at the given per-view-state price."""
    return {
        du.du_id: SingleDuModel(du, template.window, view, discount).solve(price)
        for du in template.dus
    }


# ---------------------------------------------------------------------------
# Decomposed sequential scheduling
# ---------------------------------------------------------------------------

class ContinuationTables(Mapping):
    """Read-only mapping du_id -> object with .continuation(age, x_after, view)."""

    def __init__(self, tables):
        self._tables = dict(tables)

    def __getitem__(self, du_id):
        return self._tables[du_id]

    def __iter__(self):
        return iter(self._tables)

    def __len__(self):
        return len(self._tables)


def decomposed_schedule(context: Context, buffer: Sequence[int], view_state: int,
                        price: float | Sequence[float], tables: Mapping,
                        discount: float) -> tuple[ScheduleAction, list[int]]:
    """Sequential per-DU scheduling over the context DAG.

    Each round picks, among current roots, the DU and send count maximizing
    (1-delta) * (q - price) * y + delta * continuation(age, x - y), then
    removes that DU. Returns the assembled action and the processing order.
    `price` may be a scalar reused every round or a per-round sequence.
    Ties: lower send count, then lower slot index.
    """
    n = len(context)
    sends = [0] * n
    order: list[int] = []
    if n == 0:
        return ScheduleAction(()), order
    done = [False] * n
    parents = [[] for _ in range(n)]
    for p, c in context.edges:
        parents[c].append(p)
    for k in range(n):
        lam = price[min(k, len(price) - 1)] if isinstance(price, (list, tuple)) else price
        best = None
        for i in range(n):
            if done[i] or any(not done[p] for p in parents[i]):
                continue
            slot = context.slots[i]
            age = context.age_of(i)
            tab = tables[slot.du.du_id]
            margin = (1.0 - discount) * (slot.du.distortion_impact - lam)
            x = buffer[i]
            cont = getattr(tab, "post_slice", None)
            if cont is not None:
                vals = margin * np.arange(x + 1) + discount * cont(age, x, view_state)
                y_best = int(np.argmax(vals))
                val = float(vals[y_best])
                if best is None or val > best[0] + 1e-12:
                    best = (val, i, y_best)
            else:
                for y in range(x + 1):
                    val = margin * y + discount * tab.continuation(age, x - y, view_state)
                    if best is None or val > best[0] + 1e-12:
                        best = (val, i, y)
        _, i, y = best
        sends[i] = y
        done[i] = True
        order.append(i)
    return ScheduleAction(tuple(sends)), order


# ---------------------------------------------------------------------------
# Simple schedulers
# ---------------------------------------------------------------------------

def _fill(context: Context, buffer: Sequence[int], capacity: int,
          ranked: Sequence[int]) -> ScheduleAction:
    if capacity < 0:
        raise ModelError("capacity must be >= 0")
    sends = [0] * len(context)
    room = capacity
    for i in ranked:
        take = min(buffer[i], room)
        sends[i] = take
        room -= take
        if room == 0:
            break
    return ScheduleAction(tuple(sends))


def edf_schedule(context: Context, buffer: Sequence[int], capacity: int) -> ScheduleAction:
    """Fill capacity in ascending deadline order; ties prefer higher impact."""
    ranked = sorted(range(len(context)),
                    key=lambda i: (context.slots[i].remaining,
                                   -context.slots[i].du.distortion_impact, i))
    return _fill(context, buffer, capacity, ranked)


def fifo_schedule(context: Context, buffer: Sequence[int], capacity: int) -> ScheduleAction:
    """Fill capacity in arrival order (earlier GOP first, then DU id)."""
    ranked = sorted(range(len(context)),
                    key=lambda i: (context.slots[i].key[0], context.slots[i].key[1]))
    return _fill(context, buffer, capacity, ranked)


def hdf_schedule(context: Context, buffer: Sequence[int], capacity: int) -> ScheduleAction:
    """Fill capacity by highest distortion impact; equal impacts fall back to
    deadline order."""
    ranked = sorted(range(len(context)),
                    key=lambda i: (-context.slots[i].du.distortion_impact,
                                   context.slots[i].remaining, i))
    return _fill(context, buffer, capacity, ranked)


SIMPLE_SCHEDULERS = {
    "edf": edf_schedule,
    "fifo": fifo_schedule,
    "hdf": hdf_schedule,
}


def packet_capacity(share: float, bandwidth: float, rate: float,
                    bits_per_packet: float) -> int:
    """Packets a user can push through its allocated bandwidth share."""
    return int(np.floor(share * bandwidth * rate / bits_per_packet + 1e-9))
