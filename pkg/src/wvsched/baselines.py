"""Reference solutions: myopic static allocation with EDF, queue-drift
scheduling, and the single uniform price.

The uniform-price solution searches for the smallest common packet price
that keeps expected usage feasible in every joint channel state; realized
allocations are then inflated to full utilization at simulation time. The
drift scheduler sizes its transmission against the quadratic backlog drift
and is blind to distortion impacts and deadlines by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from wvsched.model import (
    Context,
    GopTemplate,
    ModelError,
    ScheduleAction,
    transmit_energy,
)


# ---------------------------------------------------------------------------
# Myopic static allocation
# ---------------------------------------------------------------------------

def myopic_static_shares(templates: Sequence[GopTemplate]) -> np.ndarray:
    """Bandwidth shares proportional to each user's per-GOP distortion impact."""
    weights = np.array([t.total_impact for t in templates], dtype=float)
    if weights.sum() <= 0:
        return np.full(len(templates), 1.0 / len(templates))
    return weights / weights.sum()


# ---------------------------------------------------------------------------
# Queue-drift scheduling
# ---------------------------------------------------------------------------

def drift_objective(backlog: int, sends: int, expected_arrivals: float,
                    price: float, beta: float, gain_to_noise: float,
                    delta: float) -> float:
    """(1-delta)(-beta*energy - price*m) + delta * (-(backlog - m + arrivals)^2)."""
    u = -beta * transmit_energy(gain_to_noise, sends)
    after = (backlog - sends) + expected_arrivals
    cont = -(after * after)
    return (1.0 - delta) * (u - price * sends) + delta * cont


def lyapunov_action(context: Context, buffer: Sequence[int], price: float,
                    beta: float, gain_to_noise: float, delta: float,
                    expected_arrivals: float,
                    capacity: int | None = None) -> ScheduleAction:
    """Drift-greedy action: picks a total send count from the quadratic
    backlog drift, blind to per-DU impacts and deadlines.

    The objective depends on the action only through its total, so the send
    vector is the lexicographically largest split (earliest buffer positions
    drain first; ties across totals go to the larger total). `capacity`
    optionally caps the total in packets.
    """
    backlog = int(sum(buffer))
    top = backlog if capacity is None else min(backlog, int(capacity))
    best_m, best_val = 0, -np.inf
    for m in range(top + 1):
        val = drift_objective(backlog, m, expected_arrivals, price, beta,
                              gain_to_noise, delta)
        if val >= best_val:
            best_val, best_m = val, m
    sends = []
    room = best_m
    for x in buffer:
        take = min(x, room)
        sends.append(take)
        room -= take
    return ScheduleAction(tuple(sends))


class DriftValueTable:
    """Virtual post-decision table: U(post) = -(|post|_1 + arrivals)^2.

    Feeding this to the PDS greedy step with the energy-only payoff and the
    raw (uncollapsed) post-decision key reproduces lyapunov_action exactly:
    the drift framework is a special case of post-decision scheduling.
    """

    def __init__(self, expected_arrivals: float):
        self.expected_arrivals = expected_arrivals

    def value(self, key) -> float:
        _phase, post, _v = key
        after = sum(post) + self.expected_arrivals
        return -(after * after)


def energy_only_payoff(beta: float, gain_to_noise: float):
    """Payoff ignoring distortion impacts, as the drift framework does."""

    def payoff_fn(_phase, action):
        return -beta * transmit_energy(gain_to_noise, action.total)

    return payoff_fn


# ---------------------------------------------------------------------------
# Uniform price
# ---------------------------------------------------------------------------

@dataclass
class UniformPriceResult:
    """Smallest feasible common price and the per-state usage it induces."""

    price: float
    usage_by_state: dict[tuple[int, ...], float]
    iterations: int
    curve: list[tuple[float, float]]  # (lambda, worst-state usage)


def uniform_price_solve(estimate_usage, s0_states: Sequence[tuple[int, ...]],
                        bandwidth: float, lam_hi_start: float = 1.0,
                        tol: float = 1e-4, max_doublings: int = 60) -> UniformPriceResult:
    """Bisection for the smallest uniform price with feasible expected usage.

    `estimate_usage(lam)` must return {joint channel state: expected usage}
    under every user solving its priced problem at the common packet price
    lam (before any utilization scaling). Raises with the usage-vs-price
    curve if no bracket is found.
    """
    curve: list[tuple[float, float]] = []

    def worst(lam: float) -> tuple[float, dict]:
        usage = estimate_usage(lam)
        w = max(usage.values())
        curve.append((lam, w))
        return w, usage

    iterations = 0
    w0, usage0 = worst(0.0)
    if w0 <= bandwidth + 1e-12:
        return UniformPriceResult(0.0, usage0, 1, curve)
    hi = lam_hi_start
    w_hi, usage_hi = worst(hi)
    iterations += 1
    while w_hi > bandwidth + 1e-12:
        hi *= 2.0
        w_hi, usage_hi = worst(hi)
        iterations += 1
        if iterations > max_doublings:
            raise ModelError(
                "uniform price: no feasible bracket found; usage-vs-price curve: "
                + ", ".join(f"({l:.4g}: {u:.4g})" for l, u in curve))
    lo = 0.0
    usage = usage_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        w_mid, usage_mid = worst(mid)
        iterations += 1
        if w_mid <= bandwidth + 1e-12:
            hi, usage = mid, usage_mid
        else:
            lo = mid
    return UniformPriceResult(hi, usage, iterations, curve)


def inflate_action(context: Context, action: ScheduleAction, budget: int,
                   buffer: Sequence[int]) -> ScheduleAction:
    """Grow an action toward `budget` packets, adding high-impact packets
    with the nearest deadlines first, capped by the buffer."""
    if action.total >= budget:
        return action
    order = sorted(range(len(context)),
                   key=lambda i: (-context.slots[i].du.distortion_impact,
                                  context.slots[i].remaining, i))
    sends = list(action.sends)
    room = budget - action.total
    for i in order:
        take = min(buffer[i] - sends[i], room)
        sends[i] += take
        room -= take
        if room == 0:
            break
    return ScheduleAction(tuple(sends))


def scale_up_to_budget(contexts, actions: Sequence[ScheduleAction],
                       buffers, rates: Sequence[float], bits_per_packet: float,
                       bandwidth: float) -> list[ScheduleAction]:
    """Inflate conservative requests to full utilization, buffer-capped."""
    usage = sum(a.total * bits_per_packet / r for a, r in zip(actions, rates))
    if usage <= 0 or usage >= bandwidth - 1e-12:
        return list(actions)
    gamma = bandwidth / usage
    out = []
    for ctx, act, buf, rate in zip(contexts, actions, buffers, rates):
        budget = int(np.floor(gamma * act.total + 1e-9))
        out.append(inflate_action(ctx, act, budget, buf))
    return out
