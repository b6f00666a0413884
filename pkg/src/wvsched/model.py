"""Video traffic, channel, and payoff model for multi-user wireless transmission.

A video stream is a periodic sequence of GOPs; each GOP is a fixed set of
data units (DUs) with per-DU distortion impact, deadline, random size, and
dependency DAG. In each slot a user sees a context (the DUs whose deadlines
fall inside the scheduling time window), a buffer of remaining packets per
active DU, and a Markov channel state. Actions are per-DU packet counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Iterator, Sequence

import numpy as np

QUALITY_EPS = 1e-9


class ModelError(ValueError):
    """Raised when a template, channel, or scenario violates an invariant."""


# ---------------------------------------------------------------------------
# Traffic templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataUnitSpec:
    """One DU of the GOP template.

    distortion_impact is per transmitted packet; deadline_offset counts slots
    from GOP start; size_pmf maps packet counts to probabilities.
    """

    du_id: int
    name: str
    distortion_impact: float
    deadline_offset: int
    size_pmf: tuple[tuple[int, float], ...]
    parents: tuple[int, ...] = ()

    def __post_init__(self):
        pmf = tuple(sorted((int(v), float(p)) for v, p in self.size_pmf))
        object.__setattr__(self, "size_pmf", pmf)
        if self.distortion_impact < 0:
            raise ModelError(f"du {self.du_id}: distortion_impact must be >= 0")
        if self.deadline_offset < 0:
            raise ModelError(f"du {self.du_id}: deadline_offset must be >= 0")
        if not pmf:
            raise ModelError(f"du {self.du_id}: size_pmf is empty")
        if any(v < 0 for v, _ in pmf):
            raise ModelError(f"du {self.du_id}: size_pmf has negative support")
        if any(p < 0 for _, p in pmf):
            raise ModelError(f"du {self.du_id}: size_pmf has negative probability")
        if len({v for v, _ in pmf}) != len(pmf):
            raise ModelError(f"du {self.du_id}: size_pmf has duplicate values")
        total = sum(p for _, p in pmf)
        if abs(total - 1.0) > 1e-9:
            raise ModelError(f"du {self.du_id}: size_pmf sums to {total!r}, expected 1")

    @property
    def max_size(self) -> int:
        return max(v for v, _ in self.size_pmf)

    @property
    def mean_size(self) -> float:
        return sum(v * p for v, p in self.size_pmf)

    def sample_size(self, rng: np.random.Generator) -> int:
        values = [v for v, _ in self.size_pmf]
        probs = [p for _, p in self.size_pmf]
        return int(values[rng.choice(len(values), p=probs)])


@dataclass(frozen=True)
class ContextSlot:
    """A DU instance active in a context.

    key identifies the instance across consecutive slots: (gop_offset, du_id)
    relative to the GOP containing the current slot. remaining is the number
    of slots left before the deadline (0 = expires at the end of this slot).
    """

    key: tuple[int, int]
    du: DataUnitSpec
    remaining: int


class Context:
    """The set of DUs eligible for transmission at one GOP phase.

    Contexts are interned per (template, phase); identity comparison is safe.
    """

    __slots__ = ("phase", "slots", "edges", "window", "_index")

    def __init__(self, phase: int, slots: tuple[ContextSlot, ...],
                 edges: tuple[tuple[int, int], ...], window: int):
        self.phase = phase
        self.slots = slots
        self.edges = edges  # (parent_slot_index, child_slot_index)
        self.window = window
        self._index = {s.key: i for i, s in enumerate(slots)}

    def __len__(self) -> int:
        return len(self.slots)

    def index_of(self, key: tuple[int, int]) -> int:
        return self._index[key]

    def age_of(self, i: int) -> int:
        return self.window - 1 - self.slots[i].remaining

    def impacts(self) -> np.ndarray:
        return np.array([s.du.distortion_impact for s in self.slots], dtype=float)

    def __repr__(self) -> str:
        names = ",".join(f"{s.du.name}@{s.remaining}" for s in self.slots)
        return f"Context(phase={self.phase}, [{names}])"


class GopTemplate:
    """Periodic GOP structure: DUs, period T, and scheduling time window W."""

    def __init__(self, dus: Sequence[DataUnitSpec], period: int, window: int):
        self.dus = tuple(dus)
        self.period = int(period)
        self.window = int(window)
        self._by_id = {du.du_id: du for du in self.dus}
        self._validate()
        self._contexts: list[Context] = [self._build_context(p) for p in range(self.period)]
        self._steps: list[ContextStep] = [self._build_step(p) for p in range(self.period)]

    # -- validation --------------------------------------------------------

    def _validate(self) -> None:
        if self.period < 1:
            raise ModelError("gop.period must be >= 1")
        if self.window < 1:
            raise ModelError("gop.window must be >= 1")
        if not self.dus:
            raise ModelError("gop.dus is empty")
        if len(self._by_id) != len(self.dus):
            raise ModelError("gop.dus contains duplicate ids")
        max_deadline = max(du.deadline_offset for du in self.dus)
        if self.period < max_deadline:
            raise ModelError(
                f"gop.period={self.period} is below the largest deadline offset {max_deadline}")
        for du in self.dus:
            for pid in du.parents:
                if pid not in self._by_id:
                    raise ModelError(f"du {du.du_id}: unknown parent {pid}")
                parent = self._by_id[pid]
                if du.deadline_offset < parent.deadline_offset:
                    raise ModelError(
                        f"du {du.du_id}: deadline {du.deadline_offset} precedes "
                        f"parent {pid} deadline {parent.deadline_offset}")
                if du.distortion_impact > parent.distortion_impact + QUALITY_EPS:
                    raise ModelError(
                        f"du {du.du_id}: distortion impact {du.distortion_impact} exceeds "
                        f"parent {pid} impact {parent.distortion_impact}")
                if du.deadline_offset - parent.deadline_offset >= self.window:
                    raise ModelError(
                        f"du {du.du_id}: window {self.window} too short for dependency on "
                        f"{pid} (deadline gap {du.deadline_offset - parent.deadline_offset})")
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        # Kahn's algorithm; report one cycle member list on failure.
        indeg = {du.du_id: len(du.parents) for du in self.dus}
        queue = [i for i, d in indeg.items() if d == 0]
        seen = 0
        while queue:
            nid = queue.pop()
            seen += 1
            for du in self.dus:
                if nid in du.parents:
                    indeg[du.du_id] -= 1
                    if indeg[du.du_id] == 0:
                        queue.append(du.du_id)
        if seen != len(self.dus):
            cycle = sorted(i for i, d in indeg.items() if d > 0)
            raise ModelError(f"gop.dus dependency graph has a cycle among ids {cycle}")

    # -- context construction ----------------------------------------------

    def _build_context(self, phase: int) -> Context:
        slots = []
        for du in self.dus:
            # GOP offsets o with o*T + d in [phase, phase + W)
            lo = math.ceil((phase - du.deadline_offset) / self.period)
            hi = math.ceil((phase + self.window - du.deadline_offset) / self.period)
            for o in range(lo, hi):
                remaining = o * self.period + du.deadline_offset - phase
                slots.append(ContextSlot(key=(o, du.du_id), du=du, remaining=remaining))
        slots.sort(key=lambda s: (s.key[0], self._du_pos(s.key[1])))
        edges = []
        for ci, child in enumerate(slots):
            for pid in child.du.parents:
                pkey = (child.key[0], pid)
                for pi, cand in enumerate(slots):
                    if cand.key == pkey:
                        edges.append((pi, ci))
        return Context(phase, tuple(slots), tuple(edges), self.window)

    def _du_pos(self, du_id: int) -> int:
        for i, du in enumerate(self.dus):
            if du.du_id == du_id:
                return i
        raise KeyError(du_id)

    def _build_step(self, phase: int) -> "ContextStep":
        cur = self._contexts[phase]
        nxt = self._contexts[(phase + 1) % self.period]
        shift = -1 if phase + 1 == self.period else 0
        survivors, expiring = [], []
        matched = set()
        for i, slot in enumerate(cur.slots):
            if slot.remaining == 0:
                expiring.append(i)
                continue
            nkey = (slot.key[0] + shift, slot.key[1])
            j = nxt.index_of(nkey)
            survivors.append((i, j))
            matched.add(j)
        entering = tuple(j for j in range(len(nxt.slots)) if j not in matched)
        return ContextStep(tuple(survivors), tuple(expiring), entering)

    # -- public API ---------------------------------------------------------

    def context(self, phase: int) -> Context:
        return self._contexts[phase % self.period]

    def step(self, phase: int) -> "ContextStep":
        return self._steps[phase % self.period]

    def du(self, du_id: int) -> DataUnitSpec:
        return self._by_id[du_id]

    @property
    def total_impact(self) -> float:
        """Expected distortion impact carried by one GOP (q * mean size summed)."""
        return sum(du.distortion_impact * du.mean_size for du in self.dus)


@dataclass(frozen=True)
class ContextStep:
    """Slot-index bookkeeping for the deterministic context shift p -> p+1."""

    survivors: tuple[tuple[int, int], ...]  # (index now, index next)
    expiring: tuple[int, ...]               # indices whose deadline passes now
    entering: tuple[int, ...]               # next-context indices drawing fresh sizes


def build_context(template: GopTemplate, phase: int) -> Context:
    """Context at a GOP phase: DUs with deadlines in [phase, phase + W)."""
    if not 0 <= phase < template.period:
        raise ModelError(f"phase {phase} outside [0, {template.period})")
    return template.context(phase)


# ---------------------------------------------------------------------------
# Channel
# ---------------------------------------------------------------------------

def transmit_energy(gain_to_noise: float, packets: int) -> float:
    """Energy to push `packets` through a channel with gain |h|^2/sigma^2."""
    return (2.0 ** packets - 1.0) / gain_to_noise


class ChannelModel:
    """Finite-state Markov channel with per-state rate and gain-to-noise."""

    def __init__(self, names: Sequence[str], gain_to_noise: Sequence[float],
                 rate: Sequence[float], transition: Sequence[Sequence[float]],
                 energy_fn: Callable[[float, int], float] = transmit_energy):
        self.names = tuple(str(n) for n in names)
        self.gain = np.asarray(gain_to_noise, dtype=float)
        self.rate = np.asarray(rate, dtype=float)
        self.transition = np.asarray(transition, dtype=float)
        self.energy_fn = energy_fn
        n = len(self.names)
        if self.gain.shape != (n,) or self.rate.shape != (n,):
            raise ModelError("channel: gain_to_noise and rate must match states")
        if self.transition.shape != (n, n):
            raise ModelError(f"channel.transition must be {n}x{n}")
        if np.any(self.rate <= 0):
            raise ModelError("channel.rate entries must be > 0")
        if np.any(self.gain <= 0):
            raise ModelError("channel.gain_to_noise entries must be > 0")
        if np.any(self.transition < 0):
            raise ModelError("channel.transition has negative entries")
        rows = self.transition.sum(axis=1)
        bad = np.where(np.abs(rows - 1.0) > 1e-9)[0]
        if bad.size:
            raise ModelError(
                f"channel.transition row {bad[0]} sums to {rows[bad[0]]!r}, expected 1")

    def __len__(self) -> int:
        return len(self.names)

    def energy(self, h: int, packets: int) -> float:
        return self.energy_fn(float(self.gain[h]), packets)

    def stationary(self) -> np.ndarray:
        """Stationary distribution of the channel chain.

        Solves pi (P - I) = 0 with the normalization row appended, which also
        handles periodic chains.
        """
        n = len(self)
        a = np.vstack([(self.transition.T - np.eye(n)), np.ones((1, n))])
        b = np.concatenate([np.zeros(n), [1.0]])
        pi, *_ = np.linalg.lstsq(a, b, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


def sample_channel(model: ChannelModel, h: int, rng: np.random.Generator) -> int:
    """Draw the next channel state from the row p(.|h)."""
    return int(rng.choice(len(model), p=model.transition[h]))


# ---------------------------------------------------------------------------
# States and actions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UserState:
    """Per-user decision state: context, per-DU buffer, own channel state."""

    context: Context
    buffer: tuple[int, ...]
    channel: int

    def __post_init__(self):
        if len(self.buffer) != len(self.context):
            raise ModelError("buffer length does not match context")
        for x, slot in zip(self.buffer, self.context.slots):
            if x < 0 or x > slot.du.max_size:
                raise ModelError(
                    f"buffer for {slot.du.name} is {x}, outside [0, {slot.du.max_size}]")

    def __hash__(self):
        return hash((id(self.context), self.buffer, self.channel))

    def __eq__(self, other):
        return (self.context is other.context and self.buffer == other.buffer
                and self.channel == other.channel)


@dataclass(frozen=True)
class ScheduleAction:
    """Packets to send per active DU, aligned with the context slot order."""

    sends: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.sends)

    @classmethod
    def zero(cls, n: int) -> "ScheduleAction":
        return cls((0,) * n)

    def as_dict(self, context: Context) -> dict[tuple[int, int], int]:
        return {s.key: y for s, y in zip(context.slots, self.sends)}


def _check_feasible(state: UserState, action: ScheduleAction) -> None:
    if len(action.sends) != len(state.buffer):
        raise ModelError("action length does not match context")
    for y, x in zip(action.sends, state.buffer):
        if y < 0 or y > x:
            raise ModelError(f"action sends {y} from a buffer of {x}")


def effective_quality_floor(context: Context, buffer: Sequence[int], min_quality: float) -> float:
    """Clamp the quality requirement to the best achievable in this state."""
    achievable = sum(s.du.distortion_impact * x for s, x in zip(context.slots, buffer))
    return min(min_quality, achievable)


def iter_actions(context: Context, buffer: Sequence[int],
                 min_quality: float = 0.0) -> Iterator[ScheduleAction]:
    """All feasible actions, in lexicographically ascending send order."""
    floor = effective_quality_floor(context, buffer, min_quality)
    impacts = [s.du.distortion_impact for s in context.slots]
    for sends in product(*(range(x + 1) for x in buffer)):
        if sum(q * y for q, y in zip(impacts, sends)) >= floor - QUALITY_EPS:
            yield ScheduleAction(sends)


def action_set(state: UserState, min_quality: float = 0.0) -> list[ScheduleAction]:
    """Feasible action set under the (clamped) minimum-quality requirement."""
    return list(iter_actions(state.context, state.buffer, min_quality))


def distortion_reduction(state: UserState, action: ScheduleAction) -> float:
    """Quality gained this slot: sum of q_DU * sends_DU."""
    _check_feasible(state, action)
    return float(sum(s.du.distortion_impact * y
                     for s, y in zip(state.context.slots, action.sends)))


def payoff(state: UserState, action: ScheduleAction, beta: float,
           channel: ChannelModel) -> float:
    """Distortion reduction minus beta-weighted transmission energy."""
    gain = distortion_reduction(state, action)
    return gain - beta * channel.energy(state.channel, action.total)


def bandwidth_usage(totals: Sequence[int], rates: Sequence[float],
                    bits_per_packet: float) -> float:
    """Fraction of the shared band consumed: sum of total_i * b / r_i."""
    return float(sum(t * bits_per_packet / r for t, r in zip(totals, rates)))


# ---------------------------------------------------------------------------
# Traffic dynamics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrafficStep:
    """Outcome of one slot of traffic dynamics for a single user."""

    context: Context
    buffer: tuple[int, ...]
    arrivals: dict[tuple[int, int], int] = field(default_factory=dict)
    dropped: dict[tuple[int, int], int] = field(default_factory=dict)


def advance_traffic(template: GopTemplate, state: UserState, action: ScheduleAction,
                    rng: np.random.Generator) -> TrafficStep:
    """Apply sends, drop DUs whose deadline passed, draw entering DU sizes.

    The context advances deterministically by one phase; leftover packets of
    expiring DUs are reported as dropped.
    """
    _check_feasible(state, action)
    phase = state.context.phase
    step = template.step(phase)
    nxt = template.context(phase + 1)
    left = [x - y for x, y in zip(state.buffer, action.sends)]
    dropped = {}
    for i in step.expiring:
        if left[i] > 0:
            dropped[state.context.slots[i].key] = left[i]
    buffer = [0] * len(nxt)
    for i, j in step.survivors:
        buffer[j] = left[i]
    arrivals = {}
    for j in step.entering:
        size = nxt.slots[j].du.sample_size(rng)
        buffer[j] = size
        arrivals[nxt.slots[j].key] = size
    return TrafficStep(nxt, tuple(buffer), arrivals, dropped)


def initial_buffer(template: GopTemplate, phase: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Fresh sizes for every DU active at the given phase (episode start)."""
    ctx = template.context(phase)
    return tuple(slot.du.sample_size(rng) for slot in ctx.slots)


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UserConfig:
    """One video user: traffic template, channel, quality floor, tradeoff."""

    name: str
    template: GopTemplate
    channel: ChannelModel
    min_quality: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.min_quality < 0:
            raise ModelError(f"user {self.name}: min_quality must be >= 0")
        if self.beta < 0:
            raise ModelError(f"user {self.name}: beta must be >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a run needs: users, shared band, discount, solver knobs."""

    name: str
    users: tuple[UserConfig, ...]
    bits_per_packet: float = 1.0
    bandwidth: float = 1.0
    discount: float = 0.95
    price_tolerance: float = 1e-3
    horizon: int = 270
    seed: int = 0
    solver: str = "proposed"
    channel_correlation: str = "independent"
    price_view: str = "expected"

    def __post_init__(self):
        if not self.users:
            raise ModelError("scenario has no users")
        if not 0.0 <= self.discount < 1.0:
            raise ModelError("discount must be in [0, 1)")
        if self.bandwidth <= 0:
            raise ModelError("bandwidth must be > 0")
        if self.bits_per_packet <= 0:
            raise ModelError("bits_per_packet must be > 0")
        if self.price_tolerance <= 0:
            raise ModelError("price_tolerance must be > 0")
        if self.channel_correlation not in ("independent", "common"):
            raise ModelError(f"unknown channel_correlation {self.channel_correlation!r}")
        if self.price_view not in ("expected", "full"):
            raise ModelError(f"unknown price_view {self.price_view!r}")

    @property
    def templates(self) -> list[GopTemplate]:
        return [u.template for u in self.users]

    @property
    def channels(self) -> list[ChannelModel]:
        return [u.channel for u in self.users]
