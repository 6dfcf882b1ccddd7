"""Gossip dissemination of access transactions over a complete graph.

Two timing models are provided.

``Timing.SYNC``
    Slotted rounds: in every slot each holder pushes to ``phi`` distinct
    users drawn from the other ``n - 1`` (or, in pull mode, each non-holder
    asks one random user).  :func:`gossip_step` and :func:`pull_step` advance
    a :class:`GossipState` by one slot.

``Timing.ASYNC``
    Every holder pushes at Poisson rate ``phi`` per slot.  The holder count is
    then a pure birth chain with rate ``phi k (n - k) / (n - 1)`` and the
    newly informed user is uniform among non-holders, so a whole
    dissemination is sampled in O(n) without stepping.  Its mean-field limit is
    the logistic curve used by :mod:`cbt.analytic`.

Times are in slots.  Under ``ASYNC`` they are real-valued; verification
timestamps are the slot index (floor) at which a user received the SAT.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

import numpy as np

from .protocol import SatId, SignatureScheme, SpectrumAccessTransaction, verify_sat

__all__ = [
    "Mode",
    "Timing",
    "SlotCapExceeded",
    "GossipState",
    "DisseminationRecord",
    "LevelStats",
    "required_holders",
    "slot_cap",
    "gossip_step",
    "pull_step",
    "sync_spread",
    "async_spread",
    "async_round_time",
    "spread",
    "simulate_dissemination",
    "iter_records",
    "run_dissemination",
    "write_trace",
]


class Mode(enum.Enum):
    PUSH = "push"
    PULL = "pull"
    HYBRID = "hybrid"


class Timing(enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


class SlotCapExceeded(RuntimeError):
    """A dissemination ran past :func:`slot_cap` slots."""

    def __init__(self, msg: str, seed=None):
        super().__init__(msg if seed is None else f"{msg} (seed {seed})")
        self.seed = seed


def required_holders(gamma: float, n: int) -> int:
    """Holder count (origin included) that marks fraction ``gamma`` as reached."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma!r}")
    # guard against 0.999 * 1000 == 998.9999999999999
    return min(n, max(1, math.ceil(gamma * n - 1e-9)))


def slot_cap(n: int) -> int:
    return int(100 * math.log(n) + 1000)


@dataclass
class GossipState:
    """Slotted gossip over ``n`` users for any number of SATs.

    ``holders`` maps each SAT id to a boolean mask over users.  When a SAT
    record is registered in ``sats`` and a ``scheme`` is set, each new
    receiver verifies it via :func:`cbt.protocol.verify_sat`.  A SAT stays in
    flight until it has ``targets[sat_id]`` holders.
    """

    n: int
    phi: int = 1
    mode: Mode = Mode.PUSH
    switch_fraction: float = 0.5
    clock: int = 0
    rng_seed: int | None = None
    concurrent: bool = False
    scheme: SignatureScheme | None = None
    holders: dict[SatId, np.ndarray] = field(default_factory=dict)
    targets: dict[SatId, int] = field(default_factory=dict)
    sats: dict[SatId, SpectrumAccessTransaction] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n < 2 or self.phi < 1:
            raise ValueError("gossip needs n >= 2 and phi >= 1")

    def inject(
        self,
        sat_id: SatId,
        origin: int,
        target: int | None = None,
        sat: SpectrumAccessTransaction | None = None,
        extra_holders: Iterable[int] = (),
    ) -> None:
        mask = np.zeros(self.n, dtype=bool)
        mask[origin] = True
        mask[list(extra_holders)] = True
        self.holders[sat_id] = mask
        self.targets[sat_id] = self.n if target is None else target
        if sat is not None:
            self.sats[sat_id] = sat

    def count(self, sat_id: SatId) -> int:
        return int(self.holders[sat_id].sum())

    def in_flight(self) -> list[SatId]:
        return [s for s, m in self.holders.items() if m.sum() < self.targets[s]]

    def _active(self) -> list[SatId]:
        active = self.in_flight()
        if not active:
            raise ValueError("no SAT in flight")
        # sequential dissemination: only the oldest unfinished SAT spreads
        return active if self.concurrent else active[:1]

    def _uses_pull(self, sat_id: SatId) -> bool:
        if self.mode is Mode.PULL:
            return True
        if self.mode is Mode.HYBRID:
            return self.holders[sat_id].mean() >= self.switch_fraction
        return False

    def _deliver(self, sat_id: SatId, receivers: np.ndarray, now: int) -> None:
        mask = self.holders[sat_id]
        fresh = np.unique(receivers[~mask[receivers]])
        sat = self.sats.get(sat_id)
        if sat is not None and self.scheme is not None:
            for u in fresh.tolist():
                verify_sat(u, sat, now, self.scheme)
        mask[fresh] = True


def _push_targets(src: np.ndarray, n: int, phi: int, rng: np.random.Generator) -> np.ndarray:
    """``phi`` distinct non-self targets for every sender in ``src``."""
    if phi >= n - 1:
        everyone = np.arange(n)
        return np.concatenate([everyone[everyone != s] for s in src.tolist()]) if src.size else src
    t = rng.integers(0, n - 1, size=(src.size, phi))
    t += t >= src[:, None]
    if phi > 1:
        while True:
            srt = np.sort(t, axis=1)
            bad = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
            if bad.size == 0:
                break
            redo = rng.integers(0, n - 1, size=(bad.size, phi))
            t[bad] = redo + (redo >= src[bad, None])
    return t.ravel()


def _pull_one(state: GossipState, sat_id: SatId, rng: np.random.Generator, now: int) -> None:
    mask = state.holders[sat_id]
    askers = np.flatnonzero(~mask)
    if askers.size == 0:
        return
    asked = rng.integers(0, state.n - 1, size=askers.size)
    asked += asked >= askers
    state._deliver(sat_id, askers[mask[asked]], now)


def gossip_step(state: GossipState, rng: np.random.Generator) -> GossipState:
    """Advance one slot.  Holders push; pull or hybrid SATs past the switch pull."""
    now = state.clock + 1
    for sat_id in state._active():
        if state._uses_pull(sat_id):
            _pull_one(state, sat_id, rng, now)
        else:
            src = np.flatnonzero(state.holders[sat_id])
            state._deliver(sat_id, _push_targets(src, state.n, state.phi, rng), now)
    state.clock = now
    return state


def pull_step(state: GossipState, rng: np.random.Generator) -> GossipState:
    """Advance one slot in which every non-holder asks one random user."""
    if state.mode is Mode.PUSH:
        raise ValueError("pull_step requires pull or hybrid mode")
    active = state._active()
    if state.mode is Mode.HYBRID and not all(state._uses_pull(s) for s in active):
        raise ValueError("hybrid gossip has not reached its switch fraction")
    now = state.clock + 1
    for sat_id in active:
        _pull_one(state, sat_id, rng, now)
    state.clock = now
    return state


def sync_spread(
    n: int,
    phi: int,
    origin: int,
    target: int,
    rng: np.random.Generator,
    mode: Mode = Mode.PUSH,
    switch_fraction: float = 0.5,
    initial: Iterable[int] = (),
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Slotted dissemination until ``target`` users hold the SAT.

    Returns receivers in order of receipt, their receipt slots (relative to
    the start) and the holder count after every slot (index 0 = start).
    """
    state = GossipState(n, phi, mode, switch_fraction)
    sid = SatId(origin, 0, 0)
    state.inject(sid, origin, target, extra_holders=initial)
    mask = state.holders[sid]
    first = np.full(n, -1, dtype=np.int64)
    first[mask] = 0
    counts = [int(mask.sum())]
    cap = slot_cap(n)
    while counts[-1] < target:
        if state.clock >= cap:
            raise SlotCapExceeded(f"sync gossip over {n} users passed {cap} slots")
        gossip_step(state, rng)
        first[mask & (first < 0)] = state.clock
        counts.append(int(mask.sum()))
    got = np.flatnonzero(first > 0)
    order = got[np.argsort(first[got], kind="stable")]
    return order, first[order].astype(float), counts


def async_spread(
    n: int, phi: int, origin: int, target: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Asynchronous push until ``target`` users hold the SAT: receivers and receipt times."""
    m = target - 1
    if m <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    k = np.arange(1, m + 1, dtype=float)
    times = np.cumsum(rng.standard_exponential(m) * (n - 1) / (phi * k * (n - k)))
    receivers = rng.choice(n - 1, size=m, replace=False)
    receivers += receivers >= origin
    if times[-1] > slot_cap(n):
        raise SlotCapExceeded(f"async gossip over {n} users passed {slot_cap(n)} slots")
    return receivers, times


def async_round_time(n: int, phi: int, target: int, rng: np.random.Generator) -> float:
    """Duration of an asynchronous round to ``target`` holders, without identities."""
    m = target - 1
    if m <= 0:
        return 0.0
    k = np.arange(1, m + 1, dtype=float)
    return float(np.sum(rng.standard_exponential(m) * (n - 1) / (phi * k * (n - k))))


def spread(
    n: int, phi: int, origin: int, target: int, rng: np.random.Generator, timing: Timing
) -> tuple[np.ndarray, np.ndarray]:
    if timing is Timing.ASYNC:
        return async_spread(n, phi, origin, target, rng)
    receivers, times, _ = sync_spread(n, phi, origin, target, rng)
    return receivers, times


@dataclass
class DisseminationRecord:
    """One dissemination: holder count per slot and first-passage time per level."""

    run: int
    start: float
    counts: list[int]
    completion: dict[float, float]


@dataclass(frozen=True)
class LevelStats:
    gamma: float
    holders: int
    mean: float
    std: float
    runs: int


def simulate_dissemination(
    n: int,
    phi: int,
    gamma_levels: Iterable[float],
    rng: np.random.Generator,
    timing: Timing = Timing.ASYNC,
    mode: Mode = Mode.PUSH,
    switch_fraction: float = 0.5,
    run: int = 0,
) -> DisseminationRecord:
    levels = list(gamma_levels)
    need = {g: required_holders(g, n) for g in levels}
    target = max(need.values(), default=1)
    origin = int(rng.integers(n))
    if timing is Timing.ASYNC:
        if mode is not Mode.PUSH:
            raise ValueError("asynchronous timing supports push gossip only")
        _, times = async_spread(n, phi, origin, target, rng)
        horizon = math.ceil(times[-1]) if times.size else 0
        counts = (1 + np.searchsorted(times, np.arange(horizon + 1), side="right")).tolist()
        # time at which the holder count first reaches h is times[h - 2]
        completion = {g: (float(times[h - 2]) if h > 1 else 0.0) for g, h in need.items()}
    else:
        _, _, counts = sync_spread(n, phi, origin, target, rng, mode, switch_fraction)
        arr = np.asarray(counts)
        completion = {g: float(np.argmax(arr >= h)) for g, h in need.items()}
    return DisseminationRecord(run, 0.0, counts, completion)


def _run_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run,)))


def iter_records(
    n: int,
    phi: int,
    gamma_levels: Iterable[float],
    runs: int,
    seed: int,
    timing: Timing = Timing.ASYNC,
    mode: Mode = Mode.PUSH,
    switch_fraction: float = 0.5,
) -> Iterator[DisseminationRecord]:
    levels = list(gamma_levels)
    for r in range(runs):
        yield simulate_dissemination(
            n, phi, levels, _run_rng(seed, r), timing, mode, switch_fraction, run=r
        )


def run_dissemination(
    n: int,
    phi: int,
    mode: Mode,
    gamma_levels: Iterable[float],
    runs: int,
    seed: int,
    timing: Timing = Timing.ASYNC,
    switch_fraction: float = 0.5,
    records: list[DisseminationRecord] | None = None,
) -> list[LevelStats]:
    """Mean and standard deviation of first-passage time per gamma level.

    Pass a list as ``records`` to collect the per-run traces.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    levels = list(gamma_levels)
    samples = np.empty((runs, len(levels)))
    for rec in iter_records(n, phi, levels, runs, seed, timing, mode, switch_fraction):
        samples[rec.run] = [rec.completion[g] for g in levels]
        if records is not None:
            records.append(rec)
    std = samples.std(axis=0, ddof=1) if runs > 1 else np.zeros(len(levels))
    return [
        LevelStats(g, required_holders(g, n), float(samples[:, i].mean()), float(std[i]), runs)
        for i, g in enumerate(levels)
    ]


def write_trace(records: Iterable[DisseminationRecord], fh: TextIO) -> None:
    """CSV rows ``run,slot,holders``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["run", "slot", "holders"])
    for rec in records:
        for slot, c in enumerate(rec.counts):
            w.writerow([rec.run, slot, c])
