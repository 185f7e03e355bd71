"""Provenance-aware ring replay buffer.

FIFO ring storage with per-source index sets kept consistent across
wraparound via swap-remove bookkeeping. Pushes are linearizable and
samples snapshot-consistent under a single lock, so rollout workers may
append while a learner samples.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .geom import Provenance
from .nets import TransitionBatch

_SOURCE_ORDER = {src: i for i, src in enumerate(Provenance)}


class InsufficientDataError(RuntimeError):
    """A requested source has no data in the buffer."""

    def __init__(self, source: Provenance, available: dict[Provenance, int] | None = None):
        avail = (
            ""
            if not available
            else " (available: " + ", ".join(f"{k.value}={v}" for k, v in available.items()) + ")"
        )
        super().__init__(f"no transitions from source {source.value!r}{avail}")
        self.source = source


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    source: Provenance


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._slots: list[Transition | None] = [None] * capacity
        self._pos = 0
        self._size = 0
        self._by_source: dict[Provenance, list[int]] = {}
        self._slot_ref: dict[int, tuple[Provenance, int]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._size

    def count(self, source: Provenance) -> int:
        with self._lock:
            return len(self._by_source.get(source, ()))

    def counts(self) -> dict[Provenance, int]:
        with self._lock:
            return {src: len(ix) for src, ix in self._by_source.items() if ix}

    def push(self, tr: Transition) -> None:
        with self._lock:
            slot = self._pos
            if self._slots[slot] is not None:
                self._unindex(slot)
            self._slots[slot] = tr
            lst = self._by_source.setdefault(tr.source, [])
            self._slot_ref[slot] = (tr.source, len(lst))
            lst.append(slot)
            self._pos = (self._pos + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def extend(self, trs) -> None:
        for tr in trs:
            self.push(tr)

    def _unindex(self, slot: int) -> None:
        src, idx = self._slot_ref.pop(slot)
        lst = self._by_source[src]
        last = lst.pop()
        if last != slot:
            lst[idx] = last
            self._slot_ref[last] = (src, idx)

    def sample(
        self,
        batch_size: int,
        rng: np.random.Generator,
        mix: dict[Provenance, float] | None = None,
    ) -> TransitionBatch:
        """Stratified sample (with replacement) per the source mix.

        mix=None samples uniformly over the whole buffer. Per-source
        counts are round(fraction * batch_size) with the rounding
        remainder assigned to the largest fraction; sources are visited
        in a fixed enum order so sampling depends only on the rng.
        """
        with self._lock:
            if mix is None:
                if self._size == 0:
                    raise InsufficientDataError(Provenance.REAL_RL, {})
                # The ring fills slots [0, size) and overwrites in place,
                # so occupied slots are exactly that prefix.
                picks = rng.integers(0, self._size, size=batch_size)
                return _stack([self._slots[i] for i in picks])

            requested = sorted(
                ((src, f) for src, f in mix.items() if f > 0.0),
                key=lambda kv: _SOURCE_ORDER[kv[0]],
            )
            counts = {src: int(round(f * batch_size)) for src, f in requested}
            remainder = batch_size - sum(counts.values())
            if remainder != 0:
                largest = max(requested, key=lambda kv: (kv[1], -_SOURCE_ORDER[kv[0]]))[0]
                counts[largest] += remainder
            picks: list[int] = []
            for src, _f in requested:
                lst = self._by_source.get(src, [])
                if not lst:
                    raise InsufficientDataError(
                        src, {s: len(ix) for s, ix in self._by_source.items() if ix}
                    )
                idx = rng.integers(0, len(lst), size=counts[src])
                picks.extend(lst[j] for j in idx)
            return _stack([self._slots[i] for i in picks])

    def all_transitions(self) -> list[Transition]:
        with self._lock:
            return [t for t in self._slots if t is not None]


def _stack(trs: list[Transition]) -> TransitionBatch:
    return TransitionBatch(
        s=np.stack([t.s for t in trs]),
        a=np.stack([t.a for t in trs]),
        r=np.array([t.r for t in trs], dtype=np.float64),
        s_next=np.stack([t.s_next for t in trs]),
        done=np.array([t.done for t in trs], dtype=bool),
        sources=[t.source for t in trs],
    )


def buffer_sample(
    buf: ReplayBuffer,
    batch_size: int,
    mix: dict[Provenance, float] | None,
    rng: np.random.Generator,
) -> TransitionBatch:
    return buf.sample(batch_size, rng, mix)
