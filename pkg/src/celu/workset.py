"""Workset table: cached (Z_A, dZ_A) batches with two clocks.

Each entry remembers when it was inserted (communication-round timestamp) and
how many local updates have used it.  Entries leave the table when they fall
out of the W-round window or reach the use cap.  Sampling is round-robin:
the oldest eligible entry wins, and a batch sampled in one of the last W-1
local steps is not eligible.
"""
from __future__ import annotations

import collections
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, WorksetError


@dataclass(eq=False)
class CacheEntry:
    batch_id: int
    z_stale: np.ndarray
    dz_stale: np.ndarray
    insert_time: int
    indices: np.ndarray
    use_count: int = 0

    def __post_init__(self):
        if self.z_stale.shape != self.dz_stale.shape:
            raise WorksetError(f"cached Z {self.z_stale.shape} and dZ {self.dz_stale.shape} differ in shape")


@dataclass
class Removal:
    batch_id: int
    insert_time: int
    uses: int
    reason: str  # "window" | "cap" | "end"


class WorksetTable:
    """Bounded cache of W batches, each usable at most ``max_uses`` times.

    All public methods are atomic with respect to each other, so a
    communication worker may insert while a local worker samples.
    """

    def __init__(self, capacity: int, max_uses: int):
        if capacity < 1:
            raise ConfigError("workset capacity W must be >= 1")
        if max_uses < 1:
            raise ConfigError("max uses per entry must be >= 1")
        self.capacity = capacity
        self.max_uses = max_uses
        self._entries: list[CacheEntry] = []
        self._recent: collections.deque = collections.deque(maxlen=capacity - 1)
        self._now: int | None = None
        self._cond = threading.Condition(threading.RLock())
        self.removed: list[Removal] = []
        self._window_evicted: dict[int, Removal] = {}
        self.samples = 0

    def __len__(self):
        with self._cond:
            return len(self._entries)

    @property
    def now(self) -> int | None:
        return self._now

    def entries(self) -> list[CacheEntry]:
        with self._cond:
            return list(self._entries)

    def batch_ids(self) -> list[int]:
        with self._cond:
            return [e.batch_id for e in self._entries]

    def recent_samples(self) -> list[int]:
        with self._cond:
            return list(self._recent)

    def insert(self, entry: CacheEntry, now: int | None = None) -> list[CacheEntry]:
        """Add ``entry`` at time ``now``; return entries evicted by the window."""
        if now is None:
            now = entry.insert_time
        with self._cond:
            if entry.insert_time != now:
                raise WorksetError(f"entry stamped {entry.insert_time} inserted at time {now}")
            if self._now is not None and now <= self._now:
                raise WorksetError(f"insertion time {now} not after {self._now}")
            self._now = now
            self._entries.append(entry)
            horizon = now - self.capacity + 1
            evicted = [e for e in self._entries if e.insert_time < horizon]
            if evicted:
                self._entries = [e for e in self._entries if e.insert_time >= horizon]
                for e in evicted:
                    rem = Removal(e.batch_id, e.insert_time, e.use_count, "window")
                    self.removed.append(rem)
                    self._window_evicted[e.batch_id] = rem
            for bid in [b for b, r in self._window_evicted.items() if r.insert_time < horizon - self.capacity]:
                del self._window_evicted[bid]
            self._cond.notify_all()
            return evicted

    def _eligible(self, e: CacheEntry) -> bool:
        return e.use_count < self.max_uses and e.batch_id not in self._recent

    def sample_next(self) -> CacheEntry | None:
        """Oldest eligible entry, or ``None`` (a bubble)."""
        with self._cond:
            for e in self._entries:
                if self._eligible(e):
                    self._recent.append(e.batch_id)
                    self.samples += 1
                    return e
            return None

    def wait_sample(self, stop: threading.Event, poll: float = 0.05) -> CacheEntry | None:
        """Block until an entry is eligible or ``stop`` is set."""
        with self._cond:
            while True:
                e = self.sample_next()
                if e is not None or stop.is_set():
                    return e
                self._cond.wait(poll)

    def mark_used(self, batch_id: int):
        """Count one local update on ``batch_id``; drop it at the use cap.

        A batch sampled just before the window evicted it (possible when a
        communication worker inserts concurrently) is credited on its
        eviction record instead.
        """
        with self._cond:
            for k, e in enumerate(self._entries):
                if e.batch_id == batch_id:
                    break
            else:
                rem = self._window_evicted.pop(batch_id, None)
                if rem is None:
                    raise WorksetError(f"batch {batch_id} is not in the workset")
                rem.uses += 1
                return
            e.use_count += 1
            if e.use_count >= self.max_uses:
                del self._entries[k]
                self.removed.append(Removal(e.batch_id, e.insert_time, e.use_count, "cap"))

    def drain(self) -> list[CacheEntry]:
        """Remove everything left at the end of a run."""
        with self._cond:
            left = self._entries
            self._entries = []
            self.removed.extend(Removal(e.batch_id, e.insert_time, e.use_count, "end") for e in left)
            self._cond.notify_all()
            return left

    def wake(self):
        with self._cond:
            self._cond.notify_all()
