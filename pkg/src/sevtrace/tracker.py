"""Observation-phase page tracking with track-exactly-once semantics.

Starting a session marks every guest page as tracked (the hypervisor has
invalidated all second-level mappings). The first access to a tracked page
produces a record and clears the flag, so later accesses to it are invisible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from sevtrace.config import ACCESS_LETTERS, ACCESS_NAMES
from sevtrace.mem_model import GuestMemory


class TrackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AccessRecord:
    gpa_page: int
    time: float
    access_type: str   # "read" | "write" | "execute"

    @property
    def letter(self) -> str:
        return self.access_type[0]


def _type_name(code: int) -> str:
    return ("read", "write", "execute")[code]


@dataclass
class RecordArrays:
    """Columnar form of a record list, used by the search phase."""
    pages: np.ndarray
    times: np.ndarray
    types: np.ndarray
    stop_time: float | None = None

    def __len__(self) -> int:
        return len(self.pages)

    def to_list(self) -> list[AccessRecord]:
        return [AccessRecord(int(p), float(t), _type_name(int(c)))
                for p, t, c in zip(self.pages, self.times, self.types)]

    @classmethod
    def from_records(cls, records: Sequence[AccessRecord] | Iterable[tuple],
                     stop_time: float | None = None) -> "RecordArrays":
        rows = [(r.gpa_page, r.time, ACCESS_NAMES[r.access_type])
                if isinstance(r, AccessRecord) else (r[0], r[1], _code(r[2]))
                for r in records]
        if not rows:
            return cls(np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int8), stop_time)
        p, t, c = zip(*rows)
        return cls(np.array(p, np.int64), np.array(t, float), np.array(c, np.int8), stop_time)

    def take(self, idx) -> "RecordArrays":
        return RecordArrays(self.pages[idx], self.times[idx], self.types[idx], self.stop_time)


def _code(t) -> int:
    if isinstance(t, str):
        return ACCESS_NAMES[t] if len(t) > 1 else ACCESS_LETTERS.index(t)
    return int(t)


@numba.njit(cache=True)
def _first_touch(pages, tracked):
    """Indices of accesses that hit a still-tracked page; clears those flags."""
    out = np.empty(pages.shape[0], dtype=np.int64)
    n = 0
    for i in range(pages.shape[0]):
        p = pages[i]
        if tracked[p]:
            tracked[p] = False
            out[n] = i
            n += 1
    return out[:n]


class TrackingSession:
    def __init__(self, memory: GuestMemory, start_time: float):
        self.memory = memory
        self.start_time = start_time
        self.stop_time: float | None = None
        self.stop_event = None
        self._pages: list[np.ndarray] = []
        self._times: list[np.ndarray] = []
        self._types: list[np.ndarray] = []

    @property
    def active(self) -> bool:
        return self.stop_time is None

    def _accepts(self, t: float) -> bool:
        if self.stop_time is not None and t > self.stop_time:
            self.memory.tracked[:] = False
            return False
        return t >= self.start_time

    def on_access(self, gpa_page: int, access_type, at_ms: float) -> AccessRecord | None:
        if not self._accepts(at_ms) or not self.memory.tracked[gpa_page]:
            return None
        self.memory.tracked[gpa_page] = False
        code = _code(access_type)
        self._pages.append(np.array([gpa_page], np.int64))
        self._times.append(np.array([at_ms], float))
        self._types.append(np.array([code], np.int8))
        return AccessRecord(int(gpa_page), float(at_ms), _type_name(code))

    def on_accesses(self, times: np.ndarray, pages: np.ndarray, types: np.ndarray) -> int:
        """Batch form of :meth:`on_access` for a time-ordered access stream."""
        keep = times >= self.start_time
        if self.stop_time is not None:
            keep &= times <= self.stop_time
        if not keep.all():
            times, pages, types = times[keep], pages[keep], types[keep]
        if not len(pages):
            return 0
        first = _first_touch(np.ascontiguousarray(pages, dtype=np.int64), self.memory.tracked)
        if not len(first):
            return 0
        self._pages.append(pages[first].astype(np.int64))
        self._times.append(times[first].astype(float))
        self._types.append(types[first].astype(np.int8))
        return len(first)

    def arrays(self) -> RecordArrays:
        if not self._pages:
            return RecordArrays(np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int8),
                                self.stop_time)
        if len(self._pages) > 1:
            self._pages = [np.concatenate(self._pages)]
            self._times = [np.concatenate(self._times)]
            self._types = [np.concatenate(self._types)]
        return RecordArrays(self._pages[0], self._times[0], self._types[0], self.stop_time)

    @property
    def records(self) -> list[AccessRecord]:
        return self.arrays().to_list()

    def __len__(self) -> int:
        return sum(len(p) for p in self._pages)


def tracking_start(memory: GuestMemory, at_ms: float) -> TrackingSession:
    current = memory.session
    if current is not None and current.active:
        raise TrackingError("a tracking session is already active on this memory")
    memory.tracked[:] = True
    session = TrackingSession(memory, at_ms)
    memory.session = session
    return session


def tracking_stop(session: TrackingSession, event=None, detection_delay_ms: float = 0.0,
                  event_time: float | None = None) -> TrackingSession:
    """Close the session at ``event time + detection delay``.

    Accesses arriving in ``(event time, stop_time]`` are still recorded, both
    those already delivered and late ones offered after this call.
    """
    if not session.active:
        raise TrackingError("session already stopped")
    if event_time is None:
        event_time = event.time if event is not None else session.start_time
    session.stop_event = event
    session.stop_time = event_time + detection_delay_ms
    arr = session.arrays()
    keep = arr.times <= session.stop_time
    if not keep.all():
        session.memory.tracked[arr.pages[~keep]] = True
        session._pages, session._times, session._types = (
            [arr.pages[keep]], [arr.times[keep]], [arr.types[keep]])
    # flags stay set until the stop takes effect; the next start resets them
    if session.memory.session is session:
        session.memory.session = None
    return session


def reaction_time(session: TrackingSession, last_use_ms: float) -> float:
    if session.stop_time is None:
        raise TrackingError("session still active")
    return session.stop_time - last_use_ms
