"""Urgency-weighted response queue.

A thread's priority at time ``now`` is ``keyword_weight + alpha * elapsed``
where ``elapsed = now - request_ts`` in seconds.  Because the ``now`` term is
shared by every entry it cancels in any comparison, so entries are ordered by
the static key ``keyword_weight - alpha * request_ts`` and the heap never needs
re-keying as time passes.
"""

from __future__ import annotations

import heapq
import itertools
import json
import threading
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

from .errors import EmptyQueueError
from .lm_core import tokenize

DEFAULT_ALPHA = 0.01  # priority units per second waited


class WeightTable(dict):
    """Lower-cased single-token keyword -> positive weight."""

    def __init__(self, entries: Mapping[str, float] | None = None):
        super().__init__()
        for word, weight in (entries or {}).items():
            key = word.lower()
            if tokenize(key) != [key]:
                raise ValueError(f"keyword {word!r} is not a single token")
            weight = float(weight)
            if not weight > 0:
                raise ValueError(f"keyword {word!r} needs a positive weight, got {weight}")
            self[key] = weight

    @classmethod
    def load(cls, path: str | Path) -> "WeightTable":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: weight table must be a JSON object")
        return cls(data)


def text_weight(text: str, table: Mapping[str, float]) -> float:
    return float(sum(table.get(tok, 0.0) for tok in tokenize(text)))


def thread_weight(thread, table: Mapping[str, float], separator: str = "\n") -> float:
    """Sum of keyword weights over every token of the thread's joined entries.

    Repeated keywords count every time they occur.
    """
    return text_weight(separator.join(thread.entries()), table)


@dataclass(frozen=True)
class PriorityEntry:
    thread_id: str
    keyword_weight: float
    request_ts: int  # ms
    key: float

    def priority_at(self, now_ms: int, alpha: float) -> float:
        return self.keyword_weight + alpha * (now_ms - self.request_ts) / 1000.0

    def to_json(self) -> dict:
        return {"thread_id": self.thread_id, "keyword_weight": self.keyword_weight, "request_ts": self.request_ts}


def static_key(keyword_weight: float, request_ts: int, alpha: float) -> float:
    return keyword_weight - alpha * (request_ts / 1000.0)


class PriorityQueue:
    """Max-priority queue keyed by thread id with in-place updates.

    Updates push a fresh heap item and leave the stale one behind; stale items
    are skipped on pop.  Pops prefer the larger key, then the earlier
    ``request_ts``, then the smaller thread id.  All public methods hold a lock
    so producers may upsert while a consumer pops.
    """

    def __init__(self, alpha: float = DEFAULT_ALPHA):
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        self.alpha = alpha
        self._heap: list[tuple[float, int, str, int]] = []
        self._entries: dict[str, tuple[PriorityEntry, int]] = {}
        self._version = itertools.count()
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, thread_id: str) -> bool:
        return thread_id in self._entries

    def upsert(self, thread_id: str, keyword_weight: float, request_ts: int) -> PriorityEntry:
        entry = PriorityEntry(thread_id, float(keyword_weight), int(request_ts),
                              static_key(keyword_weight, request_ts, self.alpha))
        with self._lock:
            current = self._entries.get(thread_id)
            if current is not None and current[0] == entry:
                return entry
            version = next(self._version)
            self._entries[thread_id] = (entry, version)
            heapq.heappush(self._heap, (-entry.key, entry.request_ts, thread_id, version))
        return entry

    def get(self, thread_id: str) -> PriorityEntry:
        with self._lock:
            return self._entries[thread_id][0]

    def remove(self, thread_id: str) -> PriorityEntry:
        with self._lock:
            entry, _ = self._entries.pop(thread_id)
            return entry

    def _discard_stale(self) -> None:
        heap = self._heap
        while heap:
            _, _, tid, version = heap[0]
            live = self._entries.get(tid)
            if live is not None and live[1] == version:
                return
            heapq.heappop(heap)

    def peek(self) -> PriorityEntry:
        with self._lock:
            self._discard_stale()
            if not self._heap:
                raise EmptyQueueError("priority queue is empty")
            return self._entries[self._heap[0][2]][0]

    def pop_entry(self) -> PriorityEntry:
        with self._lock:
            self._discard_stale()
            if not self._heap:
                raise EmptyQueueError("priority queue is empty")
            _, _, tid, _ = heapq.heappop(self._heap)
            entry, _ = self._entries.pop(tid)
            return entry

    def pop_head(self) -> str:
        return self.pop_entry().thread_id

    def entries(self) -> list[PriorityEntry]:
        """Live entries in pop order (non-destructive)."""
        with self._lock:
            live = [e for e, _ in self._entries.values()]
        return sorted(live, key=lambda e: (-e.key, e.request_ts, e.thread_id))

    def drain(self) -> Iterable[PriorityEntry]:
        while len(self):
            yield self.pop_entry()

    def compact(self) -> None:
        """Drop stale heap items accumulated by updates."""
        with self._lock:
            self._heap = [(-e.key, e.request_ts, tid, v) for tid, (e, v) in self._entries.items()]
            heapq.heapify(self._heap)


def load_weights(path: str | Path | None) -> WeightTable:
    return WeightTable.load(path) if path else WeightTable()
