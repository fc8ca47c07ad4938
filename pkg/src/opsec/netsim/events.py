"""Event loop with (time, sequence) ordering and a digestible event log."""
from __future__ import annotations

import hashlib
import heapq
import itertools


class EventLoop:
    def __init__(self):
        self.now = 0
        self._heap = []
        self._seq = itertools.count()
        self.processed = 0

    def at(self, time: int, fn, *args) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        heapq.heappush(self._heap, (int(time), next(self._seq), fn, args))

    def after(self, delay: int, fn, *args) -> None:
        self.at(self.now + int(delay), fn, *args)

    def run(self, until: int | None = None) -> None:
        while self._heap:
            t, _seq, fn, args = self._heap[0]
            if until is not None and t > until:
                break
            heapq.heappop(self._heap)
            self.now = t
            self.processed += 1
            fn(*args)

    @property
    def pending(self) -> int:
        return len(self._heap)


class EventLog:
    """Append-only record of what happened; the digest covers every entry."""

    def __init__(self, keep: bool = False):
        self._h = hashlib.sha256()
        self.keep = keep
        self.lines: list[str] = []
        self.count = 0

    def add(self, time: int, what: str, **fields) -> None:
        body = " ".join(f"{k}={fields[k]}" for k in sorted(fields))
        line = f"{time} {what} {body}"
        self._h.update(line.encode() + b"\n")
        self.count += 1
        if self.keep:
            self.lines.append(line)

    def digest(self) -> str:
        return self._h.hexdigest()
