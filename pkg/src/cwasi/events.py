"""Structured event log for lifecycle and dispatch observability."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class Event:
    timestamp: float
    function: str
    event: str
    mode: str | None = None

    def line(self) -> str:
        return f"{self.timestamp:.6f}\t{self.function}\t{self.event}\t{self.mode or '-'}"


class EventLog:
    """Append-only, thread-safe; optionally mirrored to a file, one line each."""

    def __init__(self, path: Path | str | None = None):
        self._events: list[Event] = []
        self._lock = threading.Lock()
        self._fh = open(path, "a") if path else None

    def emit(self, function: str, event: str, mode: str | None = None) -> Event:
        ev = Event(time.time(), function, event, mode)
        with self._lock:
            self._events.append(ev)
            if self._fh:
                self._fh.write(ev.line() + "\n")
                self._fh.flush()
        return ev

    @property
    def events(self) -> list[Event]:
        with self._lock:
            return list(self._events)

    def named(self, event: str, function: str | None = None) -> list[Event]:
        return [
            e for e in self.events
            if e.event == event and (function is None or e.function == function)
        ]

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None
