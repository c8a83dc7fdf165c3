"""Exact counters of forward passes, backward passes and SGD updates."""

from __future__ import annotations

import contextlib
import contextvars
import threading
from dataclasses import dataclass, field

FORWARD = "forward"
BACKWARD = "backward"
SGD_UPDATE = "sgd_update"
PERTURB = "perturb"  # delta update; logged for ordering, not counted

_COUNTED = (FORWARD, BACKWARD, SGD_UPDATE)


@dataclass
class CostLedger:
    forward_count: int = 0
    backward_count: int = 0
    sgd_update_count: int = 0
    events: list[tuple[int, str]] = field(default_factory=list)
    keep_events: bool = True

    def __post_init__(self):
        self._lock = threading.Lock()
        self._seq = len(self.events)

    def record(self, kind: str) -> int:
        """Append an event and bump its counter; returns the sequence id."""
        with self._lock:
            seq = self._seq
            self._seq += 1
            if kind == FORWARD:
                self.forward_count += 1
            elif kind == BACKWARD:
                self.backward_count += 1
            elif kind == SGD_UPDATE:
                self.sgd_update_count += 1
            elif kind != PERTURB:
                raise ValueError(f"unknown ledger event kind {kind!r}")
            if self.keep_events:
                self.events.append((seq, kind))
            return seq

    def counts(self) -> dict[str, int]:
        return {
            "forward_count": self.forward_count,
            "backward_count": self.backward_count,
            "sgd_update_count": self.sgd_update_count,
        }

    def consistent(self) -> bool:
        """Counters agree with the event log (only meaningful with keep_events)."""
        tally = dict.fromkeys(_COUNTED, 0)
        for _, kind in self.events:
            if kind in tally:
                tally[kind] += 1
        return (tally[FORWARD], tally[BACKWARD], tally[SGD_UPDATE]) == (
            self.forward_count,
            self.backward_count,
            self.sgd_update_count,
        )


_active: contextvars.ContextVar[CostLedger | None] = contextvars.ContextVar(
    "freeadv_ledger", default=None
)


def active_ledger() -> CostLedger | None:
    return _active.get()


@contextlib.contextmanager
def use_ledger(ledger: CostLedger):
    token = _active.set(ledger)
    try:
        yield ledger
    finally:
        _active.reset(token)


def record(kind: str) -> int | None:
    ledger = _active.get()
    if ledger is None:
        return None
    return ledger.record(kind)
