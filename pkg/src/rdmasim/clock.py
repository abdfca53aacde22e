"""Virtual time, cost charging and the shared event/cost trace.

All simulated latencies are charged to a clock. The virtual clock keeps
time as integer nanoseconds so that every sum, difference and max used by
the timing assertions is exact; microsecond views are derived, never
stored.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

US_TO_NS = 1000


def us_to_ns(us: float) -> int:
    """Convert a microsecond cost to integer nanoseconds (round half away from noise)."""
    return round(us * US_TO_NS)


def ns_to_us(ns: int) -> float:
    return ns / US_TO_NS


@dataclass
class TraceEvent:
    ts_ns: int
    actor: str
    event: str
    fields: dict[str, Any] = field(default_factory=dict)

    def as_record(self) -> dict[str, Any]:
        rec = {"ts_us": ns_to_us(self.ts_ns), "actor": self.actor, "event": self.event}
        rec.update(self.fields)
        return rec


class TraceLog:
    """Line-delimited structured event log shared by the clock and the orchestrator.

    Cost charges appear as ``event="charge"`` records, which makes the log an
    independent ledger: summing the charges over a window must reproduce the
    clock delta for that window.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()

    def emit(self, ts_ns: int, actor: str, event: str, **fields: Any) -> None:
        if not self.enabled:
            return
        with self._lock:
            self._events.append(TraceEvent(ts_ns, actor, event, fields))

    def events(self, event: Optional[str] = None) -> list[TraceEvent]:
        with self._lock:
            evs = list(self._events)
        if event is None:
            return evs
        return [e for e in evs if e.event == event]

    def charges(self, label: Optional[str] = None) -> list[TraceEvent]:
        evs = self.events("charge")
        if label is None:
            return evs
        return [e for e in evs if e.fields.get("label") == label]

    def charged_ns(self, label: Optional[str] = None) -> int:
        return sum(e.fields["cost_ns"] for e in self.charges(label))

    def clear(self) -> None:
        with self._lock:
            self._events.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(e.as_record(), sort_keys=True) for e in self.events())

    def write_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl() + "\n")


@dataclass
class TrackResult:
    """Outcome of running a callable on one logical-time track."""

    value: Any
    elapsed_ns: int


class VirtualClock:
    """Deterministic simulation clock.

    Sequential work accumulates by summing charges; parallel tracks started
    with :meth:`parallel` share a common origin and merge at the max of their
    end times. Within one track time never decreases.
    """

    wall = False

    def __init__(self, trace: Optional[TraceLog] = None):
        self._now_ns = 0
        self._lock = threading.RLock()
        self.trace = trace if trace is not None else TraceLog(enabled=False)

    @property
    def now_ns(self) -> int:
        return self._now_ns

    @property
    def now_us(self) -> float:
        return ns_to_us(self._now_ns)

    def advance_ns(self, ns: int) -> None:
        if ns < 0:
            raise ValueError(f"cannot advance clock by negative delta: {ns}")
        with self._lock:
            self._now_ns += ns

    def charge(self, label: str, cost_ns: int, actor: str = "sim") -> None:
        """Advance by ``cost_ns`` and record the charge in the trace ledger."""
        if cost_ns < 0:
            raise ValueError(f"negative cost for {label}: {cost_ns}")
        with self._lock:
            self._now_ns += cost_ns
            self.trace.emit(self._now_ns, actor, "charge", label=label, cost_ns=cost_ns)

    def parallel(self, *fns: Callable[[], Any]) -> list[TrackResult]:
        """Run each callable as a logical track from the same start instant.

        The clock ends at start + max(track elapsed); per-track elapsed times
        are returned so callers can account for hidden/visible portions.
        """
        with self._lock:
            start = self._now_ns
            results: list[TrackResult] = []
            ends: list[int] = []
            for fn in fns:
                self._now_ns = start
                value = fn()
                results.append(TrackResult(value, self._now_ns - start))
                ends.append(self._now_ns)
            self._now_ns = max(ends) if ends else start
        return results

    def isolated(self, fn: Callable[[], Any]) -> TrackResult:
        """Run ``fn`` off the timeline: charges are traced but ``now`` is restored.

        Models background work (replenishment, the remote peer's own setup)
        that never extends the critical path being measured.
        """
        with self._lock:
            start = self._now_ns
            value = fn()
            elapsed = self._now_ns - start
            self._now_ns = start
        return TrackResult(value, elapsed)


class WallClock:
    """Wall-clock mode for the harness: charges really sleep (scaled).

    Acceptance runs on :class:`VirtualClock`; this exists so the harness can
    drive real concurrent workers when asked to.
    """

    wall = True

    def __init__(self, trace: Optional[TraceLog] = None, scale: float = 1.0):
        self.trace = trace if trace is not None else TraceLog(enabled=False)
        self.scale = scale
        self._origin = time.monotonic_ns()

    @property
    def now_ns(self) -> int:
        return time.monotonic_ns() - self._origin

    @property
    def now_us(self) -> float:
        return ns_to_us(self.now_ns)

    def advance_ns(self, ns: int) -> None:
        if ns > 0:
            time.sleep(ns * self.scale / 1e9)

    def charge(self, label: str, cost_ns: int, actor: str = "sim") -> None:
        self.advance_ns(cost_ns)
        self.trace.emit(self.now_ns, actor, "charge", label=label, cost_ns=cost_ns)

    def parallel(self, *fns: Callable[[], Any]) -> list[TrackResult]:
        results: list[Optional[TrackResult]] = [None] * len(fns)

        def run(i: int, fn: Callable[[], Any]) -> None:
            t0 = self.now_ns
            value = fn()
            results[i] = TrackResult(value, self.now_ns - t0)

        threads = [threading.Thread(target=run, args=(i, fn)) for i, fn in enumerate(fns)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return [r for r in results if r is not None]

    def isolated(self, fn: Callable[[], Any]) -> TrackResult:
        t0 = self.now_ns
        value = fn()
        return TrackResult(value, self.now_ns - t0)


Clock = VirtualClock  # default clock type used throughout the simulator
