"""Constant-return caching for control-plane internals.

Internal control-plane subroutines are registered with a cost and an
explicit idempotence declaration. A profiler (see :mod:`rdmasim.profiler`)
observes their return values under randomized API workloads; functions that
always returned the same value, often enough, across enough distinct call
orders, become cache entries. Dispatching through a populated cache then
short-circuits those calls at zero cost. Any error raised through a cached
path invalidates the whole map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .clock import us_to_ns
from .errors import UnregisteredFunctionError

# Constancy thresholds: a function must be seen at least this many times,
# across at least this many distinct API orderings, before it may be cached.
MIN_CALLS_FOR_CONSTANT = 8
MIN_ORDERINGS_FOR_CONSTANT = 4


@dataclass
class RegisteredFn:
    name: str
    fn: Callable[..., Any]
    cost_us: float
    idempotent: bool
    space: str = "user"  # "user" or "kernel", reporting metadata only

    @property
    def cost_ns(self) -> int:
        return us_to_ns(self.cost_us)


class FunctionRegistry:
    """Named control-plane subroutines with costs and idempotence declarations."""

    def __init__(self):
        self._fns: dict[str, RegisteredFn] = {}

    def register(self, name: str, fn: Callable[..., Any], cost_us: float,
                 idempotent: bool, space: str = "user") -> None:
        if name in self._fns:
            raise ValueError(f"function {name!r} already registered")
        self._fns[name] = RegisteredFn(name, fn, cost_us, idempotent, space)

    def get(self, name: str) -> RegisteredFn:
        try:
            return self._fns[name]
        except KeyError:
            raise UnregisteredFunctionError(f"unregistered control-plane function {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._fns

    def names(self) -> list[str]:
        return sorted(self._fns)

    def is_idempotent(self, name: str) -> bool:
        return self.get(name).idempotent

    def cost_us(self, name: str) -> float:
        return self.get(name).cost_us


@dataclass
class FunctionProfile:
    """Observed behavior of one registered function during profiling."""

    values: list[Any] = field(default_factory=list)
    call_count: int = 0
    ordering_count: int = 0
    constant: bool = False


@dataclass
class ProfileReport:
    """Output of a profiling run: per-function observations and verdicts."""

    api_set: tuple[str, ...]
    trials: int
    seed: int
    functions: dict[str, FunctionProfile] = field(default_factory=dict)

    def constants(self) -> dict[str, Any]:
        return {name: prof.values[0] for name, prof in self.functions.items() if prof.constant}

    def to_json(self) -> str:
        payload = {
            "api_set": list(self.api_set),
            "trials": self.trials,
            "seed": self.seed,
            "functions": {
                name: {
                    "values": prof.values,
                    "call_count": prof.call_count,
                    "ordering_count": prof.ordering_count,
                    "constant": prof.constant,
                }
                for name, prof in sorted(self.functions.items())
            },
        }
        return json.dumps(payload, sort_keys=True, indent=1)


class CacheMap:
    """Per-host map of function name -> cached constant return value."""

    def __init__(self):
        self.entries: dict[str, Any] = {}
        self.generation = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def get(self, name: str) -> Any:
        return self.entries[name]

    def replace(self, entries: dict[str, Any]) -> None:
        self.entries = dict(entries)
        self.generation += 1

    def invalidate(self, names: Optional[list[str]] = None) -> None:
        """Drop the named entries, or everything when ``names`` is None."""
        if names is None:
            self.entries.clear()
        else:
            for name in names:
                self.entries.pop(name, None)
        self.generation += 1

    # The map persists between harness runs as structured text.

    def to_text(self) -> str:
        return json.dumps({"generation": self.generation, "entries": self.entries},
                          sort_keys=True, indent=1)

    @classmethod
    def from_text(cls, text: str) -> "CacheMap":
        payload = json.loads(text)
        cache = cls()
        cache.entries = dict(payload["entries"])
        cache.generation = int(payload["generation"])
        return cache

    def write_file(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_file(cls, path: str) -> "CacheMap":
        with open(path) as fh:
            return cls.from_text(fh.read())


def build_cache(report: ProfileReport, registry: FunctionRegistry,
                into: Optional[CacheMap] = None) -> CacheMap:
    """Turn a profile report into a cache map.

    Only functions that were observed constant *and* are declared idempotent
    in the registry are eligible; observed constancy alone never qualifies a
    stateful function.
    """
    cache = into if into is not None else CacheMap()
    entries = {
        name: value
        for name, value in report.constants().items()
        if name in registry and registry.is_idempotent(name)
    }
    cache.replace(entries)
    return cache


class CacheDispatch:
    """Call-path for control-plane subroutines, optionally short-circuited by a cache.

    A dispatch with ``cache=None`` (or an empty map) is the uncached mode:
    every call executes the implementation and charges its configured cost.
    A hit charges nothing. Cached functions are nullary with respect to
    behavior, so arguments are ignored on hits.
    """

    def __init__(self, registry: FunctionRegistry, clock, cache: Optional[CacheMap] = None,
                 actor: str = "verbs", recorder: Optional[Callable[[str, Any], None]] = None,
                 reprofile: Optional[Callable[[], None]] = None,
                 reprofile_period_us: Optional[float] = None):
        self.registry = registry
        self.clock = clock
        self.cache = cache
        self.actor = actor
        self.recorder = recorder
        self.reprofile = reprofile
        self.reprofile_period_ns = None if reprofile_period_us is None else us_to_ns(reprofile_period_us)
        self._last_profile_ns = clock.now_ns
        self.hits = 0
        self.misses = 0

    @property
    def cached(self) -> bool:
        return self.cache is not None and len(self.cache) > 0

    def dispatched(self) -> int:
        return self.hits + self.misses

    def _maybe_periodic_reprofile(self) -> None:
        if self.reprofile is None or self.reprofile_period_ns is None:
            return
        if self.clock.now_ns - self._last_profile_ns >= self.reprofile_period_ns:
            self._last_profile_ns = self.clock.now_ns
            self.reprofile()

    def __call__(self, name: str, *args: Any) -> Any:
        self._maybe_periodic_reprofile()
        entry = self.registry.get(name)
        if self.cache is not None and name in self.cache:
            self.hits += 1
            value = self.cache.get(name)
            if self.recorder is not None:
                self.recorder(name, value)
            return value
        self.misses += 1
        self.clock.charge(name, entry.cost_ns, actor=self.actor)
        try:
            value = entry.fn(*args)
        except Exception:
            # An error surfacing through a cached path poisons trust in the
            # cache: drop everything and re-profile before the next use.
            if self.cached:
                self.cache.invalidate()
                if self.reprofile is not None:
                    self._last_profile_ns = self.clock.now_ns
                    self.reprofile()
            raise
        if self.recorder is not None:
            self.recorder(name, value)
        return value
