"""Workload-driven profiling of control-plane internals.

The profiler executes the critical verbs APIs in randomized combinations and
orders on scratch copies of a host, records every internal function's return
values, and marks the ones that always agreed. A verification pass replays a
workload through cached and uncached dispatch side by side and demands
identical returns everywhere.
"""

from __future__ import annotations

import random
from typing import Iterable, Optional

from .cache import (
    MIN_CALLS_FOR_CONSTANT,
    MIN_ORDERINGS_FOR_CONSTANT,
    CacheDispatch,
    CacheMap,
    FunctionProfile,
    ProfileReport,
    build_cache,
)
from .gid import Gid
from .verbs import Host, QpState, SimEnv

PROFILE_API_SET = ("get_device_list", "open_device", "alloc_pd", "reg_mr",
                   "create_qp", "modify_qp")

_MR_LENGTHS = (1024, 4096, 32 * 1024, 64 * 1024)


def _scratch_host(host: Host, seed: int) -> Host:
    """A fresh world mirroring the host's device layout and cost model."""
    env = SimEnv(cost_model=host.env.cost_model, seed=seed, trace=False, record_fabric=False)
    return env.new_host(host.name, device_count=len(host.devices))


class _ApiWorkload:
    """Runs one randomized API sequence on a scratch host through one dispatch.

    Prerequisite resources are created on demand through the same dispatch,
    so plumbing calls (a CQ for create_qp, a context for alloc_pd) are
    observed exactly like explicitly requested ones.
    """

    def __init__(self, host: Host, dispatch: CacheDispatch, rng: random.Random):
        self.host = host
        self.verbs = host.verbs
        self.dispatch = dispatch
        self.rng = rng
        self.ctx = None
        self.pd = None
        self.cq = None
        self.idle_qps: list = []

    def _ensure_ctx(self):
        if self.ctx is None:
            self.ctx = self.verbs.open_device("dev0", self.dispatch)
        return self.ctx

    def _ensure_pd(self):
        if self.pd is None:
            self.pd = self.verbs.alloc_pd(self._ensure_ctx())
        return self.pd

    def _ensure_cq(self):
        if self.cq is None:
            self.cq = self.verbs.create_cq(self._ensure_ctx())
        return self.cq

    def run_api(self, api: str) -> None:
        if api == "get_device_list":
            self.verbs.get_device_list(self.dispatch)
        elif api == "open_device":
            self.ctx = self.verbs.open_device("dev0", self.dispatch)
        elif api == "alloc_pd":
            self.pd = self.verbs.alloc_pd(self._ensure_ctx())
        elif api == "reg_mr":
            self.verbs.reg_mr(self._ensure_pd(), self.rng.choice(_MR_LENGTHS))
        elif api == "create_qp":
            qp = self.verbs.create_qp(self._ensure_pd(), self._ensure_cq())
            self.idle_qps.append(qp)
        elif api == "modify_qp":
            if not self.idle_qps:
                self.idle_qps.append(self.verbs.create_qp(self._ensure_pd(), self._ensure_cq()))
            qp = self.idle_qps.pop()
            remote = Gid.for_host(0xBEEF)
            self.verbs.modify_qp(qp, QpState.INIT)
            self.verbs.modify_qp(qp, QpState.RTR, remote_gid=remote,
                                 remote_qpn=self.rng.randint(1, 512))
            self.verbs.modify_qp(qp, QpState.RTS)
        else:
            raise ValueError(f"unknown profiled API {api!r}")


def _trial_plan(api_set: Iterable[str], rng: random.Random) -> list[str]:
    plan: list[str] = []
    for api in sorted(api_set):
        plan.extend([api] * rng.randint(1, 3))
    rng.shuffle(plan)
    return plan


def profile(host: Host, api_set: Iterable[str] = PROFILE_API_SET, trials: int = 16,
            seed: int = 0, min_calls: int = MIN_CALLS_FOR_CONSTANT,
            min_orderings: int = MIN_ORDERINGS_FOR_CONSTANT) -> ProfileReport:
    """Observe internal function returns under ``trials`` randomized workloads."""
    api_set = tuple(sorted(set(api_set)))
    if not api_set:
        raise ValueError("api_set must not be empty")
    unknown = set(api_set) - set(PROFILE_API_SET)
    if unknown:
        raise ValueError(f"unprofilable APIs: {sorted(unknown)}")
    if trials < 1:
        raise ValueError("trials must be >= 1")

    report = ProfileReport(api_set=api_set, trials=trials, seed=seed)
    orderings: dict[str, set[tuple[str, ...]]] = {}
    for trial in range(trials):
        rng = random.Random(seed * 1_000_003 + trial)
        plan = _trial_plan(api_set, rng)
        ordering_id = tuple(plan)
        scratch = _scratch_host(host, seed=seed * 65_537 + trial)
        observations: list[tuple[str, object]] = []
        dispatch = CacheDispatch(scratch.registry, scratch.env.clock, cache=None,
                                 recorder=lambda name, value: observations.append((name, value)))
        workload = _ApiWorkload(scratch, dispatch, rng)
        for api in plan:
            workload.run_api(api)
        for name, value in observations:
            prof = report.functions.setdefault(name, FunctionProfile())
            prof.values.append(value)
            prof.call_count += 1
            orderings.setdefault(name, set()).add(ordering_id)

    for name, prof in report.functions.items():
        prof.ordering_count = len(orderings.get(name, ()))
        first = prof.values[0]
        prof.constant = (all(v == first for v in prof.values)
                         and prof.call_count >= min_calls
                         and prof.ordering_count >= min_orderings)
    return report


def reprofile_host(host: Host, api_set: Iterable[str] = PROFILE_API_SET,
                   trials: int = 16, seed: int = 0) -> CacheMap:
    """Profile and rebuild the host's cache map in place."""
    report = profile(host, api_set, trials, seed)
    return build_cache(report, host.registry, into=host.cache)


def verify_cache(host: Host, cache: Optional[CacheMap] = None, calls: int = 1000,
                 seed: int = 0, api_set: Iterable[str] = PROFILE_API_SET) -> bool:
    """Replay a workload through cached and uncached dispatch; True iff all returns agree.

    Both replays run on twin scratch worlds seeded identically, so any
    disagreement is attributable to the cache contents alone.
    """
    cache = cache if cache is not None else host.cache
    cached_host = _scratch_host(host, seed=seed * 7 + 1)
    plain_host = _scratch_host(host, seed=seed * 7 + 1)

    def replay(target: Host, use_cache: Optional[CacheMap]) -> list[tuple[str, object]]:
        observed: list[tuple[str, object]] = []
        dispatch = CacheDispatch(target.registry, target.env.clock, cache=use_cache,
                                 recorder=lambda name, value: observed.append((name, value)))
        trial = 0
        while len(observed) < calls:
            rng = random.Random(seed * 99_991 + trial)
            workload = _ApiWorkload(target, dispatch, rng)
            for api in _trial_plan(api_set, rng):
                workload.run_api(api)
            trial += 1
        return observed

    via_cache = replay(cached_host, cache)
    direct = replay(plain_host, None)
    if len(via_cache) != len(direct):
        return False
    return all(a == b for a, b in zip(via_cache, direct))
