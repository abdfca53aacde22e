"""Profiling, cache construction, dispatch accounting and invalidation."""

import random

import pytest

from rdmasim.cache import CacheDispatch, CacheMap, FunctionRegistry, build_cache
from rdmasim.costmodel import PER_CORE_CHECK
from rdmasim.errors import InjectedFaultError, UnregisteredFunctionError
from rdmasim.profiler import PROFILE_API_SET, profile, reprofile_host, verify_cache
from rdmasim.verbs import SimEnv, run_connection_chain


@pytest.fixture
def host():
    return SimEnv(seed=41).new_host()


# -- profiling -------------------------------------------------------------------


def test_per_core_check_marked_constant(host):
    report = profile(host, trials=16, seed=0)
    prof = report.functions[PER_CORE_CHECK]
    assert prof.constant
    assert prof.values[0] == 0
    assert prof.call_count >= 8
    assert prof.ordering_count >= 4


def test_counter_returning_function_not_constant(host):
    report = profile(host, trials=16, seed=0)
    # fresh handle per call: observed values differ
    assert not report.functions["create_device_handle"].constant
    assert not report.functions["build_mr_keys"].constant


def test_profile_deterministic_given_seed(host):
    a = profile(host, trials=16, seed=9).to_json()
    b = profile(host, trials=16, seed=9).to_json()
    assert a == b
    c = profile(host, trials=16, seed=10).to_json()
    assert c != a


def test_profile_requires_nonempty_api_set(host):
    with pytest.raises(ValueError):
        profile(host, api_set=(), trials=4)


def test_profile_rejects_unknown_api(host):
    with pytest.raises(ValueError):
        profile(host, api_set=("create_cq",), trials=4)


def test_insufficient_observations_not_constant(host):
    # two trials cannot reach the 4-distinct-orderings threshold
    report = profile(host, trials=2, seed=0)
    assert not any(p.constant for p in report.functions.values())


# -- cache construction --------------------------------------------------------------


def test_build_cache_contains_constant_idempotent_functions(host):
    report = profile(host, trials=16, seed=0)
    cache = build_cache(report, host.registry)
    assert PER_CORE_CHECK in cache
    for name in cache.entries:
        assert host.registry.is_idempotent(name)
        assert report.functions[name].constant


def test_constant_but_not_declared_idempotent_excluded(host):
    report = profile(host, trials=16, seed=0)
    # build_device_list echoes a constant device list but is declared
    # non-idempotent, so observed constancy alone must not cache it.
    prof = report.functions["build_device_list"]
    assert prof.constant is (all(v == prof.values[0] for v in prof.values)
                             and prof.call_count >= 8 and prof.ordering_count >= 4)
    cache = build_cache(report, host.registry)
    assert "build_device_list" not in cache


def test_all_nonconstant_report_gives_empty_cache(host):
    report = profile(host, trials=16, seed=0)
    for prof in report.functions.values():
        prof.constant = False
    cache = build_cache(report, host.registry)
    assert len(cache) == 0
    assert cache.generation == 1


def test_single_constant_gives_cache_of_size_one(host):
    report = profile(host, trials=16, seed=0)
    for name, prof in report.functions.items():
        prof.constant = name == PER_CORE_CHECK
    cache = build_cache(report, host.registry)
    assert sorted(cache.entries) == [PER_CORE_CHECK]


def test_generation_increments_on_rebuild(host):
    report = profile(host, trials=16, seed=0)
    cache = build_cache(report, host.registry)
    g1 = cache.generation
    build_cache(report, host.registry, into=cache)
    assert cache.generation == g1 + 1


# -- dispatch ---------------------------------------------------------------------------


def test_hit_returns_cached_value_at_zero_cost(host):
    reprofile_host(host, seed=0)
    clock = host.env.clock
    dispatch = host.cached_dispatch()
    t0 = clock.now_ns
    assert dispatch(PER_CORE_CHECK) == 0
    assert clock.now_ns == t0
    assert dispatch.hits == 1 and dispatch.misses == 0


def test_miss_matches_direct_execution(host):
    reprofile_host(host, seed=0)
    dispatch = host.cached_dispatch()
    assert dispatch("build_device_list", ["dev0"]) == ["dev0"]
    assert dispatch.misses == 1


def test_unregistered_name_rejected(host):
    with pytest.raises(UnregisteredFunctionError):
        host.uncached_dispatch()("no_such_fn")


def test_hit_plus_miss_equals_total(host):
    reprofile_host(host, seed=0)
    dispatch = host.cached_dispatch()
    run_connection_chain(host, dispatch)
    assert dispatch.hits + dispatch.misses == dispatch.dispatched()
    assert dispatch.hits > 0 and dispatch.misses > 0


def test_1000_random_dispatches_charge_only_misses(host):
    reprofile_host(host, seed=0)
    env = host.env
    dispatch = host.cached_dispatch()
    rng = random.Random(7)
    names = host.registry.names()
    # argument-taking internals need live handles; restrict to nullary ones
    nullary = [n for n in names if n not in ("build_device_list", "init_device_struct",
                                             "create_device_handle", "alloc_pd_handle",
                                             "pin_memory_pages", "alloc_cq_ring",
                                             "alloc_qp_handle", "apply_qp_transition")]
    t0 = env.clock.now_ns
    expected_ns = 0
    for _ in range(1000):
        name = rng.choice(nullary)
        if name not in host.cache:
            expected_ns += host.env.cost_model.subroutine_ns(name)
        dispatch(name)
    assert env.clock.now_ns - t0 == expected_ns


def test_cached_open_charges_uncached_minus_cached_function_costs(host):
    # speedup structure: cached cost == uncached cost - sum(cached entries on the path)
    reprofile_host(host, seed=0)
    env = host.env
    cm = env.cost_model
    t0 = env.clock.now_ns
    host.verbs.open_device("dev0", host.uncached_dispatch())
    uncached_ns = env.clock.now_ns - t0
    t1 = env.clock.now_ns
    host.verbs.open_device("dev0", host.cached_dispatch())
    cached_ns = env.clock.now_ns - t1
    assert cached_ns == uncached_ns - cm.subroutine_ns(PER_CORE_CHECK)
    assert uncached_ns >= 10 * cached_ns  # the 10x structure


# -- invalidation -----------------------------------------------------------------------


def test_invalidate_all_restores_full_cost(host):
    reprofile_host(host, seed=0)
    env = host.env
    dispatch = host.cached_dispatch()
    t0 = env.clock.now_ns
    dispatch(PER_CORE_CHECK)
    assert env.clock.now_ns == t0
    host.cache.invalidate()
    t1 = env.clock.now_ns
    dispatch(PER_CORE_CHECK)
    assert env.clock.now_ns - t1 == env.cost_model.subroutine_ns(PER_CORE_CHECK)


def test_invalidate_names_only(host):
    reprofile_host(host, seed=0)
    g = host.cache.generation
    host.cache.invalidate(["check_pd_caps"])
    assert "check_pd_caps" not in host.cache
    assert PER_CORE_CHECK in host.cache
    assert host.cache.generation == g + 1


def test_error_through_cached_path_invalidates_and_reprofiles(host):
    reprofile_host(host, seed=0)
    reprofiles = []

    def reprofile():
        reprofiles.append(True)
        reprofile_host(host, seed=1)

    dispatch = host.cached_dispatch(reprofile=reprofile)
    host.inject_fault("create_device_handle", times=1)
    with pytest.raises(InjectedFaultError):
        host.verbs.open_device("dev0", dispatch)
    assert reprofiles == [True]
    assert len(host.cache) > 0  # re-profiled back to a populated map
    # next call runs clean
    host.verbs.open_device("dev0", host.cached_dispatch())


def test_error_through_uncached_path_does_not_touch_cache(host):
    dispatch = host.uncached_dispatch()
    host.inject_fault("create_device_handle", times=1)
    with pytest.raises(InjectedFaultError):
        host.verbs.open_device("dev0", dispatch)
    assert host.cache.generation == 0


def test_periodic_reprofile_triggers_after_interval(host):
    reprofiles = []
    dispatch = host.cached_dispatch(reprofile=lambda: reprofiles.append(True),
                                    reprofile_period_us=1000.0)
    dispatch("check_pd_caps")
    assert reprofiles == []
    host.env.clock.advance_ns(2_000_000)
    dispatch("check_pd_caps")
    assert reprofiles == [True]


def test_invalidation_safety_bitwise_identical_to_never_cached():
    # after invalidate-all, a fresh run matches a never-cached run exactly
    def run(invalidate_first: bool):
        env = SimEnv(seed=99)
        h = env.new_host()
        if invalidate_first:
            reprofile_host(h, seed=0)
            h.cache.invalidate()
        t0 = env.clock.now_ns
        run_connection_chain(h, h.cached_dispatch())
        charges = [(e.fields["label"], e.fields["cost_ns"]) for e in env.trace.charges()
                   if e.ts_ns > t0]
        return env.clock.now_ns - t0, charges

    elapsed_a, charges_a = run(invalidate_first=True)
    elapsed_b, charges_b = run(invalidate_first=False)
    assert elapsed_a == elapsed_b
    assert charges_a == charges_b


# -- verification ------------------------------------------------------------------------


def test_verify_cache_on_built_cache(host):
    reprofile_host(host, seed=0)
    assert verify_cache(host, calls=1000, seed=1)


def test_verify_cache_detects_poisoned_entry(host):
    reprofile_host(host, seed=0)
    host.cache.entries["check_pd_caps"] = -1
    assert not verify_cache(host, calls=500, seed=1)


def test_verify_cache_vacuous_on_empty_cache(host):
    assert verify_cache(host, cache=CacheMap(), calls=200, seed=1)


# -- serialization ------------------------------------------------------------------------


def test_cache_map_text_round_trip(host, tmp_path):
    reprofile_host(host, seed=0)
    path = tmp_path / "cache.json"
    host.cache.write_file(str(path))
    again = CacheMap.from_file(str(path))
    assert again.entries == host.cache.entries
    assert again.generation == host.cache.generation


def test_registry_rejects_duplicate_names():
    reg = FunctionRegistry()
    reg.register("f", lambda: 1, 1.0, True)
    with pytest.raises(ValueError):
        reg.register("f", lambda: 2, 1.0, True)


def test_custom_registered_function_profiling(host):
    # a function returning its call counter is observed non-constant
    calls = {"n": 0}

    def counter():
        calls["n"] += 1
        return calls["n"]

    host.registry.register("call_counter", counter, 5.0, idempotent=True)
    dispatch = host.uncached_dispatch()
    values = [dispatch("call_counter") for _ in range(10)]
    assert values == list(range(1, 11))
