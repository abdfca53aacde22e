import pytest

from rdmasim.clock import TraceLog, VirtualClock, WallClock, ns_to_us, us_to_ns


def test_starts_at_zero_and_advances():
    clock = VirtualClock()
    assert clock.now_ns == 0
    clock.advance_ns(1500)
    assert clock.now_ns == 1500
    assert clock.now_us == 1.5


def test_negative_advance_rejected():
    clock = VirtualClock()
    with pytest.raises(ValueError):
        clock.advance_ns(-1)


def test_us_ns_conversion_is_exact_for_config_values():
    # Every default cost converts to an integer nanosecond count.
    assert us_to_ns(1383.86) == 1_383_860
    assert us_to_ns(1.5) == 1500
    assert ns_to_us(1_383_860) == 1383.86


def test_charges_are_ledgered():
    trace = TraceLog()
    clock = VirtualClock(trace)
    clock.charge("a", 100)
    clock.charge("b", 250)
    clock.charge("a", 100)
    assert clock.now_ns == 450
    assert trace.charged_ns() == 450
    assert trace.charged_ns("a") == 200
    assert len(trace.charges("b")) == 1


def test_parallel_tracks_merge_as_max():
    clock = VirtualClock()
    clock.advance_ns(1000)
    results = clock.parallel(lambda: clock.advance_ns(300), lambda: clock.advance_ns(800))
    assert [r.elapsed_ns for r in results] == [300, 800]
    assert clock.now_ns == 1800


def test_sequential_work_sums():
    clock = VirtualClock()
    clock.advance_ns(300)
    clock.advance_ns(800)
    assert clock.now_ns == 1100


def test_nested_parallel():
    clock = VirtualClock()

    def outer():
        clock.parallel(lambda: clock.advance_ns(50), lambda: clock.advance_ns(70))
        clock.advance_ns(10)

    clock.parallel(outer, lambda: clock.advance_ns(1))
    assert clock.now_ns == 80


def test_isolated_does_not_move_the_timeline():
    trace = TraceLog()
    clock = VirtualClock(trace)
    clock.advance_ns(500)
    result = clock.isolated(lambda: clock.charge("bg", 9999))
    assert result.elapsed_ns == 9999
    assert clock.now_ns == 500
    # but the charge is still visible in the ledger
    assert trace.charged_ns("bg") == 9999


def test_parallel_returns_track_values():
    clock = VirtualClock()
    results = clock.parallel(lambda: "a", lambda: "b")
    assert [r.value for r in results] == ["a", "b"]


def test_wall_clock_smoke():
    clock = WallClock(scale=1e-6)  # sleep a microsecond per simulated second
    t0 = clock.now_ns
    clock.charge("x", 1_000_000)
    assert clock.now_ns >= t0
    results = clock.parallel(lambda: 1, lambda: 2)
    assert sorted(r.value for r in results) == [1, 2]
