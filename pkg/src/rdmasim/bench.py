"""Benchmark harness: control-plane start scenarios and data-plane sweeps.

Three schemes are compared. ``swift``: profiled cache, user-space data
plane, pipelined INIT with a pre-connected QP pool. ``uncached``: the same
machinery with an empty cache map. ``kernel``: a kernel-mediated pool with
microsecond connection attach but a per-operation syscall penalty on the
data plane. Fork-start measurements for uncached/kernel follow the
standard-API method: fork a plain process, then connect.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .clock import us_to_ns
from .costmodel import CostModel
from .errors import QpPoolExhaustedError, RdmaSimError
from .gid import Gid
from .orchestrator import (
    LatencyClass,
    OrchConfig,
    Orchestrator,
    PeerServer,
    RequestSpec,
    StartKind,
    TimingBreakdown,
)
from .profiler import reprofile_host
from .verbs import (
    ALL_ACCESS,
    Opcode,
    QpState,
    SimEnv,
    WorkRequest,
    run_connection_chain,
)


class Scheme(Enum):
    SWIFT = "swift"
    UNCACHED = "uncached"
    KERNEL_MEDIATED = "kernel"

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        for scheme in cls:
            if scheme.value == name:
                return scheme
        raise ValueError(f"unknown scheme {name!r} (choose from "
                         f"{[s.value for s in cls]})")


class DataOp(Enum):
    READ = "read"
    WRITE = "write"
    SEND_RECV = "send-recv"


class Mode(Enum):
    SYNC = "sync"
    ASYNC = "async"


DEFAULT_BATCH = 16
DEFAULT_REPEATS = 10


@dataclass
class BenchResult:
    kind: str  # "control" | "data"
    scenario_id: str
    scheme: Scheme
    repeats: int
    seed: int
    config_hash: str
    rows: list[dict] = field(default_factory=list)
    baseline_us: Optional[float] = None

    def aggregate(self) -> dict:
        if self.kind == "control":
            return aggregate_control(self.rows)
        return aggregate_data(self.rows)


def aggregate_control(rows: list[dict]) -> dict:
    n = len(rows)
    keys = ("task_launch_us", "visible_control_plane_us", "data_exchange_us", "end_to_end_us")
    return {k: sum(r[k] for r in rows) / n for k in keys}


def aggregate_data(rows: list[dict]) -> dict:
    n = len(rows)
    return {
        "ops": sum(r["ops"] for r in rows),
        "throughput_ops_s": sum(r["throughput_ops_s"] for r in rows) / max(1, len({r["run"] for r in rows})),
        "mean_latency_us": sum(r["mean_latency_us"] for r in rows) / n,
        "p99_latency_us": max(r["p99_latency_us"] for r in rows),
    }


def _run_seed(seed: int, *parts: str) -> int:
    return seed * 1_000_003 + zlib.crc32(":".join(parts).encode())


# ---------------------------------------------------------------------------
# Control plane
# ---------------------------------------------------------------------------


def build_world(cost_model: CostModel, seed: int, scheme: Scheme,
                config: Optional[OrchConfig] = None, peer_mode: str = "sink",
                trace: bool = True) -> tuple[SimEnv, Orchestrator, PeerServer]:
    """A fresh simulated world wired for one scheme."""
    env = SimEnv(cost_model=cost_model, seed=seed, trace=trace, record_fabric=False)
    node = env.new_host("node-a")
    peer = PeerServer(env, mode=peer_mode)
    cfg = config if config is not None else OrchConfig()
    reprofile = None
    if scheme is Scheme.KERNEL_MEDIATED:
        node.kernel_mediated = True
        cfg.control_plane = "flat"
    elif scheme is Scheme.SWIFT:
        reprofile_host(node, seed=seed)
        reprofile = lambda: reprofile_host(node, seed=seed)  # noqa: E731
    # uncached: leave the cache map empty; dispatches fall through everywhere
    orch = Orchestrator(env, node, cfg, peers={peer.gid.text: peer},
                        reprofile_hook=reprofile)
    return env, orch, peer


def baseline_us(start: StartKind, cost_model: CostModel) -> float:
    """End-to-end time of the no-RDMA baseline for a start kind."""
    if start is StartKind.COLD:
        return cost_model.container_cold_launch + cost_model.runtime_init
    if start is StartKind.WARM:
        return cost_model.container_warm_exec + cost_model.runtime_init
    return cost_model.fork_base


def _timing_row(run: int, timing: TimingBreakdown) -> dict:
    return {
        "run": run,
        "task_launch_us": timing.task_launch_us,
        "visible_control_plane_us": timing.visible_control_plane_us,
        "data_exchange_us": timing.data_exchange_us,
        "end_to_end_us": timing.end_to_end_us,
    }


def _measure_start(start: StartKind, scheme: Scheme, cost_model: CostModel,
                   seed: int, config: Optional[OrchConfig]) -> tuple[TimingBreakdown, SimEnv]:
    if start is StartKind.FORK and scheme is not Scheme.SWIFT:
        return _fork_plain_then_connect(scheme, cost_model, seed)
    env, orch, peer = build_world(cost_model, seed, scheme, config)
    spec = RequestSpec("user-a", "noop", peer.gid)
    if start is StartKind.COLD:
        outcome = orch.handle_request(spec)
        expected = StartKind.COLD
    elif start is StartKind.WARM:
        orch.handle_request(spec)  # prime the container
        outcome = orch.handle_request(spec)
        expected = StartKind.WARM
    else:
        orch.handle_request(spec)  # prime container + INIT pool
        fast = RequestSpec("user-a", "noop", peer.gid, LatencyClass.FAST)
        outcome = orch.handle_request(fast)
        expected = StartKind.FORK
    if outcome.start_kind is not expected:
        raise RdmaSimError(
            f"scenario mismatch: expected {expected.value} start, got {outcome.start_kind.value}")
    if outcome.error is not None:
        raise RdmaSimError(f"scenario handler failed: {outcome.error!r}")
    return outcome.timing, env


def _fork_plain_then_connect(scheme: Scheme, cost_model: CostModel,
                             seed: int) -> tuple[TimingBreakdown, SimEnv]:
    """Fork-start measurement for schemes without a pre-connected user-space pool.

    A plain parent (holding no RDMA resources) forks, then the child sets up
    its connection: the full standard-API chain for the uncached scheme, a
    kernel-pool attach for the kernel-mediated scheme.
    """
    env = SimEnv(cost_model=cost_model, seed=seed, record_fabric=False)
    node = env.new_host("node-a")
    from .procs import ProcessManager

    pm = ProcessManager(env)
    parent = pm.spawn_root()
    clock = env.clock
    t0 = clock.now_ns
    pm.fork(parent)
    task_launch = clock.now_ns - t0

    t1 = clock.now_ns
    if scheme is Scheme.UNCACHED:
        run_connection_chain(node, node.uncached_dispatch())
    else:
        clock.charge("qp_connect_kernel", us_to_ns(cost_model.qp_connect_cost))
    visible = clock.now_ns - t1
    return TimingBreakdown(task_launch_ns=task_launch, visible_control_plane_ns=visible), env


def bench_control_plane(start: StartKind, scheme: Scheme, repeats: int = DEFAULT_REPEATS,
                        cost_model: Optional[CostModel] = None, seed: int = 0,
                        config: Optional[OrchConfig] = None,
                        events_path: Optional[str] = None) -> BenchResult:
    """Drive the full request path on virtual time, one fresh world per run.

    ``events_path`` dumps the last run's structured event log as JSONL.
    """
    cm = cost_model if cost_model is not None else CostModel.default()
    result = BenchResult(kind="control", scenario_id=f"control:{start.value.lower()}",
                         scheme=scheme, repeats=repeats, seed=seed,
                         config_hash=cm.config_hash(),
                         baseline_us=baseline_us(start, cm))
    env = None
    for run in range(repeats):
        run_seed = _run_seed(seed, "control", start.value, scheme.value, str(run))
        cfg = OrchConfig(**vars(config)) if config is not None else None
        timing, env = _measure_start(start, scheme, cm, run_seed, cfg)
        result.rows.append(_timing_row(run, timing))
    if events_path and env is not None:
        env.trace.write_jsonl(events_path)
    return result


# ---------------------------------------------------------------------------
# Data plane
# ---------------------------------------------------------------------------


@dataclass
class _ClientEndpoint:
    qp: object
    mr: object
    cq: object


def _data_plane_world(threads: int, scheme: Scheme, cost_model: CostModel, seed: int,
                      pool_size: int, clock=None):
    """Two hosts, ``threads`` connected QP pairs, server MR preloaded."""
    if threads > pool_size:
        raise QpPoolExhaustedError(
            f"{threads} client threads exceed the QP pool of {pool_size}")
    env = SimEnv(cost_model=cost_model, seed=seed, trace=False, record_fabric=False, clock=clock)
    node = env.new_host("node-a")
    if scheme is Scheme.KERNEL_MEDIATED:
        node.kernel_mediated = True
    peer = PeerServer(env, mode="sink", store=bytes(range(256)) * 256)

    def setup():
        verbs = node.verbs
        dispatch = node.uncached_dispatch()
        ctx = verbs.open_device("dev0", dispatch)
        pd = verbs.alloc_pd(ctx)
        endpoints = []
        for _ in range(threads):
            mr = verbs.reg_mr(pd, 32 * 1024, ALL_ACCESS)
            cq = verbs.create_cq(ctx)
            qp = verbs.create_qp(pd, cq)
            server_qp = peer.accept(qp.local_gid, qp.qpn)
            verbs.modify_qp(qp, QpState.INIT)
            verbs.modify_qp(qp, QpState.RTR, remote_gid=peer.gid, remote_qpn=server_qp.qpn)
            verbs.modify_qp(qp, QpState.RTS)
            endpoints.append(_ClientEndpoint(qp, mr, cq))
        return endpoints

    endpoints = env.clock.isolated(setup).value
    return env, node, peer, endpoints


def _p99(sorted_ns: list[int]) -> float:
    n = len(sorted_ns)
    if n == 0:
        return 0.0
    idx = min(n - 1, max(0, (99 * n + 99) // 100 - 1))
    return sorted_ns[idx] / 1000


def bench_data_plane(op: DataOp, mode: Mode, threads: int, duration_s: float,
                     scheme: Scheme, cost_model: Optional[CostModel] = None, seed: int = 0,
                     batch: int = DEFAULT_BATCH, repeats: int = DEFAULT_REPEATS,
                     pool_size: int = 8, wall_clock=None) -> BenchResult:
    """Throughput/latency sweep: one QP per client thread, sync or batched posting."""
    cm = cost_model if cost_model is not None else CostModel.default()
    result = BenchResult(kind="data",
                         scenario_id=f"data:{op.value}:{mode.value}:t{threads}",
                         scheme=scheme, repeats=repeats, seed=seed,
                         config_hash=cm.config_hash())
    duration_ns = round(duration_s * 1e9)
    per_post = batch if mode is Mode.ASYNC else 1

    for run in range(repeats):
        run_seed = _run_seed(seed, "data", op.value, mode.value, str(threads),
                             scheme.value, str(run))
        env, node, peer, endpoints = _data_plane_world(threads, scheme, cm, run_seed,
                                                       pool_size, clock=wall_clock)
        verbs = node.verbs
        clock = env.clock
        op_ns = node.data_op_ns()
        rkey = peer.rkey
        payload_len = 64

        def worker(endpoint: _ClientEndpoint):
            qp, mr, cq = endpoint.qp, endpoint.mr, endpoint.cq
            start_ns = clock.now_ns
            deadline = start_ns + duration_ns
            lat_ns: list[int] = []
            ops = 0
            wr_seq = 0
            post_ts: dict[int, int] = {}
            while clock.now_ns + (per_post + 1) * op_ns <= deadline:
                for _ in range(per_post):
                    wr_seq += 1
                    if op is DataOp.READ:
                        wr = WorkRequest(wr_seq, Opcode.RDMA_READ, mr, offset=0,
                                         length=payload_len, remote_rkey=rkey, remote_offset=0)
                    elif op is DataOp.WRITE:
                        wr = WorkRequest(wr_seq, Opcode.RDMA_WRITE, mr, offset=0,
                                         length=payload_len, remote_rkey=rkey, remote_offset=0)
                    else:
                        wr = WorkRequest(wr_seq, Opcode.SEND, mr, offset=0, length=payload_len)
                    post_ts[wr_seq] = clock.now_ns
                    verbs.post_send(qp, wr)
                for wc in verbs.poll_cq(cq, per_post):
                    if wc.status.name != "OK":
                        raise RdmaSimError(f"data-plane completion error: {wc.status}")
                    lat_ns.append(clock.now_ns - post_ts.pop(wc.wr_id))
                    ops += 1
            lat_ns.sort()
            mean = (sum(lat_ns) / len(lat_ns) / 1000) if lat_ns else 0.0
            return {"ops": ops, "mean_latency_us": mean, "p99_latency_us": _p99(lat_ns),
                    "completed": cq.completed_total}

        tracks = clock.parallel(*[lambda e=e: worker(e) for e in endpoints])
        for t_idx, track in enumerate(tracks):
            stats = track.value
            result.rows.append({
                "run": run,
                "thread": t_idx,
                "ops": stats["ops"],
                "throughput_ops_s": stats["ops"] / duration_s,
                "mean_latency_us": stats["mean_latency_us"],
                "p99_latency_us": stats["p99_latency_us"],
            })
    return result


# ---------------------------------------------------------------------------
# Requirement check
# ---------------------------------------------------------------------------

WARM_OVERHEAD_LIMIT = 0.05
COLD_OVERHEAD_LIMIT = 0.05
FORK_VISIBLE_LIMIT_US = 100.0


@dataclass
class RequirementRow:
    scheme: str
    rule: str
    observed: float
    limit: float
    passed: bool


@dataclass
class RequirementReport:
    rows: list[RequirementRow] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.rows)

    def lines(self) -> list[str]:
        out = []
        for r in self.rows:
            status = "PASS" if r.passed else "FAIL"
            out.append(f"[{status}] {r.scheme:<8} {r.rule}: observed {r.observed:.4g} "
                       f"(limit {r.limit:.4g})")
        return out


def requirement_check(results: list[BenchResult]) -> RequirementReport:
    """Evaluate the start-time rules: warm/cold overhead < 5%, fork visible < 100µs."""
    by_scheme: dict[str, dict[str, BenchResult]] = {}
    for res in results:
        if res.kind != "control":
            continue
        start = res.scenario_id.split(":", 1)[1]
        by_scheme.setdefault(res.scheme.value, {})[start] = res

    report = RequirementReport()
    for scheme, starts in sorted(by_scheme.items()):
        missing = {"cold", "warm", "fork"} - set(starts)
        if missing:
            raise RdmaSimError(f"scheme {scheme}: missing scenario rows for {sorted(missing)}")
        for start, limit in (("warm", WARM_OVERHEAD_LIMIT), ("cold", COLD_OVERHEAD_LIMIT)):
            agg = starts[start].aggregate()
            share = agg["visible_control_plane_us"] / agg["end_to_end_us"]
            report.rows.append(RequirementRow(
                scheme, f"{start} visible control-plane share < {limit:.0%}",
                share, limit, share < limit))
        fork_visible = starts["fork"].aggregate()["visible_control_plane_us"]
        report.rows.append(RequirementRow(
            scheme, f"fork visible control plane < {FORK_VISIBLE_LIMIT_US:.0f}us",
            fork_visible, FORK_VISIBLE_LIMIT_US, fork_visible < FORK_VISIBLE_LIMIT_US))
    return report


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "kind", "scenario", "scheme", "seed", "config_hash", "repeats", "baseline_us",
    "row", "run", "thread", "task_launch_us", "visible_control_plane_us",
    "data_exchange_us", "end_to_end_us", "ops", "throughput_ops_s",
    "mean_latency_us", "p99_latency_us",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def results_to_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for res in results:
        meta = {"kind": res.kind, "scenario": res.scenario_id, "scheme": res.scheme.value,
                "seed": res.seed, "config_hash": res.config_hash, "repeats": res.repeats,
                "baseline_us": _fmt(res.baseline_us)}
        for row in res.rows:
            out = dict.fromkeys(CSV_COLUMNS, "")
            out.update(meta)
            out["row"] = "raw"
            for key, val in row.items():
                out[key] = _fmt(val)
            writer.writerow(out)
        out = dict.fromkeys(CSV_COLUMNS, "")
        out.update(meta)
        out["row"] = "aggregate"
        for key, val in res.aggregate().items():
            out[key] = _fmt(val)
        writer.writerow(out)
    return buf.getvalue()


def results_to_json(results: list[BenchResult]) -> str:
    payload = []
    for res in results:
        payload.append({
            "kind": res.kind,
            "scenario": res.scenario_id,
            "scheme": res.scheme.value,
            "seed": res.seed,
            "config_hash": res.config_hash,
            "repeats": res.repeats,
            "baseline_us": res.baseline_us,
            "rows": res.rows,
            "aggregate": res.aggregate(),
        })
    return json.dumps({"results": payload}, sort_keys=True, indent=1)


def export(results: list[BenchResult], fmt: str, path: str) -> None:
    if not results:
        raise ValueError("no results to export")
    if fmt == "csv":
        text = results_to_csv(results)
    elif fmt == "json":
        text = results_to_json(results)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    with open(path, "w") as fh:
        fh.write(text)


def _parse_row(raw: dict) -> dict:
    row = {}
    for key in ("run", "thread", "ops"):
        if raw.get(key):
            row[key] = int(float(raw[key]))
    for key in ("task_launch_us", "visible_control_plane_us", "data_exchange_us",
                "end_to_end_us", "throughput_ops_s", "mean_latency_us", "p99_latency_us"):
        if raw.get(key):
            row[key] = float(raw[key])
    return row


def load_results(path: str) -> list[BenchResult]:
    """Re-parse an exported file (csv or json) back into BenchResults."""
    with open(path) as fh:
        text = fh.read()
    results: dict[tuple, BenchResult] = {}
    if path.endswith(".json") or text.lstrip().startswith("{"):
        payload = json.loads(text)
        for item in payload["results"]:
            res = BenchResult(kind=item["kind"], scenario_id=item["scenario"],
                              scheme=Scheme.parse(item["scheme"]), repeats=item["repeats"],
                              seed=item["seed"], config_hash=item["config_hash"],
                              rows=item["rows"], baseline_us=item.get("baseline_us"))
            results[(res.scenario_id, res.scheme.value)] = res
        return list(results.values())
    reader = csv.DictReader(io.StringIO(text))
    for raw in reader:
        key = (raw["scenario"], raw["scheme"])
        if key not in results:
            results[key] = BenchResult(
                kind=raw["kind"], scenario_id=raw["scenario"],
                scheme=Scheme.parse(raw["scheme"]), repeats=int(raw["repeats"]),
                seed=int(raw["seed"]), config_hash=raw["config_hash"],
                baseline_us=float(raw["baseline_us"]) if raw["baseline_us"] else None)
        if raw["row"] == "raw":
            results[key].rows.append(_parse_row(raw))
    return list(results.values())
