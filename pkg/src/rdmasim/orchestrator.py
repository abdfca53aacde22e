"""Request scheduling, INIT processes and the three QP-management tables.

The scheduler routes each request to a cold, warm or fork start. An INIT
process pipelines runtime initialization against RDMA setup on parallel
clock tracks, owns the QP pool through the QP table and Assignment table
(single-writer, no locks needed), and forks children to serve low-latency
requests. A centralized Orchestrator table maps containers to their INIT
processes and established connections.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from .cache import CacheDispatch
from .clock import us_to_ns
from .errors import (
    InitAbortError,
    QpPoolExhaustedError,
    RdmaSimError,
    TableOwnershipError,
    UnknownContainerError,
)
from .gid import Gid
from .procs import LogicalProcess, ProcessManager
from .verbs import (
    ALL_ACCESS,
    Access,
    Host,
    Opcode,
    QpState,
    QueuePair,
    SimEnv,
    WorkRequest,
)


class LatencyClass(Enum):
    NORMAL = "NORMAL"
    FAST = "FAST"


class StartKind(Enum):
    COLD = "COLD"
    WARM = "WARM"
    FORK = "FORK"


@dataclass(frozen=True)
class RequestSpec:
    user_id: str
    function_id: str
    remote_gid: Gid
    latency_class: LatencyClass = LatencyClass.NORMAL
    payload: Any = None


@dataclass
class TimingBreakdown:
    """Stage latencies in integer nanoseconds; end-to-end is their exact sum."""

    task_launch_ns: int = 0
    visible_control_plane_ns: int = 0
    data_exchange_ns: int = 0

    @property
    def end_to_end_ns(self) -> int:
        return self.task_launch_ns + self.visible_control_plane_ns + self.data_exchange_ns

    @property
    def task_launch_us(self) -> float:
        return self.task_launch_ns / 1000

    @property
    def visible_control_plane_us(self) -> float:
        return self.visible_control_plane_ns / 1000

    @property
    def data_exchange_us(self) -> float:
        return self.data_exchange_ns / 1000

    @property
    def end_to_end_us(self) -> float:
        return self.end_to_end_ns / 1000


@dataclass
class RequestOutcome:
    start_kind: StartKind
    container_id: Optional[str]
    pid: Optional[int]
    timing: TimingBreakdown
    result: Any = None
    error: Optional[BaseException] = None
    fell_back_to_cold: bool = False
    queued: bool = False


@dataclass
class AssignmentEntry:
    pid: Optional[int] = None
    destination: Optional[Gid] = None


class QpTable:
    """Vector of QP references; the index is the QP id. Single writer: the INIT."""

    def __init__(self, owner_pid: int):
        self.owner_pid = owner_pid
        self._qps: list[QueuePair] = []
        self.mutations: list[tuple[int, str]] = []

    def _check(self, writer_pid: int, op: str) -> None:
        if writer_pid != self.owner_pid:
            raise TableOwnershipError(
                f"pid {writer_pid} may not mutate QP table owned by {self.owner_pid}")
        self.mutations.append((writer_pid, op))

    def append(self, qp: QueuePair, writer_pid: int) -> int:
        self._check(writer_pid, "append")
        self._qps.append(qp)
        return len(self._qps) - 1

    def clear(self, writer_pid: int) -> None:
        self._check(writer_pid, "clear")
        self._qps.clear()

    def __getitem__(self, qp_id: int) -> QueuePair:
        return self._qps[qp_id]

    def __len__(self) -> int:
        return len(self._qps)

    def __iter__(self):
        return iter(self._qps)


class AssignmentTable:
    """Per-QP-id assignment records: which child uses it, where it points."""

    def __init__(self, owner_pid: int):
        self.owner_pid = owner_pid
        self.entries: list[AssignmentEntry] = []
        self.mutations: list[tuple[int, str]] = []

    def _check(self, writer_pid: int, op: str) -> None:
        if writer_pid != self.owner_pid:
            raise TableOwnershipError(
                f"pid {writer_pid} may not mutate assignment table owned by {self.owner_pid}")
        self.mutations.append((writer_pid, op))

    def append_entry(self, writer_pid: int, destination: Optional[Gid] = None) -> int:
        self._check(writer_pid, "append")
        self.entries.append(AssignmentEntry(pid=None, destination=destination))
        return len(self.entries) - 1

    def assign(self, qp_id: int, pid: int, writer_pid: int) -> None:
        self._check(writer_pid, "assign")
        self.entries[qp_id].pid = pid

    def set_destination(self, qp_id: int, destination: Gid, writer_pid: int) -> None:
        self._check(writer_pid, "set_destination")
        self.entries[qp_id].destination = destination

    def release_pid(self, pid: int, writer_pid: int) -> list[int]:
        """Unassign every entry held by ``pid``; destinations are retained."""
        self._check(writer_pid, "release")
        released = []
        for qp_id, entry in enumerate(self.entries):
            if entry.pid == pid:
                entry.pid = None
                released.append(qp_id)
        return released

    def clear(self, writer_pid: int) -> None:
        self._check(writer_pid, "clear")
        self.entries.clear()

    def unassigned(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.pid is None]

    def snapshot(self) -> list[tuple[Optional[int], Optional[str]]]:
        return [(e.pid, e.destination.text if e.destination else None) for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class ContainerRecord:
    container_id: str
    user_id: str
    function_id: str
    init_pids: list[int] = field(default_factory=list)
    connections: list[tuple[int, int, str]] = field(default_factory=list)  # (init pid, qp id, gid)


class OrchestratorTable:
    """Centralized container -> (user, function, INITs, connections) map."""

    def __init__(self):
        self.records: dict[str, ContainerRecord] = {}
        self._by_user_fn: dict[tuple[str, str], str] = {}

    def add(self, record: ContainerRecord) -> None:
        key = (record.user_id, record.function_id)
        if key in self._by_user_fn:
            raise RdmaSimError(f"container already registered for {key}")
        self.records[record.container_id] = record
        self._by_user_fn[key] = record.container_id

    def lookup(self, user_id: str, function_id: str) -> Optional[str]:
        return self._by_user_fn.get((user_id, function_id))

    def remove(self, container_id: str) -> None:
        record = self.records.pop(container_id)
        self._by_user_fn.pop((record.user_id, record.function_id), None)

    def record_connection(self, container_id: str, init_pid: int, qp_id: int, gid: Gid) -> None:
        self.records[container_id].connections.append((init_pid, qp_id, gid.text))

    def __contains__(self, container_id: str) -> bool:
        return container_id in self.records


@dataclass
class FunctionContext:
    """What a handler sees: shared PD, its private MR copy, its assigned QPs."""

    pd: Any
    mr: Any
    qps: list[QueuePair]
    remote: dict[str, Any]
    verbs: Any
    process: LogicalProcess

    def register_mr(self, length: int, access: Access = ALL_ACCESS):
        mr = self.verbs.reg_mr(self.pd, length, access)
        self.process.add_mr(mr)
        return mr


def run_handler(handler: Callable[[Any, FunctionContext], Any], event: Any,
                context: FunctionContext) -> tuple[Any, Optional[BaseException]]:
    """Execute a user handler; exceptions are captured, never propagated."""
    try:
        return handler(event, context), None
    except Exception as exc:  # noqa: BLE001 - user code may raise anything
        return None, exc


# -- built-in demo handlers --------------------------------------------------


def noop_handler(event, context):
    return None


def echo_handler(event, context):
    """Two-sided demo: SEND the payload, peer reflects it, return the echo."""
    payload = bytes(event.get("payload", b"ping"))
    verbs = context.verbs
    mr = context.mr
    qp = context.qps[0]
    reply_off = mr.base + mr.length // 2
    mr.write(mr.base, payload)
    verbs.post_recv(qp, WorkRequest(2, Opcode.RECV, mr, offset=reply_off, length=len(payload)))
    verbs.post_send(qp, WorkRequest(1, Opcode.SEND, mr, offset=mr.base, length=len(payload)))
    wcs = verbs.poll_cq(qp.cq, 4)
    recv_ok = any(wc.opcode is Opcode.RECV and wc.status.name == "OK" for wc in wcs)
    if not recv_ok:
        raise RdmaSimError(f"echo reply missing: {[(w.opcode, w.status) for w in wcs]}")
    return mr.read(reply_off, len(payload))


def kv_read_handler(event, context):
    """One-sided demo: RDMA_READ ``length`` bytes at ``offset`` from the peer store."""
    length = int(event.get("length", 64))
    offset = int(event.get("offset", 0))
    verbs = context.verbs
    mr = context.mr
    qp = context.qps[0]
    wr = WorkRequest(1, Opcode.RDMA_READ, mr, offset=mr.base, length=length,
                     remote_rkey=context.remote["rkey"], remote_offset=offset)
    verbs.post_send(qp, wr)
    wcs = verbs.poll_cq(qp.cq, 2)
    if not wcs or wcs[0].status.name != "OK":
        raise RdmaSimError(f"kv read failed: {[(w.opcode, w.status) for w in wcs]}")
    return mr.read(mr.base, length)


BUILTIN_HANDLERS = {"noop": noop_handler, "echo": echo_handler, "kv-read": kv_read_handler}


# -- the remote endpoint ------------------------------------------------------


class PeerServer:
    """The remote machine requests talk to.

    Owns its own host, device, PD and a memory region (optionally preloaded
    as a KV store). ``accept`` creates and connects the server-side QP for a
    client endpoint; all server-side work runs off the measured timeline.
    """

    def __init__(self, env: SimEnv, mode: str = "sink", store: Optional[bytes] = None,
                 mr_bytes: int = 64 * 1024, name: str = "peer"):
        if mode not in ("sink", "echo"):
            raise ValueError(f"unknown peer mode {mode!r}")
        self.env = env
        self.mode = mode
        self.host = env.new_host(name)

        def setup():
            verbs = self.host.verbs
            dispatch = self.host.uncached_dispatch()
            ctx = verbs.open_device("dev0", dispatch)
            pd = verbs.alloc_pd(ctx)
            mr = verbs.reg_mr(pd, mr_bytes, ALL_ACCESS)
            cq = verbs.create_cq(ctx)
            return ctx, pd, mr, cq

        self.ctx, self.pd, self.mr, self.cq = env.clock.isolated(setup).value
        if store:
            self.mr.write(self.mr.base, store[:mr_bytes])
        self._recv_slots = itertools.count(1)

    @property
    def gid(self) -> Gid:
        return self.host.gid

    @property
    def rkey(self) -> int:
        return self.mr.rkey

    def remote_info(self) -> dict[str, Any]:
        return {"gid": self.gid.text, "rkey": self.rkey, "mr_len": self.mr.length}

    def accept(self, client_gid: Gid, client_qpn: int) -> QueuePair:
        """Create and connect the server-side endpoint for one client QP."""

        def work():
            verbs = self.host.verbs
            qp = verbs.create_qp(self.pd, self.cq)
            verbs.modify_qp(qp, QpState.INIT)
            verbs.modify_qp(qp, QpState.RTR, remote_gid=client_gid, remote_qpn=client_qpn)
            verbs.modify_qp(qp, QpState.RTS)
            self._arm(qp, initial=True)
            return qp

        return self.env.clock.isolated(work).value

    def _arm(self, qp: QueuePair, initial: bool = False) -> None:
        verbs = self.host.verbs
        slot_len = 2048
        slots = self.mr.length // (2 * slot_len)

        def post_one():
            slot = next(self._recv_slots) % slots
            wr = WorkRequest(next(self._recv_slots), Opcode.RECV, self.mr,
                             offset=self.mr.base + slot * slot_len, length=slot_len)
            verbs.post_recv(qp, wr)

        def on_delivery(payload: bytes, rwr: WorkRequest) -> None:
            def work():
                post_one()
                verbs.poll_cq(self.cq, 8)
                if self.mode == "echo":
                    scratch = self.mr.base + self.mr.length // 2
                    self.mr.write(scratch, payload)
                    verbs.post_send(qp, WorkRequest(next(self._recv_slots), Opcode.SEND,
                                                    self.mr, offset=scratch,
                                                    length=len(payload)))
            self.env.clock.isolated(work)

        if initial:
            for _ in range(32):
                post_one()
        qp.on_delivery = on_delivery


# -- the INIT process ----------------------------------------------------------


@dataclass
class OrchConfig:
    pool_size: int = 8
    replenish_threshold: int = 4
    replenish_batch: int = 4
    max_pool_size: Optional[int] = None
    qp_depth: int = 128
    mr_bytes: int = 32 * 1024
    qps_per_request: int = 1
    control_plane: str = "verbs"  # "verbs" (user-space chains) | "flat" (kernel pool attach)
    auto_exit_children: bool = True
    reprofile_period_us: Optional[float] = None


class InitProcess:
    """Per-container setup process: owns the QP pool and forks handlers."""

    def __init__(self, orch: "Orchestrator", container: "Container", proc: LogicalProcess):
        self.orch = orch
        self.container = container
        self.proc = proc
        self.pid = proc.pid
        self.host = orch.host
        self.env = orch.env
        self.ctx = None
        self.pd = None
        self.mr = None
        self.cq = None
        self.qp_table = QpTable(self.pid)
        self.assignment = AssignmentTable(self.pid)
        self.elapsed_runtime_ns = 0
        self.elapsed_rdma_ns = 0
        self.listener_started = False

    # -- setup -----------------------------------------------------------------

    def _dispatch(self) -> CacheDispatch:
        reprofile = self.orch.reprofile_hook
        return self.host.cached_dispatch(
            reprofile=reprofile,
            reprofile_period_us=self.orch.config.reprofile_period_us)

    def run_setup(self, remote_gid: Gid) -> None:
        """Pipelined INIT: runtime init and RDMA setup on parallel tracks."""
        clock = self.env.clock
        cm = self.env.cost_model

        def runtime_track():
            clock.charge("runtime_init", us_to_ns(cm.runtime_init), actor=f"init:{self.pid}")

        def rdma_track():
            if self.orch.config.control_plane == "flat":
                self._setup_flat(remote_gid)
                return
            try:
                self._setup_verbs(remote_gid, self._dispatch())
            except RdmaSimError:
                # The dispatch already invalidated the cache map; one fresh
                # uncached attempt, then give up.
                try:
                    self._setup_verbs(remote_gid, self.host.uncached_dispatch())
                except RdmaSimError as exc:
                    raise InitAbortError(f"INIT {self.pid} RDMA setup failed twice") from exc

        results = clock.parallel(runtime_track, rdma_track)
        self.elapsed_runtime_ns = results[0].elapsed_ns
        self.elapsed_rdma_ns = results[1].elapsed_ns
        for qp_id, entry in enumerate(self.assignment.entries):
            if entry.destination is not None:
                self.orch.table.record_connection(self.container.container_id, self.pid,
                                                  qp_id, entry.destination)
        self.listener_started = True
        self.orch.emit(f"init:{self.pid}", "fork_listener_started")
        self.orch.emit(f"init:{self.pid}", "init_done",
                       runtime_ns=self.elapsed_runtime_ns, rdma_ns=self.elapsed_rdma_ns)

    def _setup_verbs(self, remote_gid: Gid, dispatch: CacheDispatch) -> None:
        verbs = self.host.verbs
        cfg = self.orch.config
        if len(self.qp_table):
            # retry after a mid-setup failure: drop the partial pool
            for qp in self.qp_table:
                verbs.reset_qp(qp)
            self.qp_table = QpTable(self.pid)
            self.assignment = AssignmentTable(self.pid)
            self.proc.qps.clear()
            self.proc.mrs.clear()
        self.ctx = verbs.open_device("dev0", dispatch)
        self.pd = verbs.alloc_pd(self.ctx)
        self.mr = verbs.reg_mr(self.pd, cfg.mr_bytes, ALL_ACCESS)
        self.cq = verbs.create_cq(self.ctx, cfg.qp_depth)
        self.proc.ctx = self.ctx
        self.proc.pd = self.pd
        self.proc.add_mr(self.mr)
        for _ in range(cfg.pool_size):
            qp = verbs.create_qp(self.pd, self.cq, cfg.qp_depth)
            self._connect_qp(qp, remote_gid)
            self._adopt_qp(qp, remote_gid)

    def _setup_flat(self, remote_gid: Gid) -> None:
        # Kernel-mediated control plane: the pool lives in kernel space and
        # attaching costs microseconds; resources are not user-space owned,
        # so forks skip the copy-on-fork surcharge.
        verbs = self.host.verbs
        cfg = self.orch.config
        clock = self.env.clock

        def build():
            dispatch = self.host.uncached_dispatch()
            ctx = verbs.open_device("dev0", dispatch)
            pd = verbs.alloc_pd(ctx)
            mr = verbs.reg_mr(pd, cfg.mr_bytes, ALL_ACCESS, kernel_owned=True)
            cq = verbs.create_cq(ctx, cfg.qp_depth)
            qps = []
            for _ in range(cfg.pool_size):
                qp = verbs.create_qp(pd, cq, cfg.qp_depth, kernel_owned=True)
                self._connect_endpoint(qp, remote_gid)
                qps.append(qp)
            return ctx, pd, mr, cq, qps

        self.ctx, self.pd, self.mr, self.cq, qps = clock.isolated(build).value
        clock.charge("qp_connect_kernel", us_to_ns(self.env.cost_model.qp_connect_cost),
                     actor=f"init:{self.pid}")
        self.proc.ctx = self.ctx
        self.proc.pd = self.pd
        self.proc.add_mr(self.mr)
        for qp in qps:
            self._adopt_qp(qp, remote_gid)

    def _adopt_qp(self, qp: QueuePair, destination: Optional[Gid]) -> None:
        qp.owner_view = self.proc
        self.proc.qps.append(qp)
        self.qp_table.append(qp, self.pid)
        self.assignment.append_entry(self.pid, destination=destination)

    def _connect_endpoint(self, qp: QueuePair, destination: Gid) -> None:
        """Full modify chain toward ``destination`` (peer side runs off-timeline)."""
        verbs = self.host.verbs
        peer = self.orch.peer_for(destination)
        server_qp = peer.accept(qp.local_gid, qp.qpn)
        verbs.modify_qp(qp, QpState.INIT)
        verbs.modify_qp(qp, QpState.RTR, remote_gid=destination, remote_qpn=server_qp.qpn)
        verbs.modify_qp(qp, QpState.RTS)

    def _connect_qp(self, qp: QueuePair, destination: Gid) -> None:
        self._connect_endpoint(qp, destination)
        self.orch.emit(f"init:{self.pid}", "qp_connect", qpn=qp.qpn, destination=destination.text)

    # -- the two tables ---------------------------------------------------------

    def unassigned_for(self, destination: Gid) -> int:
        return sum(1 for e in self.assignment.entries
                   if e.pid is None and e.destination == destination)

    def assign_qps(self, destination: Gid, count: int, pid: int) -> list[int]:
        """Pick ``count`` unassigned QP ids for ``pid``, preferring the destination.

        Ascending index scan over unassigned entries; matches on destination
        first, then lowest-index others (connected to the destination on the
        spot). Triggers replenishment after assigning.
        """
        unassigned = self.assignment.unassigned()
        matches = [i for i in unassigned
                   if self.assignment.entries[i].destination == destination][:count]
        fillers = [i for i in unassigned
                   if self.assignment.entries[i].destination != destination]
        chosen = matches + fillers[:count - len(matches)]
        if len(chosen) < count:
            self.replenish()
            unassigned = self.assignment.unassigned()
            extra = [i for i in unassigned if i not in chosen]
            chosen += extra[:count - len(chosen)]
        if len(chosen) < count:
            raise QpPoolExhaustedError(
                f"init {self.pid}: need {count} QPs, {len(chosen)} available after replenish")
        for qp_id in chosen:
            entry = self.assignment.entries[qp_id]
            if entry.destination != destination:
                qp = self.qp_table[qp_id]
                if qp.state is not QpState.RESET:
                    self.host.verbs.reset_qp(qp)
                self._connect_qp(qp, destination)
                self.assignment.set_destination(qp_id, destination, self.pid)
                self.orch.table.record_connection(self.container.container_id, self.pid,
                                                  qp_id, destination)
            self.assignment.assign(qp_id, pid, self.pid)
        self.orch.emit(f"init:{self.pid}", "assign", pid=pid, qp_ids=chosen,
                       destination=destination.text)
        self.replenish()
        return chosen

    def release_qps(self, pid: int) -> None:
        released = self.assignment.release_pid(pid, self.pid)
        for qp_id in released:
            self.qp_table[qp_id].owner_view = self.proc
        if released:
            self.orch.emit(f"init:{self.pid}", "release", pid=pid, qp_ids=released)

    def replenish(self) -> None:
        """Keep the unassigned pool above the threshold; runs off the critical path."""
        cfg = self.orch.config

        def work():
            created = 0
            while len(self.assignment.unassigned()) < cfg.replenish_threshold:
                if cfg.max_pool_size is not None and len(self.qp_table) >= cfg.max_pool_size:
                    break
                for _ in range(cfg.replenish_batch):
                    if cfg.max_pool_size is not None and len(self.qp_table) >= cfg.max_pool_size:
                        break
                    qp = self.host.verbs.create_qp(self.pd, self.cq, cfg.qp_depth,
                                                   kernel_owned=(cfg.control_plane == "flat"))
                    self._adopt_qp(qp, None)
                    created += 1
                if created == 0:
                    break
            return created

        created = self.env.clock.isolated(work).value
        if created:
            self.orch.emit(f"init:{self.pid}", "replenish", created=created)


@dataclass
class Container:
    container_id: str
    user_id: str
    function_id: str
    alive: bool = True
    failed: bool = False
    inits: list[InitProcess] = field(default_factory=list)


# -- the scheduler ---------------------------------------------------------------


class Orchestrator:
    """Single scheduler actor: admission, start-kind choice, container lifecycle."""

    def __init__(self, env: SimEnv, host: Host, config: Optional[OrchConfig] = None,
                 peers: Optional[dict[str, PeerServer]] = None,
                 reprofile_hook: Optional[Callable[[], None]] = None):
        self.env = env
        self.host = host
        self.config = config if config is not None else OrchConfig()
        self.table = OrchestratorTable()
        self.containers: dict[str, Container] = {}
        self.handlers: dict[str, Callable] = dict(BUILTIN_HANDLERS)
        self.peers = peers if peers is not None else {}
        self.pm = ProcessManager(env)
        self.pm.on_exit.append(self._on_process_exit)
        self.reprofile_hook = reprofile_hook
        self.fork_wait_queue: list[RequestSpec] = []
        self.async_outcomes: list[RequestOutcome] = []
        self._next_container = itertools.count(1)

    # -- plumbing -------------------------------------------------------------

    def emit(self, actor: str, event: str, **fields) -> None:
        self.env.trace.emit(self.env.clock.now_ns, actor, event, **fields)

    def register_handler(self, function_id: str, handler: Callable) -> None:
        self.handlers[function_id] = handler

    def register_peer(self, peer: PeerServer) -> None:
        self.peers[peer.gid.text] = peer

    def peer_for(self, gid: Gid) -> PeerServer:
        try:
            return self.peers[gid.text]
        except KeyError:
            raise RdmaSimError(f"no peer server registered at {gid.text}") from None

    def _handler_for(self, spec: RequestSpec) -> Callable:
        try:
            return self.handlers[spec.function_id]
        except KeyError:
            raise RdmaSimError(f"no handler bound for function {spec.function_id!r}") from None

    def _on_process_exit(self, proc: LogicalProcess) -> None:
        for container in self.containers.values():
            for init in container.inits:
                if proc.pid != init.pid:
                    init.release_qps(proc.pid)
        if self.fork_wait_queue:
            spec = self.fork_wait_queue.pop(0)
            self.emit("scheduler", "dequeue_fork", user=spec.user_id, fn=spec.function_id)
            self.async_outcomes.append(self.fork_start(spec))

    # -- admission --------------------------------------------------------------

    def handle_request(self, spec: RequestSpec) -> RequestOutcome:
        self.emit("scheduler", "request", user=spec.user_id, fn=spec.function_id,
                  latency=spec.latency_class.value)
        cid = self.table.lookup(spec.user_id, spec.function_id)
        container = self.containers.get(cid) if cid else None
        if container is None or not container.alive:
            outcome = self.cold_start(spec)
            if spec.latency_class is LatencyClass.FAST:
                outcome.fell_back_to_cold = True
            return outcome
        if spec.latency_class is LatencyClass.NORMAL:
            return self.warm_start(spec)
        return self.fork_start(spec)

    # -- start kinds --------------------------------------------------------------

    def cold_start(self, spec: RequestSpec) -> RequestOutcome:
        stale = self.table.lookup(spec.user_id, spec.function_id)
        if stale is not None:
            holder = self.containers.get(stale)
            if holder is not None and holder.alive:
                raise RdmaSimError(
                    f"live container {stale} already serves ({spec.user_id}, {spec.function_id})")
            self.table.remove(stale)
        cm = self.env.cost_model
        clock = self.env.clock
        cid = f"c{next(self._next_container)}"
        container = Container(cid, spec.user_id, spec.function_id)
        self.containers[cid] = container
        self.table.add(ContainerRecord(cid, spec.user_id, spec.function_id))
        self.emit("scheduler", "cold_start", container=cid, user=spec.user_id)
        clock.charge("container_cold_launch", us_to_ns(cm.container_cold_launch),
                     actor="scheduler")
        try:
            init = self._start_init(container, spec.remote_gid)
        except InitAbortError:
            container.alive = False
            container.failed = True
            self.table.remove(cid)
            self.emit("scheduler", "container_failed", container=cid)
            raise
        timing = TimingBreakdown(
            task_launch_ns=us_to_ns(cm.container_cold_launch) + init.elapsed_runtime_ns,
            visible_control_plane_ns=max(0, init.elapsed_rdma_ns - init.elapsed_runtime_ns))
        return self._invoke_in_init(spec, container, init, StartKind.COLD, timing)

    def warm_start(self, spec: RequestSpec) -> RequestOutcome:
        cid = self.table.lookup(spec.user_id, spec.function_id)
        container = self.containers.get(cid) if cid else None
        if container is None or not container.alive:
            # Raced with a concurrent termination: retry as a cold start.
            self.emit("scheduler", "warm_retry_as_cold", user=spec.user_id)
            return self.cold_start(spec)
        cm = self.env.cost_model
        clock = self.env.clock
        self.emit("scheduler", "warm_start", container=container.container_id)
        clock.charge("container_warm_exec", us_to_ns(cm.container_warm_exec), actor="scheduler")
        init = self._start_init(container, spec.remote_gid)
        timing = TimingBreakdown(
            task_launch_ns=us_to_ns(cm.container_warm_exec) + init.elapsed_runtime_ns,
            visible_control_plane_ns=max(0, init.elapsed_rdma_ns - init.elapsed_runtime_ns))
        return self._invoke_in_init(spec, container, init, StartKind.WARM, timing)

    def fork_start(self, spec: RequestSpec) -> RequestOutcome:
        cid = self.table.lookup(spec.user_id, spec.function_id)
        container = self.containers.get(cid) if cid else None
        if container is None or not container.alive or not container.inits:
            raise RdmaSimError("fork start requires a live container with an INIT process")
        init = self._select_init(container, spec.remote_gid)
        clock = self.env.clock
        cfg = self.config

        if not self._can_assign(init, cfg.qps_per_request):
            self.fork_wait_queue.append(spec)
            self.emit("scheduler", "fork_queued", user=spec.user_id)
            return RequestOutcome(StartKind.FORK, container.container_id, None,
                                  TimingBreakdown(), queued=True)

        t0 = clock.now_ns
        child = self.pm.fork(init.proc)
        self.emit(f"init:{init.pid}", "fork", child=child.pid)
        task_launch = clock.now_ns - t0

        t1 = clock.now_ns
        qp_ids = init.assign_qps(spec.remote_gid, cfg.qps_per_request, child.pid)
        visible_cp = clock.now_ns - t1

        qps = [init.qp_table[i] for i in qp_ids]
        for qp in qps:
            qp.owner_view = child
        timing = TimingBreakdown(task_launch_ns=task_launch,
                                 visible_control_plane_ns=visible_cp)
        outcome = self._run_request(spec, container, child, init, qps, StartKind.FORK, timing,
                                    mr=child.mrs.get(init.mr.rkey, init.mr))
        if cfg.auto_exit_children and child.alive:
            self.pm.exit(child.pid)
        return outcome

    # -- internals -------------------------------------------------------------------

    def _can_assign(self, init: InitProcess, count: int) -> bool:
        free = len(init.assignment.unassigned())
        if free >= count:
            return True
        cfg = self.config
        if cfg.max_pool_size is None:
            return True  # replenishment is unbounded
        headroom = max(0, cfg.max_pool_size - len(init.qp_table))
        return free + headroom >= count

    def _select_init(self, container: Container, destination: Gid) -> InitProcess:
        live = [i for i in container.inits if i.proc.alive]
        if not live:
            raise RdmaSimError(f"container {container.container_id} has no live INIT")
        # Prefer the INIT with the most unassigned QPs already pointed at the
        # destination; ties broken by lowest pid.
        return min(live, key=lambda i: (-i.unassigned_for(destination), i.pid))

    def _start_init(self, container: Container, remote_gid: Gid) -> InitProcess:
        proc = self.pm.spawn_root()
        init = InitProcess(self, container, proc)
        container.inits.append(init)
        self.table.records[container.container_id].init_pids.append(init.pid)
        init.run_setup(remote_gid)
        return init

    def _invoke_in_init(self, spec: RequestSpec, container: Container, init: InitProcess,
                        kind: StartKind, timing: TimingBreakdown) -> RequestOutcome:
        clock = self.env.clock
        t0 = clock.now_ns
        qp_ids = init.assign_qps(spec.remote_gid, self.config.qps_per_request, init.pid)
        timing.visible_control_plane_ns += clock.now_ns - t0
        qps = [init.qp_table[i] for i in qp_ids]
        outcome = self._run_request(spec, container, init.proc, init, qps, kind, timing,
                                    mr=init.mr)
        init.release_qps(init.pid)
        return outcome

    def _run_request(self, spec: RequestSpec, container: Container, proc: LogicalProcess,
                     init: InitProcess, qps: list[QueuePair], kind: StartKind,
                     timing: TimingBreakdown, mr) -> RequestOutcome:
        clock = self.env.clock
        handler = self._handler_for(spec)
        peer = self.peers.get(spec.remote_gid.text)
        context = FunctionContext(pd=init.pd, mr=mr, qps=qps,
                                  remote=peer.remote_info() if peer else {},
                                  verbs=self.host.verbs, process=proc)
        if isinstance(spec.payload, dict):
            event = spec.payload
        elif spec.payload is None:
            event = {}
        else:
            event = {"payload": spec.payload}
        t0 = clock.now_ns
        result, error = run_handler(handler, event, context)
        timing.data_exchange_ns = clock.now_ns - t0
        if error is not None:
            self.emit("scheduler", "handler_error", container=container.container_id,
                      error=repr(error))
        return RequestOutcome(kind, container.container_id, proc.pid, timing,
                              result=result, error=error)

    # -- termination ---------------------------------------------------------------

    def terminate_container(self, container_id: str) -> None:
        container = self.containers.get(container_id)
        if container is None or not container.alive:
            raise UnknownContainerError(f"no live container {container_id!r}")
        self.emit("scheduler", "terminate", container=container_id)
        for init in container.inits:
            for qp in init.qp_table:
                self.host.verbs.reset_qp(qp)
            init.assignment.clear(init.pid)
            init.qp_table.clear(init.pid)
        for init in container.inits:
            self.pm.kill_tree(init.pid)
        container.alive = False
        self.table.remove(container_id)
