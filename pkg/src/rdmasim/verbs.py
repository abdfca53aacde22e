"""Verbs-style RDMA control and data plane over an in-process simulated fabric.

Control-plane APIs execute their internal subroutine chains through a
:class:`~rdmasim.cache.CacheDispatch`, charging the virtual clock for every
non-cache-hit subroutine. The data plane moves real bytes between memory
regions with RC (reliable, connected, in-order, exactly-once) semantics and
full protection checks.
"""

from __future__ import annotations

import random
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum, IntFlag
from typing import Any, Optional

from .cache import CacheDispatch, CacheMap, FunctionRegistry
from .clock import TraceLog, VirtualClock, us_to_ns
from .costmodel import PER_CORE_CHECK, CostModel
from .errors import (
    ClosedContextError,
    IllegalTransitionError,
    InjectedFaultError,
    InvalidLengthError,
    MissingRemoteParamsError,
    QueueDepthError,
    UnknownDeviceError,
)
from .gid import Gid

DEFAULT_QUEUE_DEPTH = 128

# Forward chain of the RC connection state machine. ERROR is reachable from
# any state; everything else must follow this chain step by step.
TRANSITION_TABLE = {"RESET": "INIT", "INIT": "RTR", "RTR": "RTS"}


class QpState(IntEnum):
    RESET = 0
    INIT = 1
    RTR = 2
    RTS = 3
    ERROR = 4


class Opcode(Enum):
    SEND = "SEND"
    RECV = "RECV"
    RDMA_READ = "RDMA_READ"
    RDMA_WRITE = "RDMA_WRITE"


class WcStatus(Enum):
    OK = "OK"
    PROTECTION_ERR = "PROTECTION_ERR"
    CONN_ERR = "CONN_ERR"


class Access(IntFlag):
    LOCAL_WRITE = 1
    REMOTE_READ = 2
    REMOTE_WRITE = 4


ALL_ACCESS = Access.LOCAL_WRITE | Access.REMOTE_READ | Access.REMOTE_WRITE


@dataclass
class WorkRequest:
    wr_id: int
    opcode: Opcode
    mr: "MemoryRegion"
    offset: int = 0
    length: int = 0
    remote_rkey: Optional[int] = None
    remote_offset: int = 0


@dataclass
class WorkCompletion:
    wr_id: int
    status: WcStatus
    byte_count: int
    opcode: Opcode
    qpn: int
    ts_ns: int


class MemoryRegion:
    def __init__(self, mr_id: int, pd: "ProtectionDomain", length: int, access: Access,
                 lkey: int, rkey: int, base: int = 0, kernel_owned: bool = False):
        self.mr_id = mr_id
        self.pd = pd
        self.base = base
        self.length = length
        self.access = access
        self.lkey = lkey
        self.rkey = rkey
        self.buf = bytearray(length)
        self.kernel_owned = kernel_owned

    def contains(self, offset: int, length: int) -> bool:
        return length >= 0 and offset >= self.base and offset + length <= self.base + self.length

    def read(self, offset: int, length: int) -> bytes:
        i = offset - self.base
        return bytes(self.buf[i:i + length])

    def write(self, offset: int, data: bytes) -> None:
        i = offset - self.base
        self.buf[i:i + len(data)] = data

    def clone(self) -> "MemoryRegion":
        """Copy-on-fork duplicate: same keys and geometry, private buffer."""
        dup = MemoryRegion(self.mr_id, self.pd, self.length, self.access,
                           self.lkey, self.rkey, self.base, self.kernel_owned)
        dup.buf = bytearray(self.buf)
        return dup


class CompletionQueue:
    def __init__(self, cq_id: int, depth: int = DEFAULT_QUEUE_DEPTH):
        self.cq_id = cq_id
        self.depth = depth
        self._queue: deque[WorkCompletion] = deque()
        self._lock = threading.Lock()
        self.completed_total = 0

    def push(self, wc: WorkCompletion) -> None:
        with self._lock:
            if len(self._queue) >= self.depth:
                raise QueueDepthError(f"cq {self.cq_id} overflow (depth {self.depth})")
            self._queue.append(wc)
            self.completed_total += 1

    def poll(self, max_entries: int) -> list[WorkCompletion]:
        out = []
        with self._lock:
            while self._queue and len(out) < max_entries:
                out.append(self._queue.popleft())
        return out

    def __len__(self) -> int:
        with self._lock:
            return len(self._queue)


class ProtectionDomain:
    def __init__(self, pd_id: int, ctx: "DeviceContext"):
        self.pd_id = pd_id
        self.ctx = ctx
        self.mrs_by_rkey: dict[int, MemoryRegion] = {}
        self.mrs_by_lkey: dict[int, MemoryRegion] = {}

    def add_mr(self, mr: MemoryRegion) -> None:
        self.mrs_by_rkey[mr.rkey] = mr
        self.mrs_by_lkey[mr.lkey] = mr

    # Default owner view: the PD itself resolves rkeys to its registered MRs.
    def mr_by_rkey(self, rkey: int) -> Optional[MemoryRegion]:
        return self.mrs_by_rkey.get(rkey)


class DeviceContext:
    def __init__(self, device: "Device", dispatch: CacheDispatch, handle: int):
        self.device = device
        self.dispatch = dispatch
        self.handle = handle
        self.open = True

    def close(self) -> None:
        self.open = False


@dataclass
class DeliveryRecord:
    """One fabric delivery, sequence-stamped per QP pair (the RC-order audit log)."""

    seq: int
    src_gid: str
    src_qpn: int
    dst_gid: str
    dst_qpn: int
    opcode: Opcode
    wr_id: int
    nbytes: int
    ts_ns: int


class SimFabric:
    """In-process network: mailboxes keyed by (gid, qp number), lossless and in-order."""

    def __init__(self, record: bool = True):
        self._endpoints: dict[tuple[bytes, int], "QueuePair"] = {}
        self._pair_seq: dict[tuple[tuple[bytes, int], tuple[bytes, int]], int] = {}
        self.log: list[DeliveryRecord] = []
        self.record = record
        self.delivered_total = 0
        self._lock = threading.RLock()

    def register(self, qp: "QueuePair") -> None:
        with self._lock:
            self._endpoints[(qp.local_gid.raw, qp.qpn)] = qp

    def deregister(self, qp: "QueuePair") -> None:
        with self._lock:
            self._endpoints.pop((qp.local_gid.raw, qp.qpn), None)

    def endpoint(self, gid: Gid, qpn: int) -> Optional["QueuePair"]:
        with self._lock:
            return self._endpoints.get((gid.raw, qpn))

    def is_registered(self, qp: "QueuePair") -> bool:
        with self._lock:
            return self._endpoints.get((qp.local_gid.raw, qp.qpn)) is qp

    def registered_qpns(self) -> set[tuple[str, int]]:
        with self._lock:
            return {(Gid(raw).text, qpn) for (raw, qpn) in self._endpoints}

    def next_seq(self, src: "QueuePair", dst: "QueuePair") -> int:
        key = ((src.local_gid.raw, src.qpn), (dst.local_gid.raw, dst.qpn))
        with self._lock:
            seq = self._pair_seq.get(key, 0) + 1
            self._pair_seq[key] = seq
        return seq

    def log_delivery(self, seq: int, src: "QueuePair", dst: "QueuePair",
                     opcode: Opcode, wr_id: int, nbytes: int, ts_ns: int) -> None:
        self.delivered_total += 1
        if self.record:
            self.log.append(DeliveryRecord(seq, src.local_gid.text, src.qpn,
                                           dst.local_gid.text, dst.qpn,
                                           opcode, wr_id, nbytes, ts_ns))


class QueuePair:
    """RC queue pair: send/receive queues, state machine, sequence tracking."""

    transport = "RC"

    def __init__(self, qpn: int, pd: ProtectionDomain, cq: CompletionQueue,
                 local_gid: Gid, depth: int = DEFAULT_QUEUE_DEPTH, kernel_owned: bool = False):
        self.qpn = qpn
        self.pd = pd
        self.cq = cq
        self.depth = depth
        self.state = QpState.RESET
        self.local_gid = local_gid
        self.remote_gid: Optional[Gid] = None
        self.remote_qpn: Optional[int] = None
        self.kernel_owned = kernel_owned
        self.send_outstanding = 0
        self.recv_queue: deque[WorkRequest] = deque()
        # SENDs that arrived before a RECV was posted (RC deferral).
        self.inbound_pending: deque[tuple[bytes, "QueuePair", int, int]] = deque()
        self.send_psn = 0
        self.expect_psn = 0
        # Resolves inbound rkeys to the memory of whichever process owns this
        # QP right now (None falls back to the PD's registrations).
        self.owner_view: Optional[Any] = None
        self.on_delivery = None
        self.lock = threading.RLock()

    @property
    def connected(self) -> bool:
        return self.remote_gid is not None

    def view(self):
        return self.owner_view if self.owner_view is not None else self.pd


class Device:
    def __init__(self, device_id: str, gid: Gid, host: "Host"):
        self.device_id = device_id
        self.gid = gid
        self.host = host
        self._next = {"handle": 0, "struct": 0, "pd": 0, "mr": 0, "cq": 0, "qpn": 0}

    def next_id(self, kind: str) -> int:
        self._next[kind] += 1
        return self._next[kind]


class Host:
    """One simulated machine: devices, the function registry and the per-host cache map."""

    def __init__(self, env: "SimEnv", name: str, index: int, device_count: int = 1):
        self.env = env
        self.name = name
        self.index = index
        self.rng = random.Random((env.seed << 8) ^ (index * 0x9E3779B1 & 0xFFFFFFFF))
        self.devices: dict[str, Device] = {}
        for d in range(device_count):
            dev_id = f"dev{d}"
            self.devices[dev_id] = Device(dev_id, Gid.for_host(index * 16 + d), self)
        self.kernel_mediated = False
        self.per_core_loop_executions = 0
        self._faults: dict[str, int] = {}
        self.cache = CacheMap()
        self.registry = build_default_registry(self)
        self.verbs = VerbsApi(self)

    @property
    def gid(self) -> Gid:
        return self.devices["dev0"].gid

    def inject_fault(self, subroutine: str, times: int = 1, skip: int = 0) -> None:
        """Arm ``subroutine`` to raise on ``times`` executions after ``skip`` clean ones."""
        self._faults[subroutine] = [skip, times]

    def consume_fault(self, subroutine: str) -> None:
        state = self._faults.get(subroutine)
        if not state:
            return
        if state[0] > 0:
            state[0] -= 1
            return
        if state[1] > 0:
            state[1] -= 1
            raise InjectedFaultError(f"injected fault in {subroutine}")

    def uncached_dispatch(self, **kwargs) -> CacheDispatch:
        return CacheDispatch(self.registry, self.env.clock, cache=None, **kwargs)

    def cached_dispatch(self, **kwargs) -> CacheDispatch:
        return CacheDispatch(self.registry, self.env.clock, cache=self.cache, **kwargs)

    def data_op_ns(self) -> int:
        cm = self.env.cost_model
        ns = us_to_ns(cm.data_plane_op_cost)
        if self.kernel_mediated:
            ns += us_to_ns(cm.syscall_penalty)
        return ns


class SimEnv:
    """The simulated world: one clock, one fabric, any number of hosts."""

    def __init__(self, cost_model: Optional[CostModel] = None, seed: int = 0,
                 trace: bool = True, record_fabric: bool = True, clock=None):
        self.cost_model = cost_model if cost_model is not None else CostModel.default()
        self.seed = seed
        self.trace = TraceLog(enabled=trace)
        self.clock = clock if clock is not None else VirtualClock(self.trace)
        self.fabric = SimFabric(record=record_fabric)
        self.hosts: list[Host] = []

    def new_host(self, name: Optional[str] = None, device_count: int = 1) -> Host:
        index = len(self.hosts)
        host = Host(self, name or f"host{index}", index, device_count)
        self.hosts.append(host)
        return host


# ---------------------------------------------------------------------------
# Default control-plane internals
# ---------------------------------------------------------------------------

DEVICE_CAPS = {"max_send_wr": 16384, "max_recv_wr": 16384, "max_inline_data": 256}

# API -> ordered internal subroutine chain (the per-core check belongs to
# open_device). Used by the APIs themselves and by calibration checks.
API_CHAINS: dict[str, tuple[str, ...]] = {
    "get_device_list": ("enumerate_device_nodes", "build_device_list"),
    "open_device": (PER_CORE_CHECK, "init_device_struct", "create_device_handle"),
    "alloc_pd": ("check_pd_caps", "fetch_pd_quota", "alloc_pd_handle"),
    "reg_mr": ("compute_page_mask", "probe_mr_limits", "fetch_pin_quota",
               "pin_memory_pages", "build_mr_keys"),
    "create_cq": ("query_cq_limits", "query_comp_vectors", "alloc_cq_ring"),
    "create_qp": ("query_qp_caps", "validate_qp_attrs", "fetch_qp_quota", "alloc_qp_handle"),
    "modify_qp": ("load_transition_table", "fetch_port_state", "apply_qp_transition"),
}

# The full verbs chain needed to stand up one RC connection: every API once,
# plus the three-step modify chain.
CONNECTION_CHAIN: tuple[tuple[str, int], ...] = (
    ("get_device_list", 1),
    ("open_device", 1),
    ("alloc_pd", 1),
    ("reg_mr", 1),
    ("create_cq", 1),
    ("create_qp", 1),
    ("modify_qp", 3),
)


def build_default_registry(host: Host) -> FunctionRegistry:
    """Register the stock control-plane internals for one host.

    Idempotence declarations mark the constant-returning probe/fetch
    functions as cache-eligible; every handle-allocating or state-mutating
    subroutine is declared non-idempotent regardless of what a profiler
    might observe.
    """
    cm = host.env.cost_model
    reg = FunctionRegistry()

    def add(name: str, fn, idempotent: bool, space: str) -> None:
        def impl(*args, _name=name, _fn=fn):
            host.consume_fault(_name)
            return _fn(*args)

        reg.register(name, impl, cm.subroutine_us(name), idempotent, space)

    def per_core_platform_check():
        # The infamous decade-old per-core platform probe: walks every core
        # and always concludes 0 on anything modern.
        for _ in range(cm.core_count):
            host.per_core_loop_executions += 1
        return 0

    dev0 = next(iter(host.devices.values())) if host.devices else None

    add("enumerate_device_nodes", lambda: sorted(host.devices), True, "kernel")
    add("build_device_list", lambda ids: list(ids), False, "user")

    add(PER_CORE_CHECK, per_core_platform_check, True, "user")
    add("init_device_struct", lambda dev: dev.next_id("struct"), False, "user")
    add("create_device_handle", lambda dev: dev.next_id("handle"), False, "kernel")

    add("check_pd_caps", lambda: 16384, True, "user")
    add("fetch_pd_quota", lambda: 8192, True, "kernel")
    add("alloc_pd_handle", lambda dev: dev.next_id("pd"), False, "kernel")

    add("compute_page_mask", lambda: 4095, True, "user")
    add("probe_mr_limits", lambda: 2**31, True, "user")
    add("fetch_pin_quota", lambda: 1 << 20, True, "kernel")
    add("pin_memory_pages", lambda length: (length + 4095) // 4096, False, "kernel")
    add("build_mr_keys", lambda: [host.rng.getrandbits(32), host.rng.getrandbits(32)], False, "user")

    add("query_cq_limits", lambda: 65536, True, "user")
    add("query_comp_vectors", lambda: 8, True, "kernel")
    add("alloc_cq_ring", lambda dev: dev.next_id("cq"), False, "kernel")

    add("query_qp_caps", lambda: dict(DEVICE_CAPS), True, "user")
    add("validate_qp_attrs", lambda: 0, True, "user")
    add("fetch_qp_quota", lambda: 4096, True, "kernel")
    add("alloc_qp_handle", lambda dev: dev.next_id("qpn"), False, "kernel")

    add("load_transition_table", lambda: dict(TRANSITION_TABLE), True, "user")
    add("fetch_port_state", lambda: 4, True, "kernel")  # 4 = port active
    add("apply_qp_transition", lambda target: target, False, "kernel")

    return reg


# ---------------------------------------------------------------------------
# The verbs API surface
# ---------------------------------------------------------------------------


class VerbsApi:
    """Control- and data-plane entry points for one host."""

    def __init__(self, host: Host):
        self.host = host
        self.env = host.env

    # -- control plane ------------------------------------------------------

    def get_device_list(self, dispatch: CacheDispatch) -> list[str]:
        ids = dispatch("enumerate_device_nodes")
        return dispatch("build_device_list", ids)

    def open_device(self, device_id: str, dispatch: CacheDispatch) -> DeviceContext:
        device = self.host.devices.get(device_id)
        if device is None:
            raise UnknownDeviceError(f"no such device {device_id!r} on {self.host.name}")
        dispatch(PER_CORE_CHECK)
        dispatch("init_device_struct", device)
        handle = dispatch("create_device_handle", device)
        return DeviceContext(device, dispatch, handle)

    def alloc_pd(self, ctx: DeviceContext) -> ProtectionDomain:
        self._require_open(ctx)
        ctx.dispatch("check_pd_caps")
        ctx.dispatch("fetch_pd_quota")
        pd_id = ctx.dispatch("alloc_pd_handle", ctx.device)
        return ProtectionDomain(pd_id, ctx)

    def reg_mr(self, pd: ProtectionDomain, length: int, access: Access = ALL_ACCESS,
               base: int = 0, kernel_owned: bool = False) -> MemoryRegion:
        self._require_open(pd.ctx)
        if length <= 0:
            raise InvalidLengthError(f"memory region length must be > 0, got {length}")
        dispatch = pd.ctx.dispatch
        dispatch("compute_page_mask")
        dispatch("probe_mr_limits")
        dispatch("fetch_pin_quota")
        dispatch("pin_memory_pages", length)
        lkey, rkey = dispatch("build_mr_keys")
        while rkey in pd.mrs_by_rkey or lkey in pd.mrs_by_lkey:  # collision: redraw, no recharge
            lkey, rkey = self.host.rng.getrandbits(32), self.host.rng.getrandbits(32)
        mr = MemoryRegion(pd.ctx.device.next_id("mr"), pd, length, access, lkey, rkey,
                          base=base, kernel_owned=kernel_owned)
        pd.add_mr(mr)
        return mr

    def create_cq(self, ctx: DeviceContext, depth: int = DEFAULT_QUEUE_DEPTH) -> CompletionQueue:
        self._require_open(ctx)
        ctx.dispatch("query_cq_limits")
        ctx.dispatch("query_comp_vectors")
        cq_id = ctx.dispatch("alloc_cq_ring", ctx.device)
        return CompletionQueue(cq_id, depth)

    def create_qp(self, pd: ProtectionDomain, cq: CompletionQueue,
                  depth: int = DEFAULT_QUEUE_DEPTH, kernel_owned: bool = False) -> QueuePair:
        self._require_open(pd.ctx)
        dispatch = pd.ctx.dispatch
        dispatch("query_qp_caps")
        dispatch("validate_qp_attrs")
        dispatch("fetch_qp_quota")
        qpn = dispatch("alloc_qp_handle", pd.ctx.device)
        return QueuePair(qpn, pd, cq, pd.ctx.device.gid, depth, kernel_owned=kernel_owned)

    def modify_qp(self, qp: QueuePair, target: QpState,
                  remote_gid: Optional[Gid] = None, remote_qpn: Optional[int] = None) -> None:
        dispatch = qp.pd.ctx.dispatch
        table = dispatch("load_transition_table")
        if target is not QpState.ERROR and table.get(qp.state.name) != target.name:
            raise IllegalTransitionError(f"illegal transition {qp.state.name} -> {target.name}")
        if target is QpState.RTR:
            if remote_gid is None or remote_qpn is None:
                raise MissingRemoteParamsError("RTR requires remote gid and remote qp number")
            qp.remote_gid = remote_gid
            qp.remote_qpn = remote_qpn
        dispatch("fetch_port_state")
        dispatch("apply_qp_transition", target.name)
        qp.state = target
        if target is QpState.RTR:
            self.env.fabric.register(qp)
        elif target is QpState.RTS:
            self._handshake(qp)

    def _handshake(self, qp: QueuePair) -> None:
        # RC ready-to-send: both ends note the connection (zero-cost control
        # messages; data-plane sequences are unaffected).
        peer = self.env.fabric.endpoint(qp.remote_gid, qp.remote_qpn) if qp.connected else None
        now = self.env.clock.now_ns
        self.env.trace.emit(now, f"qp:{qp.local_gid.text}/{qp.qpn}", "handshake",
                            peer_found=peer is not None,
                            remote=qp.remote_gid.text if qp.remote_gid else None)
        if peer is not None:
            self.env.trace.emit(now, f"qp:{peer.local_gid.text}/{peer.qpn}", "handshake",
                                peer_found=True, remote=qp.local_gid.text)

    def reset_qp(self, qp: QueuePair) -> None:
        """Tear a QP back to RESET: deregister, flush pending work with CONN_ERR."""
        self.env.fabric.deregister(qp)
        with qp.lock:
            for _, sender, wr_id, _ in qp.inbound_pending:
                self._complete(sender, wr_id, WcStatus.CONN_ERR, 0, Opcode.SEND)
            qp.inbound_pending.clear()
            for rwr in qp.recv_queue:
                self._complete(qp, rwr.wr_id, WcStatus.CONN_ERR, 0, Opcode.RECV)
            qp.recv_queue.clear()
            qp.send_outstanding = 0
            qp.state = QpState.RESET
            qp.remote_gid = None
            qp.remote_qpn = None
            qp.send_psn = 0
            qp.expect_psn = 0

    def _require_open(self, ctx: DeviceContext) -> None:
        if not ctx.open:
            raise ClosedContextError("device context is closed")

    # -- data plane ----------------------------------------------------------

    def _charge_data_op(self, label: str) -> None:
        self.env.clock.charge(label, self.host.data_op_ns(), actor=self.host.name)

    def _complete(self, qp: QueuePair, wr_id: int, status: WcStatus, nbytes: int,
                  opcode: Opcode) -> None:
        qp.cq.push(WorkCompletion(wr_id, status, nbytes, opcode, qp.qpn, self.env.clock.now_ns))
        if qp.send_outstanding > 0 and opcode is not Opcode.RECV:
            qp.send_outstanding -= 1

    def post_recv(self, qp: QueuePair, wr: WorkRequest) -> None:
        self._charge_data_op("post_recv")
        with qp.lock:
            if qp.state not in (QpState.INIT, QpState.RTR, QpState.RTS):
                self._complete(qp, wr.wr_id, WcStatus.CONN_ERR, 0, Opcode.RECV)
                return
            if len(qp.recv_queue) >= qp.depth:
                raise QueueDepthError(f"recv queue full on qp {qp.qpn} (depth {qp.depth})")
            if not wr.mr.contains(wr.offset, wr.length):
                self._complete(qp, wr.wr_id, WcStatus.PROTECTION_ERR, 0, Opcode.RECV)
                return
            qp.recv_queue.append(wr)
            # Late RECV consumes the oldest deferred SEND (RC semantics).
            if qp.inbound_pending:
                payload, sender, send_wr_id, seq = qp.inbound_pending.popleft()
                rwr = qp.recv_queue.popleft()
                self._deliver_send(qp, rwr, payload, sender, send_wr_id, seq)

    def post_send(self, qp: QueuePair, wr: WorkRequest) -> None:
        self._charge_data_op("post_send")
        with qp.lock:
            if qp.state is not QpState.RTS:
                self._complete(qp, wr.wr_id, WcStatus.CONN_ERR, 0, wr.opcode)
                return
            if qp.send_outstanding >= qp.depth:
                raise QueueDepthError(f"send queue full on qp {qp.qpn} (depth {qp.depth})")
            qp.send_outstanding += 1
            if not wr.mr.contains(wr.offset, wr.length):
                self._complete(qp, wr.wr_id, WcStatus.PROTECTION_ERR, 0, wr.opcode)
                return
            peer = self.env.fabric.endpoint(qp.remote_gid, qp.remote_qpn)
            if peer is None or peer.state < QpState.RTR:
                self._complete(qp, wr.wr_id, WcStatus.CONN_ERR, 0, wr.opcode)
                return
            if wr.opcode is Opcode.SEND:
                self._do_send(qp, peer, wr)
            elif wr.opcode is Opcode.RDMA_WRITE:
                self._do_write(qp, peer, wr)
            elif wr.opcode is Opcode.RDMA_READ:
                self._do_read(qp, peer, wr)
            else:
                raise ValueError(f"cannot post opcode {wr.opcode} via post_send")

    def _do_send(self, qp: QueuePair, peer: QueuePair, wr: WorkRequest) -> None:
        payload = wr.mr.read(wr.offset, wr.length)
        with peer.lock:
            # Sequence assigned at post time so deferred and immediate
            # deliveries stay in posting order.
            if peer.recv_queue:
                seq = self.env.fabric.next_seq(qp, peer)
                rwr = peer.recv_queue.popleft()
                self._deliver_send(peer, rwr, payload, qp, wr.wr_id, seq)
            else:
                if len(peer.inbound_pending) >= peer.depth:
                    raise QueueDepthError(
                        f"peer qp {peer.qpn} deferral queue full (depth {peer.depth})")
                seq = self.env.fabric.next_seq(qp, peer)
                peer.inbound_pending.append((payload, qp, wr.wr_id, seq))

    def _deliver_send(self, dst: QueuePair, rwr: WorkRequest, payload: bytes,
                      src: QueuePair, src_wr_id: int, seq: int) -> None:
        if len(payload) > rwr.length or not rwr.mr.contains(rwr.offset, len(payload)):
            self._complete(dst, rwr.wr_id, WcStatus.PROTECTION_ERR, 0, Opcode.RECV)
            self._complete(src, src_wr_id, WcStatus.PROTECTION_ERR, 0, Opcode.SEND)
            return
        rwr.mr.write(rwr.offset, payload)
        dst.expect_psn = seq
        src.send_psn += 1
        self.env.fabric.log_delivery(seq, src, dst, Opcode.SEND, src_wr_id,
                                     len(payload), self.env.clock.now_ns)
        self._complete(src, src_wr_id, WcStatus.OK, len(payload), Opcode.SEND)
        self._complete(dst, rwr.wr_id, WcStatus.OK, len(payload), Opcode.RECV)
        if dst.on_delivery is not None:
            dst.on_delivery(payload, rwr)

    def _resolve_remote_mr(self, peer: QueuePair, rkey: int) -> Optional[MemoryRegion]:
        return peer.view().mr_by_rkey(rkey)

    def _do_write(self, qp: QueuePair, peer: QueuePair, wr: WorkRequest) -> None:
        payload = wr.mr.read(wr.offset, wr.length)
        mr = self._resolve_remote_mr(peer, wr.remote_rkey)
        if mr is None or not (mr.access & Access.REMOTE_WRITE) \
                or not mr.contains(wr.remote_offset, wr.length):
            self._complete(qp, wr.wr_id, WcStatus.PROTECTION_ERR, 0, wr.opcode)
            return
        seq = self.env.fabric.next_seq(qp, peer)
        mr.write(wr.remote_offset, payload)
        qp.send_psn += 1
        self.env.fabric.log_delivery(seq, qp, peer, wr.opcode, wr.wr_id,
                                     wr.length, self.env.clock.now_ns)
        self._complete(qp, wr.wr_id, WcStatus.OK, wr.length, wr.opcode)

    def _do_read(self, qp: QueuePair, peer: QueuePair, wr: WorkRequest) -> None:
        mr = self._resolve_remote_mr(peer, wr.remote_rkey)
        if mr is None or not (mr.access & Access.REMOTE_READ) \
                or not mr.contains(wr.remote_offset, wr.length):
            self._complete(qp, wr.wr_id, WcStatus.PROTECTION_ERR, 0, wr.opcode)
            return
        seq = self.env.fabric.next_seq(qp, peer)
        data = mr.read(wr.remote_offset, wr.length)
        wr.mr.write(wr.offset, data)
        qp.send_psn += 1
        self.env.fabric.log_delivery(seq, qp, peer, wr.opcode, wr.wr_id,
                                     wr.length, self.env.clock.now_ns)
        self._complete(qp, wr.wr_id, WcStatus.OK, wr.length, wr.opcode)

    def poll_cq(self, cq: CompletionQueue, max_entries: int) -> list[WorkCompletion]:
        self._charge_data_op("poll_cq")
        return cq.poll(max_entries)


# ---------------------------------------------------------------------------
# Convenience: one full connection setup, as charged on the critical path
# ---------------------------------------------------------------------------


@dataclass
class ConnectionResources:
    ctx: DeviceContext
    pd: ProtectionDomain
    mr: MemoryRegion
    cq: CompletionQueue
    qp: QueuePair


def run_connection_chain(host: Host, dispatch: CacheDispatch,
                         remote_gid: Optional[Gid] = None, remote_qpn: int = 1,
                         mr_bytes: int = 32 * 1024) -> ConnectionResources:
    """Stand up one RC connection end to end through ``dispatch``.

    Runs the whole verbs chain (device list, open, PD, MR, CQ, QP, the three
    modify steps) so callers can measure the control-plane critical path
    under any cache state.
    """
    verbs = host.verbs
    devices = verbs.get_device_list(dispatch)
    if not devices:
        raise UnknownDeviceError(f"host {host.name} has no devices configured")
    ctx = verbs.open_device(devices[0], dispatch)
    pd = verbs.alloc_pd(ctx)
    mr = verbs.reg_mr(pd, mr_bytes, ALL_ACCESS)
    cq = verbs.create_cq(ctx)
    qp = verbs.create_qp(pd, cq)
    if remote_gid is None:
        remote_gid = Gid.for_host(0xFFFF)
    verbs.modify_qp(qp, QpState.INIT)
    verbs.modify_qp(qp, QpState.RTR, remote_gid=remote_gid, remote_qpn=remote_qpn)
    verbs.modify_qp(qp, QpState.RTS)
    return ConnectionResources(ctx, pd, mr, cq, qp)
