"""Copy-on-fork sharing of RDMA resources between logical processes.

A fork clones the parent's registered memory-region buffers eagerly (the
copy-on-fork semantics modern kernels give RDMA-pinned pages) while device
context and protection domain are shared by reference. The clone step costs
a flat surcharge plus an optional per-KB term, charged only when the parent
actually holds user-space RDMA resources.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .clock import us_to_ns
from .errors import ProcessStateError, UnknownPidError
from .verbs import DeviceContext, MemoryRegion, ProtectionDomain, QpState, QueuePair, SimEnv


@dataclass
class ForkCost:
    """Latency of forking: plain process cost plus the RDMA copy surcharge."""

    base_us: float
    surcharge_us: float
    per_kb_us: float = 0.0

    @classmethod
    def from_cost_model(cls, cm) -> "ForkCost":
        return cls(cm.fork_base, cm.copy_on_fork_surcharge, cm.fork_copy_per_kb)

    def surcharge_ns(self, copied_bytes: int) -> int:
        return us_to_ns(self.surcharge_us) + us_to_ns(self.per_kb_us) * (copied_bytes // 1024)


class LogicalProcess:
    """A simulated process: shared control-plane handles, private MR copies."""

    def __init__(self, pid: int, parent_pid: Optional[int] = None,
                 ctx: Optional[DeviceContext] = None, pd: Optional[ProtectionDomain] = None):
        self.pid = pid
        self.parent_pid = parent_pid
        self.ctx = ctx
        self.pd = pd
        self.mrs: dict[int, MemoryRegion] = {}  # rkey -> private copy
        self.qps: list[QueuePair] = []          # owned/established QPs (INIT pool)
        self.children: set[int] = set()
        self.alive = True

    def add_mr(self, mr: MemoryRegion) -> None:
        self.mrs[mr.rkey] = mr

    def mr_by_rkey(self, rkey: int) -> Optional[MemoryRegion]:
        # Process view used by inbound one-sided access: private copies win,
        # anything else falls back to the PD registrations.
        mr = self.mrs.get(rkey)
        if mr is not None:
            return mr
        return self.pd.mr_by_rkey(rkey) if self.pd is not None else None

    def holds_rdma_resources(self) -> bool:
        if any(not mr.kernel_owned for mr in self.mrs.values()):
            return True
        return any(not qp.kernel_owned and qp.state >= QpState.RTR for qp in self.qps)


class ProcessManager:
    """Allocates pids, applies fork costs, notifies listeners on exit."""

    def __init__(self, env: SimEnv):
        self.env = env
        self.fork_cost = ForkCost.from_cost_model(env.cost_model)
        self.procs: dict[int, LogicalProcess] = {}
        self._next_pid = 0
        self.on_exit: list[Callable[[LogicalProcess], None]] = []

    def spawn_root(self, ctx: Optional[DeviceContext] = None,
                   pd: Optional[ProtectionDomain] = None) -> LogicalProcess:
        """Create a top-level process (an INIT) without fork cost."""
        self._next_pid += 1
        proc = LogicalProcess(self._next_pid, ctx=ctx, pd=pd)
        self.procs[proc.pid] = proc
        return proc

    def get(self, pid: int) -> LogicalProcess:
        try:
            return self.procs[pid]
        except KeyError:
            raise UnknownPidError(f"unknown pid {pid}") from None

    def fork(self, parent: LogicalProcess) -> LogicalProcess:
        if not parent.alive:
            raise ProcessStateError(f"cannot fork dead process {parent.pid}")
        clock = self.env.clock
        clock.charge("fork_base", us_to_ns(self.fork_cost.base_us), actor=f"pid:{parent.pid}")
        self._next_pid += 1
        child = LogicalProcess(self._next_pid, parent_pid=parent.pid,
                               ctx=parent.ctx, pd=parent.pd)
        if parent.holds_rdma_resources():
            copied = 0
            for rkey, mr in parent.mrs.items():
                child.mrs[rkey] = mr.clone()
                copied += mr.length
            clock.charge("copy_on_fork", self.fork_cost.surcharge_ns(copied),
                         actor=f"pid:{parent.pid}")
        parent.children.add(child.pid)
        self.procs[child.pid] = child
        return child

    def exit(self, pid: int) -> None:
        proc = self.get(pid)
        if not proc.alive:
            raise ProcessStateError(f"pid {pid} already exited")
        live_children = [c for c in proc.children if self.procs[c].alive]
        if live_children:
            raise ProcessStateError(
                f"pid {pid} has live children {live_children}; terminate the container instead")
        proc.alive = False
        proc.mrs.clear()
        if proc.parent_pid is not None and proc.parent_pid in self.procs:
            self.procs[proc.parent_pid].children.discard(pid)
        for hook in self.on_exit:
            hook(proc)

    def kill_tree(self, pid: int) -> None:
        """Force-terminate a process and its descendants (container teardown)."""
        proc = self.procs.get(pid)
        if proc is None:
            return
        for child in list(proc.children):
            self.kill_tree(child)
        if proc.alive:
            proc.alive = False
            proc.mrs.clear()
            for hook in self.on_exit:
                hook(proc)
