"""Desk-scale simulator of a cache-optimized user-space RDMA control plane,
fork-based resource sharing, and a serverless orchestrator with cold, warm
and fork task starts, plus a benchmark harness over a virtual clock."""

from .cache import CacheDispatch, CacheMap, FunctionRegistry, ProfileReport, build_cache
from .clock import TraceLog, VirtualClock, WallClock
from .costmodel import CostModel
from .gid import Gid
from .orchestrator import (
    FunctionContext,
    LatencyClass,
    OrchConfig,
    Orchestrator,
    PeerServer,
    RequestOutcome,
    RequestSpec,
    StartKind,
    TimingBreakdown,
)
from .procs import ForkCost, LogicalProcess, ProcessManager
from .profiler import PROFILE_API_SET, profile, reprofile_host, verify_cache
from .verbs import (
    ALL_ACCESS,
    Access,
    Opcode,
    QpState,
    QueuePair,
    SimEnv,
    WcStatus,
    WorkCompletion,
    WorkRequest,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_ACCESS",
    "Access",
    "CacheDispatch",
    "CacheMap",
    "CostModel",
    "ForkCost",
    "FunctionContext",
    "FunctionRegistry",
    "Gid",
    "LatencyClass",
    "LogicalProcess",
    "Opcode",
    "OrchConfig",
    "Orchestrator",
    "PeerServer",
    "ProcessManager",
    "ProfileReport",
    "PROFILE_API_SET",
    "QpState",
    "QueuePair",
    "RequestOutcome",
    "RequestSpec",
    "SimEnv",
    "StartKind",
    "TimingBreakdown",
    "TraceLog",
    "VirtualClock",
    "WallClock",
    "WcStatus",
    "WorkCompletion",
    "WorkRequest",
    "build_cache",
    "profile",
    "reprofile_host",
    "verify_cache",
]
