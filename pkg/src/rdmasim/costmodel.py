"""Configurable microsecond costs for every simulated subroutine and lifecycle event.

The default calibration reproduces the measured control-plane structure this
simulator is built around: an uncached device open of 22,900µs dominated
(90.48%) by a per-core platform check of 40 × 518µs, a full uncached
connection chain of 26,500µs split 23,400µs user-space / 3,100µs
kernel-space, and a cached chain of 2,325µs (11.4x). Lifecycle defaults:
318ms cold container launch, 89ms warm-path baseline, 1,383.86µs plain fork
with a flat 100µs copy-on-fork surcharge.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, replace
from importlib import resources

from .clock import us_to_ns

PER_CORE_CHECK = "per_core_platform_check"

# name -> µs for every registered control-plane subroutine except the
# per-core check, whose total is per_core_check_cost_per_core * core_count.
DEFAULT_SUBROUTINE_COSTS: dict[str, float] = {
    # get_device_list
    "enumerate_device_nodes": 185.0,
    "build_device_list": 15.0,
    # open_device (plus the per-core check)
    "init_device_struct": 115.0,
    "create_device_handle": 2065.0,
    # alloc_pd
    "check_pd_caps": 160.0,
    "fetch_pd_quota": 115.0,
    "alloc_pd_handle": 25.0,
    # reg_mr
    "compute_page_mask": 180.0,
    "probe_mr_limits": 595.0,
    "fetch_pin_quota": 290.0,
    "pin_memory_pages": 20.0,
    "build_mr_keys": 15.0,
    # create_cq
    "query_cq_limits": 130.0,
    "query_comp_vectors": 45.0,
    "alloc_cq_ring": 25.0,
    # create_qp
    "query_qp_caps": 420.0,
    "validate_qp_attrs": 330.0,
    "fetch_qp_quota": 120.0,
    "alloc_qp_handle": 30.0,
    # modify_qp
    "load_transition_table": 240.0,
    "fetch_port_state": 55.0,
    "apply_qp_transition": 5.0,
}


@dataclass(frozen=True)
class CostModel:
    """All tunable latencies, in microseconds."""

    subroutine_costs: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SUBROUTINE_COSTS))
    per_core_check_cost_per_core: float = 518.0
    core_count: int = 40
    data_plane_op_cost: float = 1.5
    syscall_penalty: float = 1.0
    container_cold_launch: float = 318_000.0
    container_warm_exec: float = 88_333.0
    runtime_init: float = 667.0
    fork_base: float = 1_383.86
    copy_on_fork_surcharge: float = 100.0
    fork_copy_per_kb: float = 0.0
    qp_connect_cost: float = 18.7

    def __post_init__(self):
        if self.core_count < 1:
            raise ValueError("core_count must be >= 1")
        scalars = {
            "per_core_check_cost_per_core": self.per_core_check_cost_per_core,
            "data_plane_op_cost": self.data_plane_op_cost,
            "syscall_penalty": self.syscall_penalty,
            "container_cold_launch": self.container_cold_launch,
            "container_warm_exec": self.container_warm_exec,
            "runtime_init": self.runtime_init,
            "fork_base": self.fork_base,
            "copy_on_fork_surcharge": self.copy_on_fork_surcharge,
            "fork_copy_per_kb": self.fork_copy_per_kb,
            "qp_connect_cost": self.qp_connect_cost,
        }
        for name, value in scalars.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        for name, value in self.subroutine_costs.items():
            if value < 0:
                raise ValueError(f"subroutine cost {name} must be >= 0, got {value}")

    # -- lookups -----------------------------------------------------------

    def subroutine_us(self, name: str) -> float:
        if name == PER_CORE_CHECK:
            return self.per_core_check_cost_per_core * self.core_count
        try:
            return self.subroutine_costs[name]
        except KeyError:
            raise KeyError(f"no cost configured for subroutine {name!r}") from None

    def subroutine_ns(self, name: str) -> int:
        if name == PER_CORE_CHECK:
            # Charged per loop iteration; keep the total an exact multiple.
            return us_to_ns(self.per_core_check_cost_per_core) * self.core_count
        return us_to_ns(self.subroutine_us(name))

    def per_core_iteration_ns(self) -> int:
        return us_to_ns(self.per_core_check_cost_per_core)

    def with_overrides(self, **kwargs) -> "CostModel":
        return replace(self, **kwargs)

    # -- config file form ---------------------------------------------------

    _SCALAR_FIELDS = (
        "per_core_check_cost_per_core",
        "core_count",
        "data_plane_op_cost",
        "syscall_penalty",
        "container_cold_launch",
        "container_warm_exec",
        "runtime_init",
        "fork_base",
        "copy_on_fork_surcharge",
        "fork_copy_per_kb",
        "qp_connect_cost",
    )

    def to_config_text(self) -> str:
        parser = configparser.ConfigParser()
        parser["costs"] = {}
        for name in self._SCALAR_FIELDS:
            parser["costs"][name] = repr(getattr(self, name))
        parser["subroutines"] = {}
        for name in sorted(self.subroutine_costs):
            parser["subroutines"][name] = repr(self.subroutine_costs[name])
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_config_text(cls, text: str) -> "CostModel":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        kwargs: dict = {}
        if parser.has_section("costs"):
            for name in cls._SCALAR_FIELDS:
                if parser.has_option("costs", name):
                    raw = parser.get("costs", name)
                    kwargs[name] = int(raw) if name == "core_count" else float(raw)
        if parser.has_section("subroutines"):
            subs = {name: float(value) for name, value in parser.items("subroutines")}
        else:
            subs = dict(DEFAULT_SUBROUTINE_COSTS)
        return cls(subroutine_costs=subs, **kwargs)

    @classmethod
    def from_file(cls, path: str) -> "CostModel":
        with open(path) as fh:
            return cls.from_config_text(fh.read())

    def write_file(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_config_text())

    @classmethod
    def default(cls) -> "CostModel":
        """The shipped default calibration (packaged config file)."""
        text = resources.files("rdmasim.configs").joinpath("default.ini").read_text()
        return cls.from_config_text(text)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_config_text().encode()).hexdigest()[:16]
