"""Scenario configuration files: cost model, QP pool parameters, handler bindings.

One INI file drives a whole run. The cost model lives inline in the
``[costs]``/``[subroutines]`` sections (the same format the cost model uses
on its own) or behind a ``cost_model = path`` reference; ``[orchestrator]``
tunes the pool; ``[handlers]`` binds function ids to built-in handlers.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .costmodel import CostModel
from .orchestrator import BUILTIN_HANDLERS, OrchConfig

_ORCH_INT_KEYS = ("pool_size", "replenish_threshold", "replenish_batch",
                  "max_pool_size", "qp_depth", "mr_bytes", "qps_per_request")
_ORCH_STR_KEYS = ("control_plane",)
_ORCH_BOOL_KEYS = ("auto_exit_children",)


@dataclass
class ScenarioConfig:
    cost_model: CostModel = field(default_factory=CostModel.default)
    orch: OrchConfig = field(default_factory=OrchConfig)
    handlers: dict[str, str] = field(default_factory=dict)  # function id -> builtin name


def load_scenario(path: str) -> ScenarioConfig:
    with open(path) as fh:
        text = fh.read()
    parser = configparser.ConfigParser()
    parser.read_string(text)

    if parser.has_option("scenario", "cost_model"):
        ref = parser.get("scenario", "cost_model")
        if not os.path.isabs(ref):
            ref = os.path.join(os.path.dirname(os.path.abspath(path)), ref)
        cost_model = CostModel.from_file(ref)
    elif parser.has_section("costs") or parser.has_section("subroutines"):
        cost_model = CostModel.from_config_text(text)
    else:
        cost_model = CostModel.default()

    orch = OrchConfig()
    if parser.has_section("orchestrator"):
        section = parser["orchestrator"]
        for key in _ORCH_INT_KEYS:
            if key in section:
                setattr(orch, key, section.getint(key))
        for key in _ORCH_STR_KEYS:
            if key in section:
                value = section.get(key)
                if value not in ("verbs", "flat"):
                    raise ValueError(f"orchestrator.control_plane must be verbs|flat, got {value!r}")
                setattr(orch, key, value)
        for key in _ORCH_BOOL_KEYS:
            if key in section:
                setattr(orch, key, section.getboolean(key))
        if "reprofile_period_us" in section:
            orch.reprofile_period_us = section.getfloat("reprofile_period_us")

    handlers: dict[str, str] = {}
    if parser.has_section("handlers"):
        for function_id, name in parser.items("handlers"):
            if name not in BUILTIN_HANDLERS:
                raise ValueError(f"unknown handler {name!r} for function {function_id!r} "
                                 f"(built-ins: {sorted(BUILTIN_HANDLERS)})")
            handlers[function_id] = name
    return ScenarioConfig(cost_model=cost_model, orch=orch, handlers=handlers)


def bind_handlers(orchestrator, bindings: dict[str, str]) -> None:
    for function_id, name in bindings.items():
        orchestrator.register_handler(function_id, BUILTIN_HANDLERS[name])
