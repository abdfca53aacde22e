"""Scenario config files and the event log surface."""

import json

import pytest

from rdmasim.cli import main
from rdmasim.costmodel import CostModel
from rdmasim.orchestrator import OrchConfig, Orchestrator, PeerServer, RequestSpec
from rdmasim.profiler import reprofile_host
from rdmasim.scenario import bind_handlers, load_scenario
from rdmasim.verbs import SimEnv

SCENARIO = """
[orchestrator]
pool_size = 6
replenish_threshold = 2
replenish_batch = 3
qp_depth = 64
mr_bytes = 16384
control_plane = verbs
auto_exit_children = true

[handlers]
fn-echo = echo
fn-store = kv-read
"""


def test_load_scenario_orchestrator_section(tmp_path):
    path = tmp_path / "scenario.ini"
    path.write_text(SCENARIO)
    sc = load_scenario(str(path))
    assert sc.orch.pool_size == 6
    assert sc.orch.replenish_threshold == 2
    assert sc.orch.qp_depth == 64
    assert sc.orch.mr_bytes == 16384
    assert sc.handlers == {"fn-echo": "echo", "fn-store": "kv-read"}
    assert sc.cost_model == CostModel.default()


def test_load_scenario_with_inline_costs(tmp_path):
    cm = CostModel(runtime_init=5.0)
    path = tmp_path / "scenario.ini"
    path.write_text(cm.to_config_text() + SCENARIO)
    sc = load_scenario(str(path))
    assert sc.cost_model.runtime_init == 5.0
    assert sc.orch.pool_size == 6


def test_load_scenario_with_cost_model_reference(tmp_path):
    cm = CostModel(fork_base=777.0)
    cm.write_file(str(tmp_path / "model.ini"))
    path = tmp_path / "scenario.ini"
    path.write_text("[scenario]\ncost_model = model.ini\n" + SCENARIO)
    sc = load_scenario(str(path))
    assert sc.cost_model.fork_base == 777.0


def test_load_scenario_rejects_unknown_handler(tmp_path):
    path = tmp_path / "scenario.ini"
    path.write_text("[handlers]\nfn = no-such-handler\n")
    with pytest.raises(ValueError):
        load_scenario(str(path))


def test_load_scenario_rejects_bad_control_plane(tmp_path):
    path = tmp_path / "scenario.ini"
    path.write_text("[orchestrator]\ncontrol_plane = dct\n")
    with pytest.raises(ValueError):
        load_scenario(str(path))


def test_scenario_drives_an_orchestrator(tmp_path):
    path = tmp_path / "scenario.ini"
    path.write_text(SCENARIO)
    sc = load_scenario(str(path))
    env = SimEnv(cost_model=sc.cost_model, seed=1)
    node = env.new_host("node-a")
    reprofile_host(node, seed=1)
    store = b"0123456789abcdef" * 8
    peer = PeerServer(env, mode="sink", store=store)
    orch = Orchestrator(env, node, sc.orch, peers={peer.gid.text: peer})
    bind_handlers(orch, sc.handlers)
    outcome = orch.handle_request(RequestSpec("u", "fn-store", peer.gid,
                                              payload={"offset": 0, "length": 16}))
    assert outcome.error is None
    assert outcome.result == store[:16]
    init = orch.containers[outcome.container_id].inits[0]
    assert len(init.qp_table) == 6
    assert init.mr.length == 16384


def test_cli_accepts_scenario_config_and_emits_events(tmp_path, capsys):
    path = tmp_path / "scenario.ini"
    path.write_text(SCENARIO)
    events = tmp_path / "events.jsonl"
    code = main(["control-plane", "--start", "warm", "--scheme", "swift",
                 "--repeats", "1", "--config", str(path), "--events", str(events)])
    assert code == 0
    lines = [json.loads(l) for l in events.read_text().splitlines() if l]
    kinds = {l["event"] for l in lines}
    assert {"request", "cold_start", "warm_start", "init_done", "charge"} <= kinds
    for record in lines:
        assert {"ts_us", "actor", "event"} <= set(record)
        assert record["ts_us"] >= 0
