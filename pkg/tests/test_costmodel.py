"""Default calibration structure and the config-file round trip."""

import pytest

from rdmasim.cache import FunctionRegistry
from rdmasim.costmodel import PER_CORE_CHECK, CostModel
from rdmasim.verbs import API_CHAINS, CONNECTION_CHAIN, SimEnv


def chain_cost_us(cm: CostModel, api: str) -> float:
    return sum(cm.subroutine_us(name) for name in API_CHAINS[api])


def test_defaults_validate():
    cm = CostModel()
    assert cm.core_count == 40
    assert cm.subroutine_us(PER_CORE_CHECK) == 518.0 * 40


def test_uncached_open_device_is_22900us():
    cm = CostModel()
    assert chain_cost_us(cm, "open_device") == pytest.approx(22_900.0)


def test_per_core_check_dominates_open_device():
    cm = CostModel()
    share = cm.subroutine_us(PER_CORE_CHECK) / chain_cost_us(cm, "open_device")
    assert share > 0.90


def test_connection_chain_totals_26500us():
    cm = CostModel()
    total = sum(chain_cost_us(cm, api) * times for api, times in CONNECTION_CHAIN)
    assert total == pytest.approx(26_500.0)


def test_user_kernel_split_matches_critical_path_figure():
    # 23.4ms user-space / 3.1ms kernel-space over the uncached chain.
    env = SimEnv(seed=0)
    host = env.new_host()
    by_space = {"user": 0.0, "kernel": 0.0}
    for api, times in CONNECTION_CHAIN:
        for name in API_CHAINS[api]:
            entry = host.registry.get(name)
            by_space[entry.space] += entry.cost_us * times
    assert by_space["user"] == pytest.approx(23_400.0)
    assert by_space["kernel"] == pytest.approx(3_100.0)


def test_open_device_mostly_user_space():
    env = SimEnv(seed=0)
    host = env.new_host()
    user = sum(host.registry.get(n).cost_us for n in API_CHAINS["open_device"]
               if host.registry.get(n).space == "user")
    assert user / chain_cost_us(env.cost_model, "open_device") > 0.80


def test_negative_costs_rejected():
    with pytest.raises(ValueError):
        CostModel(data_plane_op_cost=-1.0)
    with pytest.raises(ValueError):
        CostModel(core_count=0)
    with pytest.raises(ValueError):
        CostModel(subroutine_costs={"check_pd_caps": -5.0})


def test_config_text_round_trip():
    cm = CostModel(runtime_init=1234.5)
    again = CostModel.from_config_text(cm.to_config_text())
    assert again == cm
    assert again.config_hash() == cm.config_hash()


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "costs.ini"
    cm = CostModel(qp_connect_cost=3.25)
    cm.write_file(str(path))
    assert CostModel.from_file(str(path)) == cm


def test_packaged_default_matches_code_defaults():
    assert CostModel.default() == CostModel()


def test_overrides():
    cm = CostModel().with_overrides(syscall_penalty=0.0)
    assert cm.syscall_penalty == 0.0
    assert cm.data_plane_op_cost == 1.5


def test_unknown_subroutine_lookup_fails():
    with pytest.raises(KeyError):
        CostModel().subroutine_us("nonexistent_subroutine")
