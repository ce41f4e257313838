import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsched.domain import (
    UNSET,
    ClusterConfig,
    ConfigError,
    SlotLedger,
    Task,
    UpdateAction,
    delay_budget_for,
    grid_distances,
    load_config,
    state_violations,
    validate_config,
)

from conftest import small_config


def test_default_config_validates():
    cfg = ClusterConfig()
    assert validate_config(cfg) == []
    assert cfg.num_edges == 12 and cfg.cloud == 12
    assert (cfg.edge_cpu, cfg.edge_mem, cfg.cloud_cpu, cfg.cloud_mem) == (4, 8, 8, 16)
    assert cfg.unit_price_base == 25
    assert (cfg.place_cost_per_km, cfg.offload_cost_per_km, cfg.realloc_cost_per_unit) == (0.3, 0.1, 0.5)
    assert cfg.slot_length == 1.0


def test_zero_edge_cpu_reported():
    errors = validate_config(ClusterConfig(edge_cpu=0))
    assert "edge_cpu must be positive" in errors


def test_asymmetric_distance_names_pair():
    d = grid_distances(3)
    d[0][2] = 9.0
    errors = validate_config(ClusterConfig(num_edges=3, distance=d))
    assert any("(0,2)" in e for e in errors)


def test_every_violation_reported_at_once():
    errors = validate_config(ClusterConfig(num_edges=1, edge_cpu=-1, edge_mem=0, distance=[[0, 1], [1, 0]]))
    assert "num_edges must be at least 2" in errors
    assert "edge_cpu must be positive" in errors
    assert "edge_mem must be positive" in errors


def test_nonzero_diagonal_rejected():
    d = grid_distances(2)
    d[1][1] = 1.0
    assert "distance[1][1] must be zero" in validate_config(ClusterConfig(num_edges=2, distance=d))


def test_config_file_round_trip(tmp_path):
    cfg = small_config(edge_cpu=6.0)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"cluster": cfg.to_dict()}))
    assert load_config(p) == cfg


def test_config_file_unknown_key(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"cluster": {"num_edgez": 3}}))
    with pytest.raises(ConfigError, match="num_edgez"):
        load_config(p)


def test_config_file_invalid_values(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"edge_cpu": 0}))
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert "edge_cpu must be positive" in exc.value.errors


def test_transfer_slots():
    cfg = small_config(n=3)  # edges 5 km apart on a line, cloud 10 km
    ts = cfg.transfer_slots
    assert ts[0, 0] == 0 and ts[0, 1] == 1 and ts[0, 2] == 2
    assert ts[0, 3] == 2 + cfg.core_delay_slots


def test_task_invariants():
    with pytest.raises(ValueError):
        Task(0, 0, 0, 1.0, 0.0, 2, 0)
    with pytest.raises(ValueError):
        Task(0, 0, 0, 1.0, 1.0, 0, 0)


@pytest.mark.parametrize("proc,scale,expected", [(4, 2.0, 8), (1, 2.0, 2), (3, 1.5, 5), (0.1, 2.0, 1)])
def test_delay_budget(proc, scale, expected):
    assert delay_budget_for(proc, scale) == expected


def test_update_action_must_be_binary():
    with pytest.raises(ValueError):
        UpdateAction(np.array([0, 2]), np.array([0, 0]), np.array([1, 1]))
    a = UpdateAction.constant(3, (1, 0, 1))
    assert a.as_array().tolist() == [[1, 1, 1], [0, 0, 0], [1, 1, 1]]


def test_ledger_profit_identity():
    led = SlotLedger(0, np.array([50.0, 0.0]), np.array([0.6, 1.0]), np.array([0.3, 0.0]),
                     np.array([1.0, 2.0]), np.array([[1, 0], [0, 1], [1, 1]]),
                     np.zeros(2), np.zeros(2), np.zeros(2))
    assert led.profit.tolist() == [50 - 0.6 - 1.0, -2.0]
    recs = list(led.records())
    assert recs[0]["profit"] == pytest.approx(48.4) and recs[1]["edge"] == 1


def _brute_violations(cfg, x, y, z):
    bad = False
    for i in range(cfg.num_edges):
        mem = sum(cfg.service_mem_footprint[s] for s in range(cfg.num_services) if x[i][s] == 1)
        bad |= mem > cfg.edge_mem
        bad |= sum(z[i]) > cfg.edge_cpu
        for s in range(cfg.num_services):
            j = y[i][s]
            if j not in (UNSET, cfg.cloud) and x[j][s] != 1:
                bad = True
    return bad


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_state_validator_agrees_with_brute_force(data):
    n, s = data.draw(st.integers(2, 4)), data.draw(st.integers(1, 4))
    fp = tuple(data.draw(st.sampled_from([1.0, 2.0, 3.0, 5.0])) for _ in range(s))
    cfg = small_config(n=n, s=s, service_mem_footprint=fp)
    x = np.array(data.draw(st.lists(st.lists(st.integers(0, 1), min_size=s, max_size=s), min_size=n, max_size=n)))
    y = np.array(data.draw(st.lists(st.lists(st.integers(UNSET, n), min_size=s, max_size=s), min_size=n, max_size=n)))
    z = np.array(data.draw(st.lists(st.lists(st.sampled_from([0.0, 0.5, 1.0, 2.0]), min_size=s, max_size=s),
                                     min_size=n, max_size=n)))
    assert bool(state_violations(cfg, x, y, z)) == _brute_violations(cfg, x, y, z)
