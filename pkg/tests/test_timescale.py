import math

import numpy as np
import pytest

import mtsched.timescale as T
from conftest import script_of, small_config, task
from mtsched.domain import grid_distances, ClusterConfig
from mtsched.rules import RuleSet, all_rule_sets
from mtsched.timescale import (
    DT,
    SMT,
    SST,
    WT,
    UpdatePolicy,
    baseline_action,
    baseline_policy,
    gate,
    gate_rows,
    run_episode,
    smt_grid_search,
    threshold_search,
)
from mtsched.workload import bursty_profile, synth_workload

RULES = RuleSet.parse("AM-MRP-EA")


def busy_setup(seed=0, horizon=120):
    cfg = ClusterConfig(num_edges=3, num_services=3, service_mem_footprint=(3.0,) * 3,
                        distance=grid_distances(3, 5.0, 30))
    script = synth_workload(cfg, horizon, bursty_profile(horizon, 3, seed=seed, peak=0.6, base=0.1),
                            seed=seed + 1, cpu_choices=(0.25, 0.5), duration_range=(1, 2))
    return cfg, script


class Hold(UpdatePolicy):
    name = "hold"

    def decide(self, layer, ctx):
        return np.zeros(ctx.cfg.num_edges, dtype=int)


# ---------------------------------------------------------------- gate

def test_gate_examples():
    cand, prev = np.array([1, 0]), np.array([0, 1])
    assert gate(1, cand, prev).tolist() == [1, 0]
    assert gate(0, cand, prev).tolist() == [0, 1]
    assert gate(0, cand, None).tolist() == [1, 0]


def test_gate_rows_forces_update_on_first_slot():
    cand, prev = np.ones((2, 2), int), np.zeros((2, 2), int)
    out, eff = gate_rows(np.array([0, 1]), cand, prev, first=False)
    assert out.tolist() == [[0, 0], [1, 1]] and eff.tolist() == [0, 1]
    out, eff = gate_rows(np.array([0, 0]), cand, prev, first=True)
    assert out.tolist() == [[1, 1], [1, 1]] and eff.tolist() == [1, 1]


# ---------------------------------------------------------------- baselines

def test_sst_always_updates():
    for t in (0, 7, 999):
        assert baseline_action("sst", None, t, num_edges=3).as_array().tolist() == [[1] * 3] * 3


def test_smt_modulo_example():
    assert baseline_action("smt", (50, 10, 1), 20, num_edges=1).as_array()[:, 0].tolist() == [0, 1, 1]
    assert baseline_action("smt", (50, 10, 1), 50, num_edges=1).as_array()[:, 0].tolist() == [1, 1, 1]


def test_threshold_baselines_are_per_edge():
    act = baseline_action("dt", 2.0, 5, delay=np.array([1.0, 3.0]))
    assert act.as_array().tolist() == [[0, 1]] * 3
    act = baseline_action("wt", 4.0, 5, load=np.array([5.0, 0.0]))
    assert act.as_array().tolist() == [[1, 0]] * 3


@pytest.mark.parametrize("kind, bad", [("smt", (0, 1, 1)), ("dt", 0.0), ("wt", -1.0)])
def test_invalid_baseline_parameters(kind, bad):
    with pytest.raises(ValueError):
        baseline_policy(kind, bad)


def test_unreachable_workload_threshold_holds_after_slot_zero():
    cfg, script = busy_setup()
    ep = run_episode(cfg, script, RULES, WT(math.inf))
    assert ep.bits[0].all()
    assert not ep.bits[1:].any()


def test_policy_matches_stateless_form():
    cfg, script = busy_setup(1)
    ep = run_episode(cfg, script, RULES, SMT((50, 10, 1)))
    for t in range(1, script.horizon):
        assert (ep.bits[t] == baseline_action("smt", (50, 10, 1), t, num_edges=3).as_array()).all()


def test_delay_trigger_gives_asynchronous_edges():
    cfg, script = busy_setup(2, horizon=300)
    for policy in (DT(0.5), WT(1.0)):
        per_edge = run_episode(cfg, script, RULES, policy).bits[1:, 0, :]
        assert (per_edge.min(axis=1) != per_edge.max(axis=1)).any()


# ---------------------------------------------------------------- hold path and safety

def test_all_hold_policy_pays_no_update_costs():
    cfg, script = busy_setup(3)
    for safety in (True, False):
        ep = run_episode(cfg, script, RULES, Hold(), safety=safety)
        first = ep.ledgers[0].profit
        assert first.sum() <= ep.ledgers[0].revenue.sum()
        for led in ep.ledgers[1:]:
            gated = led.actions * np.stack([led.c1, led.c2, led.c3])
            assert not gated.any()


def test_held_decisions_stay_constant():
    cfg, script = busy_setup(3)
    env = T.Environment(cfg)
    seen = []
    run_episode(cfg, script, RULES, Hold(), safety=False, env=env,
                on_slot=lambda ctx, led: seen.append(env.decisions.copy()))
    for d in seen[1:]:
        assert (d.placement == seen[0].placement).all()
        assert (d.offload_target == seen[0].offload_target).all()
        assert (d.allocation == seen[0].allocation).all()


@pytest.mark.parametrize("rules", [all_rule_sets()[k] for k in (0, 17, 44)])
def test_guard_keeps_rare_updates_feasible(rules):
    cfg, script = busy_setup(4, horizon=250)
    ep = run_episode(cfg, script, rules, SMT((100, 100, 10)))  # strict env raises on any unsafe dispatch
    assert ep.unsafe == 0


def test_layer_two_forced_when_route_loses_its_service():
    cfg = small_config(n=2, s=1)
    env = T.Environment(cfg)
    env.state.placement = np.array([[0], [1]])
    env.state.offload_target = np.array([[1], [1]])
    env._fresh = False
    ctx = T.SlotContext(env, 5, None, first=False, placement=np.array([[1], [0]]))
    assert T.unsafe_hold(2, ctx).tolist() == [True, True]
    ctx.placement = np.array([[0], [1]])
    assert T.unsafe_hold(2, ctx).tolist() == [False, False]


# ---------------------------------------------------------------- tuning

def test_grid_search_single_element():
    cfg, script = busy_setup(5, horizon=40)
    best, profit = smt_grid_search(cfg, script, RULES, periods=[10])
    assert best == (10, 10, 10)
    assert profit == T.evaluate_profit(cfg, script, RULES, SMT((10, 10, 10)))


def test_grid_search_is_exhaustive_and_breaks_ties_low(monkeypatch):
    calls = []

    def fake(cfg, script, rules, policy, params=None):
        calls.append(policy.periods)
        return -abs(policy.periods[0] - 10) - abs(policy.periods[2] - 50) + 0 * policy.periods[1]

    monkeypatch.setattr(T, "evaluate_profit", fake)
    best, profit = smt_grid_search(None, None, RULES, periods=(100, 1, 10, 50))
    assert len(calls) == 64 and len(set(calls)) == 64
    assert best == (10, 1, 50) and profit == 0  # the middle period is a tie: lowest wins


def test_threshold_search_picks_best(monkeypatch):
    monkeypatch.setattr(T, "evaluate_profit", lambda c, s, r, policy, params=None: -(policy.threshold - 4.0) ** 2)
    assert threshold_search("wt", None, None, RULES) == (4.0, -0.0)


def test_sst_beats_holding_on_a_simple_script():
    cfg = small_config(n=2, s=1)
    script = script_of([task(k, 0, k, 0, 1.0, 3) for k in range(10)], 12)
    assert T.evaluate_profit(cfg, script, RULES, SST()) > 0
