"""Update gating, the per-slot scheduling loop, and the non-learning timescale baselines."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import rules as R
from .domain import UNSET, ClusterConfig, SlotLedger, UpdateAction
from .simenv import Decisions, Environment
from .workload import WorkloadScript

SMT_PERIODS = (1, 10, 50, 100)
LAYERS = (1, 2, 3)


def gate(bit: int, candidate: np.ndarray, previous: Optional[np.ndarray]) -> np.ndarray:
    """Adopt the candidate on update (or when nothing was decided before), else hold."""
    if previous is None or bit == 1:
        return np.array(candidate, copy=True)
    return np.array(previous, copy=True)


def gate_rows(bits: np.ndarray, candidate: np.ndarray, previous: np.ndarray, first: bool) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise gate over edges. Returns (executed, effective bits)."""
    eff = np.ones_like(bits) if first else np.asarray(bits, dtype=int)
    executed = np.where(eff[:, None] == 1, candidate, previous)
    return executed.astype(candidate.dtype), eff


@dataclass
class SlotContext:
    """What a policy may look at while deciding the current slot."""

    env: Environment
    t: int
    tracker: R.DemandTracker
    first: bool
    placement: Optional[np.ndarray] = None  # executed this slot, set after layer 1
    offload_target: Optional[np.ndarray] = None  # set after layer 2
    allocation: Optional[np.ndarray] = None  # set after layer 3
    bits: dict = field(default_factory=dict)

    @property
    def cfg(self) -> ClusterConfig:
        return self.env.cfg


class UpdatePolicy:
    """Decides per-edge update bits layer by layer. Subclasses override ``decide``."""

    name = "policy"
    guarded = False  # True when the policy already refuses unsafe holds itself

    def reset(self, env: Environment) -> None:
        pass

    def decide(self, layer: int, ctx: SlotContext) -> np.ndarray:
        raise NotImplementedError

    def finish_slot(self, ctx: SlotContext, ledger: SlotLedger) -> None:
        pass


class SST(UpdatePolicy):
    name = "sst"

    def decide(self, layer, ctx):
        return np.ones(ctx.cfg.num_edges, dtype=int)


class SMT(UpdatePolicy):
    name = "smt"

    def __init__(self, periods: Sequence[int]):
        if len(periods) != 3 or any(p <= 0 for p in periods):
            raise ValueError("SMT needs three positive periods")
        self.periods = tuple(int(p) for p in periods)

    def decide(self, layer, ctx):
        bit = int(ctx.t % self.periods[layer - 1] == 0)
        return np.full(ctx.cfg.num_edges, bit, dtype=int)


class _Triggered(UpdatePolicy):
    def __init__(self, threshold: float):
        if not threshold > 0:
            raise ValueError("threshold must be positive")
        self.threshold = threshold
        self._bits = None

    def signal(self, ctx: SlotContext) -> np.ndarray:
        raise NotImplementedError

    def decide(self, layer, ctx):
        if layer == 1:
            self._bits = (self.signal(ctx) > self.threshold).astype(int)
        return self._bits


class DT(_Triggered):
    """Update all layers of an edge when its mean waiting delay exceeds the threshold."""

    name = "dt"

    def signal(self, ctx):
        return edge_mean_delay(ctx.env, ctx.t)


class WT(_Triggered):
    """Update all layers of an edge when its waiting workload exceeds the threshold."""

    name = "wt"

    def signal(self, ctx):
        return ctx.env.edge_load()


def baseline_policy(kind: str, params=None) -> UpdatePolicy:
    kind = kind.lower()
    if kind == "sst":
        return SST()
    if kind == "smt":
        return SMT(params or (1, 1, 1))
    if kind == "dt":
        return DT(params if params is not None else 1.0)
    if kind == "wt":
        return WT(params if params is not None else 1.0)
    raise ValueError(f"unknown baseline {kind!r}")


def baseline_action(kind: str, params, t: int, delay: np.ndarray | None = None,
                    load: np.ndarray | None = None, num_edges: int | None = None) -> UpdateAction:
    """Stateless form of the baselines for a single slot."""
    kind = kind.lower()
    if kind == "sst":
        return UpdateAction.constant(num_edges)
    if kind == "smt":
        if any(p <= 0 for p in params):
            raise ValueError("periods must be positive")
        return UpdateAction.constant(num_edges, tuple(int(t % p == 0) for p in params))
    if kind in ("dt", "wt"):
        if not params > 0:
            raise ValueError("threshold must be positive")
        sig = delay if kind == "dt" else load
        b = (np.asarray(sig) > params).astype(int)
        return UpdateAction(b, b.copy(), b.copy())
    raise ValueError(f"unknown baseline {kind!r}")


def edge_mean_delay(env: Environment, t: int) -> np.ndarray:
    """Mean slots waited so far by tasks sitting at each edge (counting the current slot)."""
    st = env.state
    out = np.zeros(env.cfg.num_edges)
    for i in range(env.cfg.num_edges):
        runs = st.pending[i] + st.queues[i]
        if runs:
            out[i] = sum(t - r.task.arrival_slot + 1 for r in runs) / len(runs)
    return out


# ---------------------------------------------------------------- safety discriminator

def unsafe_hold(layer: int, ctx: SlotContext) -> np.ndarray:
    """Per edge: True when keeping the previous decision of ``layer`` is infeasible.

    Layer 2: a held route points at an edge that no longer hosts the service
    after this slot's layer-1 decision. Layer 3: held CPU sits on a service that
    nothing routes to and nothing queues for at this edge.
    """
    env, cfg = ctx.env, ctx.cfg
    n = cfg.num_edges
    if ctx.first:
        return np.ones(n, dtype=bool)
    st = env.state
    out = np.zeros(n, dtype=bool)
    if layer == 2:
        x = ctx.placement if ctx.placement is not None else st.placement
        y = st.offload_target
        for i in range(n):
            for s in range(cfg.num_services):
                j = y[i, s]
                if j == UNSET or (j != cfg.cloud and x[j, s] != 1):
                    out[i] = True
                    break
    elif layer == 3:
        y = ctx.offload_target if ctx.offload_target is not None else st.offload_target
        z = st.allocation
        queued = np.zeros((n, cfg.num_services), dtype=bool)
        for run in itertools.chain(st.transit, *st.queues[:n]):
            if run.location < n:
                queued[run.location, run.service] = True
        for i in range(n):
            routed = (y == i).any(axis=0) | queued[i]
            out[i] = bool(((z[i] > 0) & ~routed).any())
    return out


# ---------------------------------------------------------------- rule inputs

def load_view(env: Environment) -> R.LoadView:
    cfg, st = env.cfg, env.state
    n, ns = cfg.num_edges, cfg.num_services
    load = np.zeros(n)
    count = np.zeros((n, ns), dtype=int)
    for run in itertools.chain(st.transit, *st.queues[:n]):
        if run.location < n:
            load[run.location] += run.remaining
            count[run.location, run.service] += 1
    req_sum = np.zeros(ns)
    req_n = np.zeros(ns)
    for p in st.pending:
        for run in p:
            req_sum[run.service] += run.task.cpu_demand
            req_n[run.service] += 1
    request = np.divide(req_sum, req_n, out=np.ones(ns), where=req_n > 0)
    used = st.used_cpu if st.used_cpu is not None else np.zeros(n)
    return R.LoadView(load, count, request, np.maximum(cfg.edge_cpu - used, 0.0))


def allocation_demand(env: Environment, routes: np.ndarray) -> np.ndarray:
    """Workload each edge must serve per service: queued, in transit, and routed pending."""
    cfg, st = env.cfg, env.state
    n = cfg.num_edges
    d = np.zeros((n, cfg.num_services))
    for run in itertools.chain(st.transit, *st.queues[:n]):
        if run.location < n:
            d[run.location, run.service] += run.remaining
    for i in range(n):
        for run in st.pending[i]:
            j = routes[i, run.service]
            if 0 <= j < n:
                d[j, run.service] += run.remaining
    return d


# ---------------------------------------------------------------- episode loop

@dataclass
class EpisodeResult:
    ledgers: list[SlotLedger]
    bits: np.ndarray  # (T, 3, N) effective update bits
    latency: np.ndarray  # (T,) seconds spent deciding per slot

    @property
    def total_profit(self) -> float:
        return float(sum(l.total_profit for l in self.ledgers))

    @property
    def unsafe(self) -> int:
        return int(sum(l.unsafe for l in self.ledgers))


def run_episode(cfg: ClusterConfig, script: WorkloadScript, rule_set: R.RuleSet, policy: UpdatePolicy,
                params: R.RuleParams = R.RuleParams(), safety: bool = True,
                env: Optional[Environment] = None, on_slot: Optional[Callable] = None) -> EpisodeResult:
    """Drive one pass over ``script``: layer-1 then layer-2 then layer-3 gating, then the env step.

    With ``safety`` an infeasible hold is always turned into an update (policies
    that mask it themselves are unaffected) and the environment runs strict.
    Without it infeasible holds execute and show up as ``unsafe`` tasks.
    """
    env = env or Environment(cfg, strict=safety)
    env.reset()
    policy.reset(env)
    tracker = R.DemandTracker(cfg.num_edges, cfg.num_services, params.window)
    ledgers, bits, latency = [], [], []
    slots = script.by_slot()
    for t in range(script.horizon):
        arrivals = slots[t]
        env.admit(arrivals)
        tracker.push(arrivals)
        ctx = SlotContext(env, t, tracker, first=not env.started)
        st = env.state
        spent = 0.0

        tic = time.perf_counter()
        a1 = policy.decide(1, ctx)
        spent += time.perf_counter() - tic
        if ctx.first or a1.any():
            cand = R.place(rule_set.placement, cfg, st.placement, tracker.total, params)
        else:
            cand = st.placement
        x, e1 = gate_rows(a1, cand, st.placement, ctx.first)
        ctx.placement = x

        tic = time.perf_counter()
        a2 = policy.decide(2, ctx)
        spent += time.perf_counter() - tic
        if safety and not policy.guarded:
            a2 = a2 | unsafe_hold(2, ctx)
        if ctx.first or a2.any():
            cand = R.offload(rule_set.offload, cfg, x, load_view(env), params)
        else:
            cand = st.offload_target
        y, e2 = gate_rows(a2, cand, st.offload_target, ctx.first)
        ctx.offload_target = y

        tic = time.perf_counter()
        a3 = policy.decide(3, ctx)
        spent += time.perf_counter() - tic
        if safety and not policy.guarded:
            a3 = a3 | unsafe_hold(3, ctx)
        if ctx.first or a3.any():
            cand = R.allocate(rule_set.allocation, cfg, allocation_demand(env, y))
        else:
            cand = st.allocation
        z, e3 = gate_rows(a3, cand, st.allocation, ctx.first)
        ctx.allocation = z

        action = UpdateAction(e1, e2, e3)
        ctx.bits = {1: e1, 2: e2, 3: e3}
        ledger = env.step(Decisions(x, y, z), action)
        policy.finish_slot(ctx, ledger)
        if on_slot is not None:
            on_slot(ctx, ledger)
        ledgers.append(ledger)
        bits.append(action.as_array())
        latency.append(spent)
    return EpisodeResult(ledgers, np.array(bits).reshape(len(bits), 3, cfg.num_edges), np.array(latency))


def evaluate_profit(cfg, script, rule_set, policy, params=R.RuleParams()) -> float:
    return run_episode(cfg, script, rule_set, policy, params).total_profit


def smt_grid_search(cfg, script, rule_set, periods: Iterable[int] = SMT_PERIODS,
                    params=R.RuleParams()) -> tuple[tuple[int, int, int], float]:
    """Exhaustive search over period triples; ties keep the lexicographically lowest."""
    periods = sorted(set(int(p) for p in periods))
    best, best_profit = None, -math.inf
    for triple in itertools.product(periods, repeat=3):
        profit = evaluate_profit(cfg, script, rule_set, SMT(triple), params)
        if profit > best_profit:
            best, best_profit = triple, profit
    return best, best_profit


DT_GRID = (0.5, 1.5, 2.5, 4.0, 6.0, 10.0, 16.0)
WT_GRID = (0.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


def threshold_search(kind: str, cfg, script, rule_set, grid: Iterable[float] | None = None,
                     params=R.RuleParams()) -> tuple[float, float]:
    grid = sorted(grid if grid is not None else (DT_GRID if kind.lower() == "dt" else WT_GRID))
    best, best_profit = None, -math.inf
    for theta in grid:
        profit = evaluate_profit(cfg, script, rule_set, baseline_policy(kind, theta), params)
        if profit > best_profit:
            best, best_profit = theta, profit
    return best, best_profit
