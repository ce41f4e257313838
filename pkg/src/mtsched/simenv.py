"""Discrete-time multi-edge environment and the revenue/cost accounting."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .domain import (
    UNSET,
    ClusterConfig,
    SchedulingState,
    SlotLedger,
    Task,
    TaskRun,
    UpdateAction,
    state_violations,
)


class InfeasibleDecision(RuntimeError):
    """An executed decision the safety layer should have prevented."""


@dataclass
class Decisions:
    placement: np.ndarray
    offload_target: np.ndarray
    allocation: np.ndarray

    def copy(self) -> "Decisions":
        return Decisions(self.placement.copy(), self.offload_target.copy(), self.allocation.copy())


def revenue(cfg: ClusterConfig, i: int, t: int, mu: np.ndarray) -> float:
    """Income of edge ``i``: within-budget CPU-units times the unit price."""
    return float(sum(mu[i, s] * cfg.unit_price(s, t) for s in range(cfg.num_services)))


def placement_cost(cfg: ClusterConfig, i: int, x: np.ndarray, x_prev: np.ndarray) -> float:
    """Download cost of services newly placed on edge ``i`` (removals are free).

    Each new service is fetched from the nearest server that held it in the
    previous slot; the cloud always holds every service.
    """
    total = 0.0
    for s in np.flatnonzero((x[i] == 1) & (x_prev[i] == 0)):
        holders = [j for j in np.flatnonzero(x_prev[:, s] == 1) if j != i]
        d = min([cfg.dist[i, j] for j in holders] + [cfg.dist[i, cfg.cloud]])
        total += cfg.place_cost_per_km * d
    return total


def offloading_cost(cfg: ClusterConfig, i: int, y: np.ndarray, y_prev: np.ndarray) -> float:
    """Handover cost of every route of edge ``i`` that moved from server k to m."""
    total = 0.0
    for s in range(cfg.num_services):
        k, m = y_prev[i, s], y[i, s]
        if k != UNSET and m != UNSET and k != m:
            total += cfg.offload_cost_per_km * cfg.dist[k, m]
    return total


def allocation_cost(cfg: ClusterConfig, i: int, z: np.ndarray, z_prev: np.ndarray) -> float:
    return cfg.realloc_cost_per_unit * float(np.clip(z[i] - z_prev[i], 0.0, None).sum())


def check_decisions(cfg: ClusterConfig, d: Decisions) -> None:
    """Structural checks; route feasibility is enforced at dispatch time."""
    x, y, z = d.placement, d.offload_target, d.allocation
    shape = (cfg.num_edges, cfg.num_services)
    if x.shape != shape or y.shape != shape or z.shape != shape:
        raise InfeasibleDecision(f"decision shapes must be {shape}")
    if ((y < UNSET) | (y > cfg.cloud)).any():
        raise InfeasibleDecision("route references an unknown server")
    ghost = y.copy()
    ghost[ghost != cfg.cloud] = UNSET  # feasibility coupling is checked per dispatched task
    errors = state_violations(cfg, x, ghost, z)
    if errors:
        raise InfeasibleDecision("; ".join(errors))


class Environment:
    """Single-writer simulator of edges, cloud, queues and the profit ledger.

    With ``strict`` a task dispatched to a server lacking its service raises
    ``InfeasibleDecision``; otherwise the task stays at its origin and the slot's
    ``unsafe`` counter records it.
    """

    def __init__(self, cfg: ClusterConfig, strict: bool = True):
        self.cfg = cfg
        self.strict = strict
        self.reset()

    def reset(self) -> SchedulingState:
        self.state = SchedulingState.initial(self.cfg)
        self.arrived_total = 0.0
        self.completed_total = 0.0
        self.violated_total = 0.0
        self._admitted: Optional[int] = None
        self._arrived_now = 0.0
        self._fresh = True  # no decision executed yet
        return self.state

    @property
    def decisions(self) -> Decisions:
        st = self.state
        return Decisions(st.placement, st.offload_target, st.allocation)

    @property
    def started(self) -> bool:
        return not self._fresh

    def admit(self, arrivals: Iterable[Task]) -> None:
        """Enqueue this slot's arrivals at their origin edges (idempotent per slot)."""
        if self._admitted == self.state.slot:
            return
        t = self.state.slot
        amount = 0.0
        for task in arrivals:
            if not 0 <= task.origin_edge < self.cfg.num_edges:
                raise InfeasibleDecision(f"task {task.id} arrives at unknown edge {task.origin_edge}")
            if not 0 <= task.service < self.cfg.num_services:
                raise InfeasibleDecision(f"task {task.id} requests unknown service {task.service}")
            self.state.pending[task.origin_edge].append(TaskRun(task, task.workload, task.origin_edge))
            amount += task.workload
        self.arrived_total += amount
        self._arrived_now = amount
        self._admitted = t

    def step(self, executed: Decisions, actions: Optional[UpdateAction] = None,
             arrivals: Sequence[Task] = ()) -> SlotLedger:
        """Advance one slot under ``executed`` decisions and return its ledger.

        ``actions`` are the effective update bits (the cost gate); when omitted
        every layer counts as updated.
        """
        cfg, st = self.cfg, self.state
        n, ns = cfg.num_edges, cfg.num_services
        t = st.slot
        check_decisions(cfg, executed)
        self.admit(arrivals)
        if actions is None:
            actions = UpdateAction.constant(n)

        st.prev_placement, st.prev_offload, st.prev_allocation = st.placement, st.offload_target, st.allocation
        st.placement = executed.placement.copy()
        st.offload_target = executed.offload_target.copy()
        st.allocation = executed.allocation.astype(float).copy()
        x, y, z = st.placement, st.offload_target, st.allocation

        c1 = np.array([placement_cost(cfg, i, x, st.prev_placement) for i in range(n)])
        c2 = np.array([offloading_cost(cfg, i, y, st.prev_offload) for i in range(n)])
        c3 = np.array([allocation_cost(cfg, i, z, st.prev_allocation) for i in range(n)])

        unsafe = 0
        offloaded_ok = 0.0
        tx_frac, comp_frac = cfg.transmission_budget_fraction, cfg.computation_budget_fraction

        # dispatch from origins
        for i in range(n):
            keep = []
            for run in st.pending[i]:
                dest = y[i, run.service]
                if dest == UNSET:
                    keep.append(run)
                    continue
                if dest != cfg.cloud and x[dest, run.service] != 1:
                    if self.strict:
                        raise InfeasibleDecision(
                            f"slot {t}: task {run.task.id} routed from edge {i} to {dest} lacking service {run.service}")
                    unsafe += 1
                    keep.append(run)
                    continue
                run.dispatched = True
                run.dispatch_slot = t
                run.location = int(dest)
                run.ready_slot = t + int(cfg.transfer_slots[i, dest])
                st.transit.append(run)
            st.pending[i] = keep

        # transit arrivals
        still = []
        landed = []
        for run in st.transit:
            (landed if run.ready_slot <= t else still).append(run)
        landed.sort(key=lambda r: (r.ready_slot, r.task.id))
        for run in landed:
            st.queues[run.location].append(run)
            if not run.violated and run.ready_slot - run.task.arrival_slot <= tx_frac * run.task.delay_budget:
                offloaded_ok += run.task.workload
        st.transit = still

        # execution
        mu = np.zeros((n, ns))
        served = np.zeros(n)
        late = np.zeros(n)
        processed_ok = 0.0
        undelayed = np.zeros(n)
        used = np.zeros(n)
        delays = []
        for j in range(cfg.num_servers):
            queue = st.queues[j]
            if not queue:
                continue
            if j == cfg.cloud:
                pool = None
                cloud_left = cfg.cloud_cpu
            else:
                pool = z[j].copy()
            keep = []
            for run in queue:
                if pool is None:
                    give = min(cloud_left, run.remaining)
                    cloud_left -= give
                else:
                    give = min(pool[run.service], run.remaining)
                    pool[run.service] -= give
                    used[j] += give
                run.remaining -= give
                if run.remaining > 1e-9:
                    keep.append(run)
                    continue
                task = run.task
                credit = task.origin_edge if j == cfg.cloud else j
                delay = run.elapsed(t)
                delays.append((task.service, delay, task.delay_budget))
                if run.violated:
                    late[credit] += task.workload
                    continue
                mu[credit, task.service] += task.workload
                served[credit] += task.workload
                self.completed_total += task.workload
                if t + 1 - run.ready_slot <= comp_frac * task.delay_budget:
                    processed_ok += task.workload
                    undelayed[credit] += task.workload
            st.queues[j] = keep
        st.used_cpu = used

        # budget violations among unfinished tasks
        violated = np.zeros(n)
        queued = 0.0
        for run in st.tasks():
            if run.violated:
                continue
            if run.elapsed(t) >= run.task.delay_budget:
                run.violated = True
                violated[run.task.origin_edge] += run.task.workload
                self.violated_total += run.task.workload
            else:
                queued += run.task.workload

        g = np.array([revenue(cfg, i, t, mu) for i in range(n)])
        coverage, variance, unserved, delay = self._queue_signals(t)
        ledger = SlotLedger(
            slot=t,
            revenue=g,
            c1=c1,
            c2=c2,
            c3=c3,
            actions=actions.as_array(),
            served=served,
            late=late,
            violated=violated,
            arrived=self._arrived_now,
            queued=queued,
            completed_total=self.completed_total,
            violated_total=self.violated_total,
            arrived_total=self.arrived_total,
            coverage=coverage,
            offloaded_ok=offloaded_ok,
            variance=variance,
            processed_ok=processed_ok,
            unserved=unserved,
            delay=delay,
            undelayed=undelayed,
            unsafe=unsafe,
            delays=delays,
        )
        self._arrived_now = 0.0
        self._fresh = False
        st.slot = t + 1
        return ledger

    def _queue_signals(self, t: int):
        """(covered demand, load variance, uncovered demand per edge, delay ratio per edge).

        Uncovered demand and the delay ratio of edge ``i`` are taken over every
        unfinished task that arrived at ``i``, wherever it currently sits
        (pending, in transit, or queued at any server including the cloud).
        Uncovered means no edge hosts the task's service.
        """
        cfg, st = self.cfg, self.state
        n = cfg.num_edges
        placed_any = st.placement.any(axis=0)
        coverage = 0.0
        unserved = np.zeros(n)
        load = np.zeros(n)
        delay_sum = np.zeros(n)
        count = np.zeros(n)
        for i in range(n):
            for run in itertools.chain(st.pending[i], st.queues[i]):
                if placed_any[run.service]:
                    coverage += run.remaining
                load[i] += run.remaining
        for run in st.tasks():
            o = run.task.origin_edge
            delay_sum[o] += run.elapsed(t) / run.task.delay_budget
            count[o] += 1
            if not placed_any[run.service]:
                unserved[o] += run.remaining
        delay = np.divide(delay_sum, count, out=np.zeros(n), where=count > 0)
        return coverage, float(np.var(load)), unserved, delay

    def edge_load(self) -> np.ndarray:
        """Remaining workload waiting at (pending + queued) each edge."""
        st = self.state
        return np.array([sum(r.remaining for r in st.pending[i]) + sum(r.remaining for r in st.queues[i])
                         for i in range(self.cfg.num_edges)])


def layer_signals(ledger: SlotLedger) -> tuple[float, float, float, float]:
    """(d, u, v, l): covered demand, in-budget offloads, load variance, in-budget processing."""
    return ledger.coverage, ledger.offloaded_ok, ledger.variance, ledger.processed_ok


def step(env: Environment, executed: Decisions, arrivals: Sequence[Task] = (),
         actions: Optional[UpdateAction] = None) -> tuple[SchedulingState, SlotLedger]:
    ledger = env.step(executed, actions, arrivals)
    return env.state, ledger
