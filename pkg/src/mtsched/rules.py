"""Built-in candidate-decision generators for placement, offloading and allocation.

Offloading scores follow the usual container-orchestrator priorities:

* MRP  most requested: highest destination utilization wins (bin packing)
* LRP  least requested: lowest utilization wins (spreading)
* RLP  resource limits: free CPU relative to the service's per-task request
* SSP  selector spread: fewest same-service tasks already at the destination
* RCRP requested-to-capacity ratio passed through a piecewise-linear shape
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import UNSET, ClusterConfig

PLACEMENT_RULES = ("HPA", "TopK", "AM")
OFFLOAD_RULES = ("MRP", "LRP", "RLP", "SSP", "RCRP")
ALLOCATION_RULES = ("PF", "RR", "EA")


@dataclass(frozen=True)
class RuleParams:
    window: int = 10
    hpa_scale_up: float = 0.8
    hpa_scale_down: float = 0.3
    topk_k: int | None = None
    util_horizon: float = 10.0
    rcrp_shape: tuple[tuple[float, float], ...] = ((0.0, 0.0), (0.7, 10.0), (1.0, 0.0))


@dataclass(frozen=True)
class RuleSet:
    placement: str
    offload: str
    allocation: str

    def __post_init__(self):
        if self.placement not in PLACEMENT_RULES:
            raise ValueError(f"unknown placement rule {self.placement!r}")
        if self.offload not in OFFLOAD_RULES:
            raise ValueError(f"unknown offloading rule {self.offload!r}")
        if self.allocation not in ALLOCATION_RULES:
            raise ValueError(f"unknown allocation rule {self.allocation!r}")

    @classmethod
    def parse(cls, text: str) -> "RuleSet":
        parts = text.split("-")
        if len(parts) != 3:
            raise ValueError(f"rule string must look like AM-MRP-EA, got {text!r}")
        return cls(*parts)

    def __str__(self):
        return f"{self.placement}-{self.offload}-{self.allocation}"


def all_rule_sets() -> list[RuleSet]:
    return [RuleSet(p, o, a) for p in PLACEMENT_RULES for o in OFFLOAD_RULES for a in ALLOCATION_RULES]


class DemandTracker:
    """Trailing window of arrived workload per (edge, service)."""

    def __init__(self, num_edges: int, num_services: int, window: int):
        self.window = window
        self.shape = (num_edges, num_services)
        self._slots: deque[np.ndarray] = deque(maxlen=window)
        self.total = np.zeros(self.shape)

    def push(self, tasks) -> None:
        slot = np.zeros(self.shape)
        for t in tasks:
            slot[t.origin_edge, t.service] += t.workload
        if len(self._slots) == self.window:
            self.total -= self._slots[0]
        self._slots.append(slot)
        self.total += slot
        np.clip(self.total, 0.0, None, out=self.total)


# ---------------------------------------------------------------- placement

def _fits(cfg: ClusterConfig, row: np.ndarray, s: int) -> bool:
    return float(row @ cfg.footprint) + cfg.footprint[s] <= cfg.edge_mem + 1e-9


def place(rule: str, cfg: ClusterConfig, current: np.ndarray, demand: np.ndarray,
          params: RuleParams = RuleParams()) -> np.ndarray:
    """Candidate placement from windowed demand; always memory-feasible."""
    current = np.asarray(current, dtype=int)
    if not demand.any():
        return current.copy()
    if rule == "TopK":
        return _place_topk(cfg, current, demand, params)
    if rule == "AM":
        return _place_am(cfg, current, demand)
    if rule == "HPA":
        return _place_hpa(cfg, current, demand, params)
    raise ValueError(f"unknown placement rule {rule!r}")


def default_topk(cfg: ClusterConfig) -> int:
    return max(1, int(cfg.edge_mem // float(np.mean(cfg.footprint))))


def _place_topk(cfg, current, demand, params):
    k = params.topk_k or default_topk(cfg)
    out = current.copy()
    for i in range(cfg.num_edges):
        if not demand[i].any():
            continue
        row = np.zeros(cfg.num_services, dtype=int)
        # stable rank: higher demand first, lower index on ties
        for s in np.argsort(-demand[i], kind="stable"):
            if row.sum() >= k or demand[i, s] <= 0:
                break
            if _fits(cfg, row, s):
                row[s] = 1
        out[i] = row
    return out


def _place_am(cfg, current, demand):
    out = np.zeros_like(current)
    totals = demand.sum(axis=0)
    active = [s for s in np.argsort(-totals, kind="stable") if totals[s] > 0]
    for s in active:
        for i in np.argsort(-demand[:, s], kind="stable"):
            if demand[i, s] <= 0:
                break
            if _fits(cfg, out[i], s):
                out[i, s] = 1
                break
    for s in range(cfg.num_services):
        if totals[s] > 0:
            continue
        for i in np.flatnonzero(current[:, s]):
            if _fits(cfg, out[i], s):
                out[i, s] = 1
    return out


def _place_hpa(cfg, current, demand, params):
    out = current.copy()
    totals = demand.sum(axis=0)
    per_replica = cfg.edge_cpu * params.window
    for s in np.argsort(-totals, kind="stable"):
        if totals[s] <= 0:
            continue
        holders = np.flatnonzero(out[:, s])
        util = totals[s] / (max(len(holders), 1) * per_replica)
        if len(holders) == 0 or util > params.hpa_scale_up:
            for i in np.argsort(-demand[:, s], kind="stable"):
                if out[i, s] == 0 and _fits(cfg, out[i], s):
                    out[i, s] = 1
                    break
        elif util < params.hpa_scale_down and len(holders) > 1:
            drop = holders[np.argmin(demand[holders, s])]
            out[drop, s] = 0
    return out


# ---------------------------------------------------------------- offloading

@dataclass
class LoadView:
    """Per-destination load snapshot that offloading rules score against."""

    load: np.ndarray  # remaining workload queued at / heading to each edge
    service_count: np.ndarray  # (N, S) same-service task count per edge
    request: np.ndarray  # (S,) typical CPU request per task
    free_cpu: np.ndarray  # (N,)


def shape_score(util: float, shape: Sequence[tuple[float, float]]) -> float:
    xs, ys = zip(*shape)
    return float(np.interp(util, xs, ys))


def offload(rule: str, cfg: ClusterConfig, placement: np.ndarray, view: LoadView,
            params: RuleParams = RuleParams()) -> np.ndarray:
    """Candidate routes: every (edge, service) goes to its best-scoring holder, else the cloud."""
    n, ns = cfg.num_edges, cfg.num_services
    util = np.minimum(1.0, view.load / (cfg.edge_cpu * params.util_horizon))
    out = np.full((n, ns), cfg.cloud, dtype=int)
    for s in range(ns):
        holders = np.flatnonzero(placement[:, s] == 1)
        if len(holders) == 0:
            continue
        if rule == "MRP":
            scores = util[holders]
        elif rule == "LRP":
            scores = -util[holders]
        elif rule == "RLP":
            scores = np.minimum(1.0, view.free_cpu[holders] / max(view.request[s], 1e-9))
        elif rule == "SSP":
            scores = -view.service_count[holders, s].astype(float)
        elif rule == "RCRP":
            scores = np.array([shape_score(u, params.rcrp_shape) for u in util[holders]])
        else:
            raise ValueError(f"unknown offloading rule {rule!r}")
        # argmax returns the first maximum, i.e. the lowest server index
        out[:, s] = holders[int(np.argmax(scores))]
    return out


# ---------------------------------------------------------------- allocation

def waterfill(capacity: float, caps: np.ndarray) -> np.ndarray:
    """max sum(log z) s.t. sum(z) <= capacity, 0 <= z <= caps (caps > 0 entries only)."""
    caps = np.asarray(caps, dtype=float)
    z = np.zeros_like(caps)
    live = caps > 0
    if not live.any():
        return z
    if caps[live].sum() <= capacity:
        z[live] = caps[live]
        return z
    order = np.sort(caps[live])
    left, k = capacity, len(order)
    level = 0.0
    for c in order:
        if c * k <= left:
            left -= c
            k -= 1
        else:
            level = left / k
            break
    z[live] = np.minimum(caps[live], level)
    return z


def allocate(rule: str, cfg: ClusterConfig, demand: np.ndarray) -> np.ndarray:
    """Candidate CPU split per edge over services with positive demand."""
    n, ns = cfg.num_edges, cfg.num_services
    z = np.zeros((n, ns))
    for i in range(n):
        active = np.flatnonzero(demand[i] > 0)
        if len(active) == 0:
            continue
        if rule == "EA":
            z[i, active] = cfg.edge_cpu / len(active)
        elif rule == "RR":
            units = cfg.edge_cpu
            k = 0
            while units > 1e-12:
                give = min(1.0, units)
                z[i, active[k % len(active)]] += give
                units -= give
                k += 1
        elif rule == "PF":
            z[i] = waterfill(cfg.edge_cpu, np.where(demand[i] > 0, demand[i], 0.0))
        else:
            raise ValueError(f"unknown allocation rule {rule!r}")
    return z
