"""Core data model: cluster constants, tasks, scheduling state, per-slot ledger.

Server indices ``0..N-1`` are edge servers and index ``N`` is the cloud.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Any, Optional

import numpy as np

UNSET = -1  # offload_target entry before the first routing decision


class ConfigError(ValueError):
    """Raised when a config cannot be built or fails validation."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def grid_distances(num_edges: int, region_km: float = 5.0, cloud_km: float = 30.0) -> list[list[float]]:
    """Place edges on a near-square grid over a square region and return the
    (N+1)x(N+1) distance matrix, the cloud being ``cloud_km`` from every edge."""
    cols = math.ceil(math.sqrt(num_edges))
    rows = math.ceil(num_edges / cols)
    pos = []
    for k in range(num_edges):
        r, c = divmod(k, cols)
        pos.append(((c + 0.5) * region_km / cols, (r + 0.5) * region_km / rows))
    n = num_edges + 1
    dist = [[0.0] * n for _ in range(n)]
    for i in range(num_edges):
        for j in range(num_edges):
            if i != j:
                dist[i][j] = round(math.dist(pos[i], pos[j]), 6)
        dist[i][num_edges] = dist[num_edges][i] = float(cloud_km)
    return dist


@dataclass(frozen=True)
class ClusterConfig:
    """Environment constants. Immutable once built."""

    num_edges: int = 12
    num_services: int = 12
    edge_cpu: float = 4.0
    edge_mem: float = 8.0
    cloud_cpu: float = 8.0
    cloud_mem: float = 16.0
    service_mem_footprint: tuple[float, ...] = ()
    distance: tuple[tuple[float, ...], ...] = ()
    unit_price_base: float = 25.0
    place_cost_per_km: float = 0.3
    offload_cost_per_km: float = 0.1
    realloc_cost_per_unit: float = 0.5
    slot_length: float = 1.0
    # synthetic link/delay model
    link_km_per_slot: float = 5.0
    core_delay_slots: int = 1
    transmission_budget_fraction: float = 0.25
    computation_budget_fraction: float = 0.75
    budget_scale: float = 2.0

    def __post_init__(self):
        if not self.service_mem_footprint:
            object.__setattr__(self, "service_mem_footprint", (2.0,) * self.num_services)
        else:
            object.__setattr__(self, "service_mem_footprint", tuple(float(v) for v in self.service_mem_footprint))
        if not self.distance:
            object.__setattr__(self, "distance", _as_tuple_matrix(grid_distances(self.num_edges)))
        else:
            object.__setattr__(self, "distance", _as_tuple_matrix(self.distance))

    @property
    def cloud(self) -> int:
        return self.num_edges

    @property
    def num_servers(self) -> int:
        return self.num_edges + 1

    @cached_property
    def dist(self) -> np.ndarray:
        return np.asarray(self.distance, dtype=float)

    @cached_property
    def footprint(self) -> np.ndarray:
        return np.asarray(self.service_mem_footprint, dtype=float)

    @cached_property
    def transfer_slots(self) -> np.ndarray:
        """Slots a task spends in transit between two servers."""
        d = self.dist
        slots = np.ceil(d / self.link_km_per_slot - 1e-12).astype(int)
        slots[:, self.cloud] += self.core_delay_slots
        slots[self.cloud, :] += self.core_delay_slots
        np.fill_diagonal(slots, 0)
        return slots

    def unit_price(self, service: int, t: int) -> float:
        """Price per CPU-unit of within-budget work; constant by default."""
        return self.unit_price_base

    def server_cpu(self, j: int) -> float:
        return self.cloud_cpu if j == self.cloud else self.edge_cpu

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["service_mem_footprint"] = list(self.service_mem_footprint)
        d["distance"] = [list(r) for r in self.distance]
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ClusterConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        return cls(**data)


def _as_tuple_matrix(m) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in row) for row in m)


def validate_config(cfg: ClusterConfig) -> list[str]:
    """Return every violated invariant; an empty list means the config is ok."""
    errors = []
    if cfg.num_edges < 2:
        errors.append("num_edges must be at least 2")
    if cfg.num_services < 1:
        errors.append("num_services must be at least 1")
    for name in ("edge_cpu", "edge_mem", "cloud_cpu", "cloud_mem", "slot_length", "link_km_per_slot", "budget_scale"):
        if not getattr(cfg, name) > 0:
            errors.append(f"{name} must be positive")
    for name in ("unit_price_base", "place_cost_per_km", "offload_cost_per_km", "realloc_cost_per_unit"):
        if getattr(cfg, name) < 0:
            errors.append(f"{name} must be non-negative")
    if cfg.core_delay_slots < 0:
        errors.append("core_delay_slots must be non-negative")
    for name in ("transmission_budget_fraction", "computation_budget_fraction"):
        if not 0 < getattr(cfg, name) <= 1:
            errors.append(f"{name} must lie in (0, 1]")
    if len(cfg.service_mem_footprint) != cfg.num_services:
        errors.append(f"service_mem_footprint has {len(cfg.service_mem_footprint)} entries, expected {cfg.num_services}")
    for s, m in enumerate(cfg.service_mem_footprint):
        if not m > 0:
            errors.append(f"service_mem_footprint[{s}] must be positive")
    n = cfg.num_edges + 1
    if len(cfg.distance) != n or any(len(r) != n for r in cfg.distance):
        errors.append(f"distance must be a {n}x{n} matrix (edges plus cloud)")
        return errors
    for i in range(n):
        if cfg.distance[i][i] != 0:
            errors.append(f"distance[{i}][{i}] must be zero")
        for j in range(i + 1, n):
            if cfg.distance[i][j] != cfg.distance[j][i]:
                errors.append(f"distance is asymmetric at ({i},{j})")
            if cfg.distance[i][j] < 0:
                errors.append(f"distance[{i}][{j}] must be non-negative")
    return errors


def load_config(path: str | Path) -> ClusterConfig:
    data = json.loads(Path(path).read_text())
    return checked(ClusterConfig.from_dict(data.get("cluster", data)))


def checked(cfg: ClusterConfig) -> ClusterConfig:
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


@dataclass(frozen=True)
class Task:
    id: int
    service: int
    arrival_slot: int
    cpu_demand: float
    workload: float
    delay_budget: int
    origin_edge: int

    def __post_init__(self):
        if not self.workload > 0:
            raise ValueError(f"task {self.id}: workload must be positive")
        if self.delay_budget < 1:
            raise ValueError(f"task {self.id}: delay_budget must be >= 1")


def delay_budget_for(processing_slots: float, budget_scale: float) -> int:
    return max(1, math.ceil(budget_scale * processing_slots - 1e-9))


@dataclass(eq=False)
class TaskRun:
    """Mutable per-task bookkeeping while the task is inside the system."""

    task: Task
    remaining: float
    location: int  # origin edge until dispatched, destination afterwards
    dispatched: bool = False
    ready_slot: int = 0  # first slot the task may execute at its destination
    dispatch_slot: int = -1
    violated: bool = False

    @property
    def service(self) -> int:
        return self.task.service

    def elapsed(self, t: int) -> int:
        """Slots spent in the system by the end of slot ``t``."""
        return t + 1 - self.task.arrival_slot


@dataclass
class SchedulingState:
    """Executed decisions, their previous-slot copies, and the task queues."""

    placement: np.ndarray  # (N, S) int 0/1
    offload_target: np.ndarray  # (N, S) int server index, UNSET before first decision
    allocation: np.ndarray  # (N, S) float CPU-units
    prev_placement: np.ndarray
    prev_offload: np.ndarray
    prev_allocation: np.ndarray
    pending: list[list[TaskRun]]  # per origin edge, not yet dispatched
    queues: list[list[TaskRun]]  # per server incl. cloud, FIFO
    transit: list[TaskRun] = field(default_factory=list)
    slot: int = 0
    used_cpu: Optional[np.ndarray] = None  # per-edge CPU consumed in the last slot

    @classmethod
    def initial(cls, cfg: ClusterConfig) -> "SchedulingState":
        n, s = cfg.num_edges, cfg.num_services
        x = np.zeros((n, s), dtype=int)
        y = np.full((n, s), UNSET, dtype=int)
        z = np.zeros((n, s), dtype=float)
        return cls(
            placement=x,
            offload_target=y,
            allocation=z,
            prev_placement=x.copy(),
            prev_offload=y.copy(),
            prev_allocation=z.copy(),
            pending=[[] for _ in range(n)],
            queues=[[] for _ in range(n + 1)],
            used_cpu=np.zeros(n),
        )

    def tasks(self):
        for p in self.pending:
            yield from p
        yield from self.transit
        for q in self.queues:
            yield from q


def state_violations(cfg: ClusterConfig, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> list[str]:
    """Invariant check for a decision triple; empty list means feasible."""
    errors = []
    n, s = cfg.num_edges, cfg.num_services
    if x.shape != (n, s) or y.shape != (n, s) or z.shape != (n, s):
        return [f"decision shapes must be ({n}, {s})"]
    if not ((x == 0) | (x == 1)).all():
        errors.append("placement entries must be 0 or 1")
    mem = x @ cfg.footprint
    for i in np.flatnonzero(mem > cfg.edge_mem + 1e-9):
        errors.append(f"edge {i} memory {mem[i]:g} exceeds {cfg.edge_mem:g}")
    if (z < -1e-12).any():
        errors.append("allocation must be non-negative")
    cpu = z.sum(axis=1)
    for i in np.flatnonzero(cpu > cfg.edge_cpu + 1e-9):
        errors.append(f"edge {i} allocation {cpu[i]:g} exceeds {cfg.edge_cpu:g}")
    for i in range(n):
        for sv in range(s):
            j = y[i, sv]
            if j == UNSET or j == cfg.cloud:
                continue
            if not 0 <= j < n:
                errors.append(f"route ({i},{sv}) targets unknown server {j}")
            elif x[j, sv] != 1:
                errors.append(f"route ({i},{sv}) targets edge {j} without service {sv}")
    return errors


@dataclass
class UpdateAction:
    """Per-edge update (1) / hold (0) bits for the three layers."""

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray

    def __post_init__(self):
        for name in ("a1", "a2", "a3"):
            v = np.asarray(getattr(self, name), dtype=int)
            if not ((v == 0) | (v == 1)).all():
                raise ValueError(f"{name} must be binary")
            setattr(self, name, v)

    @classmethod
    def constant(cls, n: int, bits=(1, 1, 1)) -> "UpdateAction":
        return cls(*(np.full(n, b, dtype=int) for b in bits))

    def layer(self, k: int) -> np.ndarray:
        return (self.a1, self.a2, self.a3)[k - 1]

    def as_array(self) -> np.ndarray:
        return np.stack([self.a1, self.a2, self.a3])


@dataclass
class SlotLedger:
    """Money and workload accounting for one slot, per edge."""

    slot: int
    revenue: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    actions: np.ndarray  # (3, N) executed update bits
    served: np.ndarray  # within-budget workload completed
    late: np.ndarray  # workload of violated tasks that completed this slot
    violated: np.ndarray  # workload of tasks newly marked violated
    arrived: float = 0.0
    queued: float = 0.0  # unfinished, not-yet-violated workload in the system
    completed_total: float = 0.0
    violated_total: float = 0.0
    arrived_total: float = 0.0
    coverage: float = 0.0  # d(t)
    offloaded_ok: float = 0.0  # u(t)
    variance: float = 0.0  # v(t)
    processed_ok: float = 0.0  # l(t)
    unserved: Optional[np.ndarray] = None
    delay: Optional[np.ndarray] = None
    undelayed: Optional[np.ndarray] = None
    unsafe: int = 0
    delays: list = field(default_factory=list)  # (service, delay, budget) per completion

    @property
    def profit(self) -> np.ndarray:
        a1, a2, a3 = self.actions
        return self.revenue - a1 * self.c1 - a2 * self.c2 - a3 * self.c3

    @property
    def total_profit(self) -> float:
        return float(self.profit.sum())

    def records(self):
        """Line-delimited per-edge records for the metrics sink."""
        p = self.profit
        for i in range(len(self.revenue)):
            yield {
                "slot": self.slot,
                "edge": i,
                "g": float(self.revenue[i]),
                "c1": float(self.c1[i]),
                "c2": float(self.c2[i]),
                "c3": float(self.c3[i]),
                "profit": float(p[i]),
                "served": float(self.served[i]),
                "violated": float(self.violated[i]),
            }
