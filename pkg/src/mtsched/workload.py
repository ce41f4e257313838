"""Workload scripts: cluster-trace ingestion, synthetic arrivals, patterns A-D."""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .domain import ClusterConfig, Task, delay_budget_for

PATTERNS = ("A", "B", "C", "D")
TRACE_COLUMNS = ("start_time", "end_time", "task_type", "plan_cpu", "plan_mem")
JITTER_SLOTS = 5


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRow:
    start_time: float
    end_time: float
    task_type: str
    plan_cpu: float
    plan_mem: float


@dataclass
class WorkloadScript:
    events: list[tuple[int, int, Task]] = field(default_factory=list)
    horizon: int = 0
    pattern_tag: str = "A"

    def __len__(self):
        return len(self.events)

    def by_slot(self) -> list[list[Task]]:
        slots: list[list[Task]] = [[] for _ in range(self.horizon)]
        for slot, _, task in self.events:
            slots[slot].append(task)
        return slots

    def total_workload(self) -> float:
        return sum(t.workload for _, _, t in self.events)

    def dumps(self) -> str:
        lines = [json.dumps({"horizon": self.horizon, "pattern": self.pattern_tag})]
        for slot, edge, t in self.events:
            lines.append(json.dumps([slot, edge, t.id, t.service, t.cpu_demand, t.workload, t.delay_budget]))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "WorkloadScript":
        lines = text.splitlines()
        head = json.loads(lines[0])
        events = []
        for line in lines[1:]:
            slot, edge, tid, svc, cpu, work, budget = json.loads(line)
            events.append((slot, edge, Task(tid, svc, slot, cpu, work, budget, edge)))
        return cls(events, head["horizon"], head["pattern"])

    @classmethod
    def load(cls, path) -> "WorkloadScript":
        return cls.loads(Path(path).read_text())


def _finish(events: list[tuple[int, int, Task]], horizon: int, tag: str) -> WorkloadScript:
    """Sort events, renumber task ids and make tasks agree with their event slot/edge."""
    events = sorted(events, key=lambda e: (e[0], e[1], e[2].id))
    out = []
    for k, (slot, edge, t) in enumerate(events):
        out.append((slot, edge, replace(t, id=k, arrival_slot=slot, origin_edge=edge)))
    return WorkloadScript(out, horizon, tag)


def read_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if tuple(header) != TRACE_COLUMNS:
            raise TraceError(f"{path}:1: header must be {','.join(TRACE_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(TRACE_COLUMNS):
                raise TraceError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} columns, got {len(rec)}")
            try:
                row = TraceRow(float(rec[0]), float(rec[1]), rec[2].strip(), float(rec[3]), float(rec[4]))
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            if row.end_time < row.start_time:
                raise TraceError(f"{path}:{lineno}: end_time precedes start_time")
            if not row.plan_cpu > 0:
                raise TraceError(f"{path}:{lineno}: plan_cpu must be positive")
            rows.append(row)
    if not rows:
        raise TraceError(f"{path}: no task rows")
    return rows


def service_mapping(task_types: Sequence[str], num_services: int) -> dict[str, int]:
    """Bijective (sorted order) when the types fit, stable hash buckets otherwise."""
    distinct = sorted(set(task_types))
    if len(distinct) <= num_services:
        return {tt: k for k, tt in enumerate(distinct)}
    return {tt: zlib.crc32(tt.encode()) % num_services for tt in distinct}


def ingest_trace(path, cfg: ClusterConfig, budget_scale: float | None = None, seed: int = 0) -> WorkloadScript:
    """Turn a cluster-trace CSV into an arrival script.

    Zero-duration rows are treated as lasting one slot so every task carries work.
    """
    budget_scale = cfg.budget_scale if budget_scale is None else budget_scale
    rows = read_trace(path)
    mapping = service_mapping([r.task_type for r in rows], cfg.num_services)
    t0 = min(r.start_time for r in rows)
    rng = np.random.default_rng(seed)
    edges = rng.integers(cfg.num_edges, size=len(rows))
    events = []
    for k, (row, edge) in enumerate(zip(rows, edges)):
        duration = max(row.end_time - row.start_time, cfg.slot_length)
        slot = int(math.floor((row.start_time - t0) / cfg.slot_length))
        task = Task(
            id=k,
            service=mapping[row.task_type],
            arrival_slot=slot,
            cpu_demand=row.plan_cpu,
            workload=row.plan_cpu * duration,
            delay_budget=delay_budget_for(duration / cfg.slot_length, budget_scale),
            origin_edge=int(edge),
        )
        events.append((slot, int(edge), task))
    horizon = max(e[0] for e in events) + 1
    return _finish(events, horizon, "A")


def make_pattern(script: WorkloadScript, pattern: str, seed: int = 0) -> WorkloadScript:
    """Derive pattern B (shuffle), C (doubled rate) or D (A+B+C) from a raw script."""
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    if pattern == "A":
        return WorkloadScript(list(script.events), script.horizon, script.pattern_tag)
    rng = np.random.default_rng(seed)
    if pattern == "B":
        return _shuffled(script, rng)
    if pattern == "C":
        return _doubled(script, rng)
    parts = [script, _shuffled(script, rng), _doubled(script, rng)]
    events = []
    for k, part in enumerate(parts):
        off = k * script.horizon
        events.extend((slot + off, edge, t) for slot, edge, t in part.events)
    return _finish(events, 3 * script.horizon, "D")


def _shuffled(script: WorkloadScript, rng: np.random.Generator) -> WorkloadScript:
    per_edge: dict[int, list[tuple[int, Task]]] = {}
    for slot, edge, t in script.events:
        per_edge.setdefault(edge, []).append((slot, t))
    events = []
    for edge in sorted(per_edge):
        items = per_edge[edge]
        slots = sorted(s for s, _ in items)
        order = rng.permutation(len(items))
        for slot, k in zip(slots, order):
            events.append((slot, edge, items[k][1]))
    return _finish(events, script.horizon, "B")


def _doubled(script: WorkloadScript, rng: np.random.Generator) -> WorkloadScript:
    events = list(script.events)
    jitter = rng.integers(-JITTER_SLOTS, JITTER_SLOTS + 1, size=len(script.events))
    last = max(script.horizon - 1, 0)
    for (slot, edge, t), dj in zip(script.events, jitter):
        events.append((int(min(max(slot + dj, 0), last)), edge, t))
    return _finish(events, script.horizon, "C")


RateProfile = Union[float, Sequence[float], np.ndarray, Callable[[int], "float | np.ndarray"]]


def rate_matrix(rate_profile: RateProfile, horizon: int, num_edges: int) -> np.ndarray:
    """Expand a rate profile to a (horizon, N) array of mean arrivals per slot."""
    if callable(rate_profile):
        rows = [np.broadcast_to(np.asarray(rate_profile(t), dtype=float), (num_edges,)) for t in range(horizon)]
        rates = np.array(rows)
    else:
        r = np.asarray(rate_profile, dtype=float)
        if r.ndim == 0:
            rates = np.full((horizon, num_edges), float(r))
        elif r.ndim == 1:
            rates = np.repeat(r[:horizon, None], num_edges, axis=1)
        else:
            rates = r[:horizon]
    if rates.shape != (horizon, num_edges):
        raise ValueError(f"rate profile must cover {horizon} slots and {num_edges} edges")
    if (rates < 0).any():
        raise ValueError("rates must be non-negative")
    return rates


def synth_workload(
    cfg: ClusterConfig,
    horizon: int,
    rate_profile: RateProfile,
    seed: int = 0,
    *,
    service_weights: Sequence[float] | np.ndarray | None = None,
    cpu_choices: Sequence[float] = (1.0, 2.0),
    duration_range: tuple[int, int] = (1, 3),
    budget_scale: float | None = None,
) -> WorkloadScript:
    """Poisson arrivals per slot per edge.

    ``service_weights`` may be a vector over services or an (N, S) matrix giving
    each edge its own service mix. Durations are whole slots drawn uniformly
    from ``duration_range`` (inclusive).
    """
    budget_scale = cfg.budget_scale if budget_scale is None else budget_scale
    rates = rate_matrix(rate_profile, horizon, cfg.num_edges)
    rng = np.random.default_rng(seed)
    n, s = cfg.num_edges, cfg.num_services
    w = np.ones(s) if service_weights is None else np.asarray(service_weights, dtype=float)
    w = np.broadcast_to(w, (n, s))
    probs = w / w.sum(axis=1, keepdims=True)
    counts = rng.poisson(rates)
    events = []
    lo, hi = duration_range
    for slot in range(horizon):
        for edge in range(n):
            for _ in range(counts[slot, edge]):
                svc = int(rng.choice(s, p=probs[edge]))
                cpu = float(rng.choice(cpu_choices))
                dur = int(rng.integers(lo, hi + 1))
                task = Task(0, svc, slot, cpu, cpu * dur, delay_budget_for(dur, budget_scale), edge)
                events.append((slot, edge, task))
    return _finish(events, horizon, "custom")


def bursty_profile(horizon: int, num_edges: int, seed: int = 0, *, base: float = 0.05, peak: float = 0.8,
                   mean_on: int = 40, mean_off: int = 120) -> np.ndarray:
    """Independent on/off rate envelope per edge (geometric sojourns)."""
    rng = np.random.default_rng(seed)
    rates = np.full((horizon, num_edges), base)
    for e in range(num_edges):
        t, on = 0, bool(rng.random() < mean_on / (mean_on + mean_off))
        while t < horizon:
            length = int(rng.geometric(1.0 / (mean_on if on else mean_off)))
            if on:
                rates[t:t + length, e] = peak
            t += length
            on = not on
    return rates


def diurnal_profile(horizon: int, *, low: float = 0.05, high: float = 0.6, period: int = 500) -> np.ndarray:
    t = np.arange(horizon)
    return low + (high - low) * 0.5 * (1 - np.cos(2 * np.pi * t / period))
