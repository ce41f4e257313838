"""Per-layer controller rewards and the sub-objective diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .domain import SlotLedger


@dataclass(frozen=True)
class RewardCoefficients:
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 1.0
    e: float = -1.0  # negative: load variance is penalized
    f: float = 1.0
    g: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    sigma: float = 0.5
    phi: float = 1.0
    budget_unserved: float = 0.0
    budget_delay: float = 0.0
    epsilon_clamp: float = 1e-3

    def __post_init__(self):
        if not self.epsilon_clamp > 0:
            raise ValueError("epsilon_clamp must be positive")
        for k, v in asdict(self).items():
            if not math.isfinite(v):
                raise ValueError(f"coefficient {k} must be finite")


def _excess(values: np.ndarray, budget: float) -> np.ndarray:
    return np.clip(np.asarray(values, dtype=float) - budget, 0.0, None)


def layer1_reward(ledger: SlotLedger, k: RewardCoefficients = RewardCoefficients()) -> float:
    place_cost = ledger.actions[0] * ledger.c1
    denom = k.a * place_cost + k.b * _excess(ledger.unserved, k.budget_unserved)
    return float(np.sum(1.0 / np.maximum(k.epsilon_clamp, denom)))


def layer2_reward(ledger: SlotLedger, k: RewardCoefficients = RewardCoefficients()) -> float:
    offload_cost = ledger.actions[1] * ledger.c2
    denom = k.c * offload_cost + k.d * _excess(ledger.delay, k.budget_delay)
    return float(np.sum(1.0 / np.maximum(k.epsilon_clamp, denom)) + k.e * ledger.variance)


def layer3_reward(ledger: SlotLedger, k: RewardCoefficients = RewardCoefficients()) -> float:
    alloc_cost = ledger.actions[2] * ledger.c3
    denom = k.f * alloc_cost + k.g * _excess(ledger.delay, k.budget_delay)
    return float(np.sum(np.asarray(ledger.undelayed, dtype=float) / np.maximum(k.epsilon_clamp, denom)))


def layer_rewards(ledger: SlotLedger, k: RewardCoefficients = RewardCoefficients()) -> tuple[float, float, float]:
    return layer1_reward(ledger, k), layer2_reward(ledger, k), layer3_reward(ledger, k)


def subobjective_report(ledgers: Iterable[SlotLedger], k: RewardCoefficients = RewardCoefficients()):
    """Episode totals of the per-layer sub-objectives (coverage, offload, processing minus gated costs)."""
    p1 = p2 = p3 = 0.0
    for led in ledgers:
        a1, a2, a3 = led.actions
        p1 += k.alpha * led.coverage - float(np.sum(a1 * led.c1))
        p2 += k.beta * led.offloaded_ok - k.sigma * led.variance - float(np.sum(a2 * led.c2))
        p3 += k.phi * led.processed_ok - float(np.sum(a3 * led.c3))
    return p1, p2, p3
