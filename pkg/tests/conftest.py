import numpy as np
import pytest

from mtsched.domain import ClusterConfig, Task
from mtsched.workload import WorkloadScript, _finish


def line_distances(n, spacing=5.0, cloud=10.0):
    """Edges on a line ``spacing`` km apart, the cloud ``cloud`` km from each."""
    d = [[0.0] * (n + 1) for _ in range(n + 1)]
    for i in range(n):
        for j in range(n):
            d[i][j] = abs(i - j) * spacing
        d[i][n] = d[n][i] = cloud
    return d


def small_config(n=2, s=2, **kw):
    base = dict(num_edges=n, num_services=s, distance=line_distances(n), service_mem_footprint=(2.0,) * s)
    base.update(kw)
    return ClusterConfig(**base)


def task(tid=0, service=0, slot=0, edge=0, workload=1.0, budget=4, cpu=1.0):
    return Task(tid, service, slot, cpu, workload, budget, edge)


def script_of(tasks, horizon):
    return _finish([(t.arrival_slot, t.origin_edge, t) for t in tasks], horizon, "custom")


@pytest.fixture
def cfg2():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class RandomBits:
    """Update policy that flips a seeded coin per layer and edge."""

    name = "random"
    guarded = False

    def __init__(self, seed=0, p=0.5):
        self.rng = np.random.default_rng(seed)
        self.p = p

    def reset(self, env):
        pass

    def decide(self, layer, ctx):
        return (self.rng.random(ctx.cfg.num_edges) < self.p).astype(int)

    def finish_slot(self, ctx, ledger):
        pass


def random_episode(seed, horizon=500, n=3, s=3):
    """A bursty synthetic episode under a random rule set and random update bits."""
    from mtsched.domain import grid_distances
    from mtsched.rules import all_rule_sets
    from mtsched.timescale import run_episode
    from mtsched.workload import bursty_profile, synth_workload

    rng = np.random.default_rng(seed)
    cfg = ClusterConfig(num_edges=n, num_services=s, service_mem_footprint=(3.0,) * s,
                        distance=grid_distances(n, 5.0, 30))
    script = synth_workload(cfg, horizon, bursty_profile(horizon, n, seed=seed, peak=0.6, base=0.05),
                            seed=seed + 1, cpu_choices=(0.25, 0.5), duration_range=(1, 3))
    rules = all_rule_sets()[int(rng.integers(45))]
    return cfg, run_episode(cfg, script, rules, RandomBits(seed, float(rng.uniform(0.1, 0.9))))


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
CRITERIA = 14


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
