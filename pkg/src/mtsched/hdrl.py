"""Layered multi-agent update controllers.

Each scheduling layer has one recurrent actor and one recurrent critic per edge.
Actors see only their own edge's features; critics see the concatenated features
of every edge during training. Unsafe "hold" actions are masked out of the
actor's logits before sampling, and idle edges skip the controllers entirely.
"""

from __future__ import annotations

import hashlib
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import rewards as RW
from . import rules as R
from .domain import UNSET, ClusterConfig, SlotLedger
from .simenv import Environment
from .timescale import (
    EpisodeResult,
    SlotContext,
    UpdatePolicy,
    allocation_demand,
    run_episode,
    unsafe_hold,
)
from .workload import WorkloadScript

HOLD, UPDATE = 0, 1
MASK_VALUE = -1e9
CHECKPOINT_VERSION = 1
JOINT = 0  # layer id of the undecomposed controller
JOINT_BITS = np.array(list(itertools.product((0, 1), repeat=3)))  # action index -> (a1, a2, a3)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    hidden: int = 64
    lr: float = 5e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    ppo_epochs: int = 5
    num_minibatches: int = 1
    entropy_coef: float = 0.01
    max_grad_norm: float = 10.0
    trajectory_len: int = 200
    chunk_len: int = 25
    critic_target: str = "mc"  # "mc": discounted reward-to-go, "gae": lambda-return
    shared: bool = False
    centralized: bool = True
    safe: bool = True
    decomposed: bool = True
    skip_idle: bool = True
    static_layers: tuple[int, ...] = ()  # layers that update every slot
    obs_workload_scale: float = 1.0
    init_update_bias: float = 0.0  # initial logit bonus per update bit; > 0 starts near "always update"
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["static_layers"] = list(self.static_layers)
        return d


ABLATIONS = {
    "full": {},
    "no-decomposition": {"decomposed": False},
    "no-central": {"centralized": False},
    "no-safe": {"safe": False},
    "no-layer1": {"static_layers": (1,)},
    "no-layer2": {"static_layers": (2,)},
    "no-layer3": {"static_layers": (3,)},
}


def ablation_config(base: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
    return replace(base, **ABLATIONS[name])


# ---------------------------------------------------------------- observations

def obs_dim(layer: int, num_services: int) -> int:
    return {1: 2 + 2 * num_services, 2: 3, 3: 4}[layer]


def _squash(w, scale):
    return 1.0 - np.exp(-np.asarray(w, dtype=float) / scale)


def observe_all(layer: int, ctx: SlotContext, scale: float = 1.0) -> np.ndarray:
    """Feature rows for every edge; row ``i`` uses only quantities local to edge ``i``.

    Layer 1: service coverage, free memory, installed services, requested services.
    Layer 2: violated-task ratio, idle CPU, workload not yet on an edge holding its service.
    Layer 3: violated-task ratio, per-task rate variance, unallocated CPU, workload with no CPU.
    Layer-2 features use this slot's executed placement, layer-3 features this slot's routes.
    """
    env, cfg = ctx.env, ctx.cfg
    st = env.state
    n, ns = cfg.num_edges, cfg.num_services
    out = np.zeros((n, obs_dim(layer, ns)))
    if layer == 1:
        placed_any = st.placement.any(axis=0)
        for i in range(n):
            total = covered = 0.0
            asked = np.zeros(ns)
            for run in st.pending[i]:
                asked[run.service] = 1.0
            for run in itertools.chain(st.pending[i], st.queues[i]):
                total += run.remaining
                if placed_any[run.service]:
                    covered += run.remaining
            out[i, 0] = covered / total if total > 0 else 0.0
            out[i, 1] = 1.0 - float(st.placement[i] @ cfg.footprint) / cfg.edge_mem
            out[i, 2:2 + ns] = st.placement[i]
            out[i, 2 + ns:] = asked
        return out

    used = st.used_cpu if st.used_cpu is not None else np.zeros(n)
    viol = np.zeros(n)
    for i in range(n):
        runs = st.pending[i] + st.queues[i]
        if runs:
            viol[i] = sum(r.violated for r in runs) / len(runs)
    if layer == 2:
        x = ctx.placement if ctx.placement is not None else st.placement
        y = st.offload_target
        for i in range(n):
            stranded = 0.0
            for run in st.pending[i]:
                j = y[i, run.service]
                if j == UNSET or j == cfg.cloud or x[j, run.service] != 1:
                    stranded += run.remaining
            out[i] = (viol[i], 1.0 - used[i] / cfg.edge_cpu, _squash(stranded, scale))
        return out

    y = ctx.offload_target if ctx.offload_target is not None else st.offload_target
    z = st.allocation
    demand = allocation_demand(env, y)
    for i in range(n):
        counts = np.zeros(ns)
        for run in st.queues[i]:
            counts[run.service] += 1
        if counts.sum() > 0:
            share = np.repeat(np.divide(z[i], np.maximum(counts, 1)) / cfg.edge_cpu, counts.astype(int))
            rate_var = min(1.0, 4.0 * float(np.var(share)))
        else:
            rate_var = 0.0
        waiting = float(demand[i][z[i] <= 0].sum())
        out[i] = (viol[i], rate_var, 1.0 - z[i].sum() / cfg.edge_cpu, _squash(waiting, scale))
    return out


def idle_edges(env: Environment) -> np.ndarray:
    """Edges with nothing pending, queued, or heading their way."""
    st = env.state
    n = env.cfg.num_edges
    busy = np.array([bool(st.pending[i] or st.queues[i]) for i in range(n)])
    for run in st.transit:
        if run.location < n:
            busy[run.location] = True
    return ~busy


def skip_if_idle(env: Environment, edge: int) -> Optional[tuple[int, int, int]]:
    """Default all-hold action for an idle edge, ``None`` when the controllers must run."""
    return (HOLD, HOLD, HOLD) if idle_edges(env)[edge] else None


# ---------------------------------------------------------------- networks

class RecurrentHeads(nn.Module):
    """One GRU cell plus a linear head per agent, parameters stacked on a leading agent axis.

    With ``shared`` a single parameter set serves every agent.
    """

    def __init__(self, num_agents: int, in_dim: int, hidden: int, out_dim: int, shared: bool = False,
                 head_gain: float = 1.0, generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.num_agents, self.in_dim, self.hidden, self.out_dim = num_agents, in_dim, hidden, out_dim
        self.shared = shared
        k = 1 if shared else num_agents
        bound = 1.0 / math.sqrt(hidden)

        def uni(*shape, gain=1.0):
            return nn.Parameter(torch.empty(*shape, dtype=dtype).uniform_(-bound, bound, generator=generator) * gain)

        self.w_ih = uni(k, 3 * hidden, in_dim)
        self.w_hh = uni(k, 3 * hidden, hidden)
        self.b_ih = uni(k, 3 * hidden)
        self.b_hh = uni(k, 3 * hidden)
        self.w_out = uni(k, out_dim, hidden, gain=head_gain)
        self.b_out = nn.Parameter(torch.zeros(k, out_dim, dtype=dtype))

    def _p(self, p: torch.Tensor, a: int) -> torch.Tensor:
        return p.expand(a, *p.shape[1:]) if self.shared else p

    def cell(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """x: (A, B, in), h: (A, B, H) -> next hidden (A, B, H)."""
        a = x.shape[0]
        gi = torch.einsum("abi,aoi->abo", x, self._p(self.w_ih, a)) + self._p(self.b_ih, a)[:, None]
        gh = torch.einsum("abh,aoh->abo", h, self._p(self.w_hh, a)) + self._p(self.b_hh, a)[:, None]
        ir, iz, i_n = gi.chunk(3, -1)
        hr, hz, h_n = gh.chunk(3, -1)
        r = torch.sigmoid(ir + hr)
        z = torch.sigmoid(iz + hz)
        cand = torch.tanh(i_n + r * h_n)
        return (1 - z) * cand + z * h

    def head(self, h: torch.Tensor) -> torch.Tensor:
        a = h.shape[0]
        return torch.einsum("abh,aoh->abo", h, self._p(self.w_out, a)) + self._p(self.b_out, a)[:, None]

    def step(self, x: torch.Tensor, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.cell(x, h)
        return self.head(h), h

    def unroll(self, x: torch.Tensor, h0: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """x: (A, B, L, in); padded steps (``valid`` False) leave the hidden state untouched."""
        h = h0
        outs = []
        for k in range(x.shape[2]):
            hn = self.cell(x[:, :, k], h)
            h = torch.where(valid[:, :, k, None], hn, h)
            outs.append(self.head(h))
        return torch.stack(outs, 2)

    def zero_hidden(self, batch: int = 1) -> torch.Tensor:
        return torch.zeros(self.num_agents, batch, self.hidden, dtype=self.w_ih.dtype)


class NumpyHeads:
    """Float64 copy of a ``RecurrentHeads`` for cheap single-step rollouts."""

    def __init__(self, net: RecurrentHeads):
        a = net.num_agents
        g = lambda p: p.detach().double().expand(a, *p.shape[1:]).numpy().copy()
        self.w_ih, self.w_hh = g(net.w_ih), g(net.w_hh)
        self.b_ih, self.b_hh = g(net.b_ih), g(net.b_hh)
        self.w_out, self.b_out = g(net.w_out), g(net.b_out)

    def step(self, x: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """x: (A, in), h: (A, H) -> (outputs (A, out), next hidden (A, H))."""
        k = h.shape[1]
        gi = np.matmul(self.w_ih, x[:, :, None])[:, :, 0] + self.b_ih
        gh = np.matmul(self.w_hh, h[:, :, None])[:, :, 0] + self.b_hh
        r = 1.0 / (1.0 + np.exp(-(gi[:, :k] + gh[:, :k])))
        z = 1.0 / (1.0 + np.exp(-(gi[:, k:2 * k] + gh[:, k:2 * k])))
        hn = (1 - z) * np.tanh(gi[:, 2 * k:] + r * gh[:, 2 * k:]) + z * h
        return np.matmul(self.w_out, hn[:, :, None])[:, :, 0] + self.b_out, hn


def mask_unsafe(logits: torch.Tensor, hold_unsafe) -> torch.Tensor:
    """Replace the hold logit by a large negative constant where holding is unsafe."""
    m = torch.as_tensor(np.asarray(hold_unsafe, dtype=bool))
    out = logits.clone()
    hold = out[..., HOLD]
    out[..., HOLD] = torch.where(m.reshape(hold.shape), torch.full_like(hold, MASK_VALUE), hold)
    return out


def action_probs(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def choose(logits, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
    """Sample (or argmax) one action per row of ``logits`` (..., K)."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().double().numpy()
    logits = np.asarray(logits, dtype=float)
    if not np.isfinite(logits).all():
        raise TrainingDiverged("non-finite policy logits")
    flat = logits.reshape(-1, logits.shape[-1])
    if deterministic:
        return flat.argmax(-1).reshape(logits.shape[:-1])
    p = np.exp(flat - flat.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    u = rng.random(p.shape[0])
    idx = (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1).reshape(logits.shape[:-1])


# ---------------------------------------------------------------- advantages

def gae(rewards: Sequence[float], values: Sequence[float], bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates for one contiguous trajectory."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} and values {v.shape} differ in length")
    adv = np.zeros_like(r)
    nxt = bootstrap
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * nxt - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt = v[t]
    return adv


def discounted_returns(rewards: Sequence[float], bootstrap: float, gamma: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    out = np.zeros_like(r)
    acc = bootstrap
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


class RunningNorm:
    """Running mean/variance used to keep critic targets near unit scale."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    @property
    def std(self) -> float:
        if self.count < 2:
            return 1.0
        return max(math.sqrt(self.m2 / self.count), 1e-6)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            return
        n_b, mean_b, var_b = x.size, float(x.mean()), float(x.var())
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / n
        self.m2 += var_b * n_b + delta * delta * self.count * n_b / n
        self.count = n

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def state(self):
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    def load(self, s):
        self.count, self.mean, self.m2 = s["count"], s["mean"], s["m2"]


# ---------------------------------------------------------------- per-layer learner

@dataclass
class Transition:
    obs: np.ndarray
    global_obs: np.ndarray
    action: int
    masked: bool
    logp: float
    value: float
    h_actor: np.ndarray
    h_critic: np.ndarray
    reward: float = 0.0
    slot: int = 0
    done: bool = False


class LayerController:
    """Actors and critics of all edges for one layer (or the joint controller)."""

    def __init__(self, layer: int, num_agents: int, in_dim: int, num_actions: int, tc: TrainConfig,
                 generator: torch.Generator, dtype=torch.float32):
        self.layer = layer
        self.num_agents = num_agents
        self.in_dim = in_dim
        self.num_actions = num_actions
        self.tc = tc
        self.actor = RecurrentHeads(num_agents, in_dim, tc.hidden, num_actions, tc.shared, 0.01, generator, dtype)
        if tc.init_update_bias:
            share = JOINT_BITS.mean(1) if num_actions == len(JOINT_BITS) else np.array([0.0, 1.0])
            with torch.no_grad():
                self.actor.b_out[:] = torch.as_tensor(tc.init_update_bias * share, dtype=dtype)
        critic_in = in_dim * num_agents if tc.centralized else in_dim
        self.critic = RecurrentHeads(num_agents, critic_in, tc.hidden, 1, tc.shared, 1.0, generator, dtype)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=tc.lr)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=tc.lr)
        self.value_norm = RunningNorm()
        self.buffer: list[list[Transition]] = [[] for _ in range(num_agents)]
        self._frozen: dict = {}

    def critic_input(self, obs: np.ndarray) -> np.ndarray:
        """(N, d) local rows -> (N, d') critic rows (global concatenation when centralized)."""
        if self.tc.centralized:
            return np.repeat(obs.reshape(1, -1), self.num_agents, axis=0)
        return obs

    def act(self, obs: np.ndarray, hidden: np.ndarray, hold_unsafe: np.ndarray, rng: np.random.Generator,
            deterministic: bool = False):
        """Decentralized step for all agents: (actions, masked logits, next hidden).

        Row ``i`` of the output depends only on ``obs[i]`` and ``hidden[i]``.
        """
        logits, h = self._np("actor").step(obs, hidden)
        if self.num_actions == 2:
            logits = logits.copy()
            logits[:, HOLD] = np.where(np.asarray(hold_unsafe, dtype=bool), MASK_VALUE, logits[:, HOLD])
        actions = choose(logits, rng, deterministic)
        return actions, logits, h

    def value(self, obs: np.ndarray, hidden: np.ndarray):
        v, h = self._np("critic").step(self.critic_input(obs), hidden)
        return self.value_norm.denormalize(v[:, 0]), h

    def _np(self, which: str) -> "NumpyHeads":
        if self._frozen.get(which) is None:
            self._frozen[which] = NumpyHeads(getattr(self, which))
        return self._frozen[which]

    def refresh(self) -> None:
        """Drop cached inference weights after a parameter change."""
        self._frozen = {}

    def clear(self):
        self.buffer = [[] for _ in range(self.num_agents)]

    def state_dict(self):
        return {
            "actor": self.actor.state_dict(),
            "critic": self.critic.state_dict(),
            "value_norm": self.value_norm.state(),
        }

    def load_state_dict(self, s):
        self.actor.load_state_dict(s["actor"])
        self.critic.load_state_dict(s["critic"])
        self.value_norm.load(s["value_norm"])
        self.refresh()


@dataclass
class Batch:
    """Chunked per-agent training tensors, all shaped (A, C, L, ...)."""

    obs: torch.Tensor
    global_obs: torch.Tensor
    actions: torch.Tensor
    masked: torch.Tensor
    logp: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor
    valid: torch.Tensor
    h_actor: torch.Tensor  # (A, C, H)
    h_critic: torch.Tensor

    def select(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[:, idx] for f in self.__dataclass_fields__))

    @property
    def num_chunks(self) -> int:
        return self.valid.shape[1]


def build_batch(ctrl: LayerController, normalize_advantages: bool = True) -> Optional[Batch]:
    """Advantages per agent trajectory (cut every ``trajectory_len`` steps), then BPTT chunks."""
    tc = ctrl.tc
    per_agent = []
    all_adv = []
    all_ret = []
    for traj in ctrl.buffer:
        if not traj:
            per_agent.append(None)
            continue
        r = np.array([t.reward for t in traj])
        v = np.array([t.value for t in traj])
        adv = np.zeros(len(traj))
        ret = np.zeros(len(traj))
        for s in range(0, len(traj), tc.trajectory_len):
            e = min(s + tc.trajectory_len, len(traj))
            boot = v[e] if e < len(traj) else 0.0
            adv[s:e] = gae(r[s:e], v[s:e], boot, tc.gamma, tc.lam)
            if tc.critic_target == "gae":
                ret[s:e] = adv[s:e] + v[s:e]
            else:
                ret[s:e] = discounted_returns(r[s:e], boot, tc.gamma)
        per_agent.append((traj, adv, ret))
        all_adv.append(adv)
        all_ret.append(ret)
    if not all_adv:
        return None
    adv_cat = np.concatenate(all_adv)
    ctrl.value_norm.update(np.concatenate(all_ret))
    mu, sd = (adv_cat.mean(), adv_cat.std() + 1e-8) if normalize_advantages else (0.0, 1.0)

    L = tc.chunk_len
    A = ctrl.num_agents
    counts = [0 if p is None else math.ceil(len(p[0]) / L) for p in per_agent]
    C = max(counts)
    H = tc.hidden
    dt = ctrl.actor.w_ih.dtype
    d = ctrl.in_dim
    gd = ctrl.critic.in_dim
    obs = np.zeros((A, C, L, d))
    gobs = np.zeros((A, C, L, gd))
    act = np.zeros((A, C, L), dtype=np.int64)
    msk = np.zeros((A, C, L), dtype=bool)
    lp = np.zeros((A, C, L))
    advs = np.zeros((A, C, L))
    rets = np.zeros((A, C, L))
    valid = np.zeros((A, C, L), dtype=bool)
    ha = np.zeros((A, C, H))
    hc = np.zeros((A, C, H))
    for a, p in enumerate(per_agent):
        if p is None:
            continue
        traj, adv, ret = p
        for k, t in enumerate(traj):
            c, l = divmod(k, L)
            obs[a, c, l] = t.obs
            gobs[a, c, l] = ctrl.critic_input(t.global_obs[None])[0] if not tc.centralized else t.global_obs
            act[a, c, l] = t.action
            msk[a, c, l] = t.masked
            lp[a, c, l] = t.logp
            advs[a, c, l] = (adv[k] - mu) / sd
            rets[a, c, l] = ctrl.value_norm.normalize(ret[k])
            valid[a, c, l] = True
            if l == 0:
                ha[a, c] = t.h_actor
                hc[a, c] = t.h_critic
    f = lambda x: torch.as_tensor(x, dtype=dt)
    return Batch(f(obs), f(gobs), torch.as_tensor(act), torch.as_tensor(msk), f(lp), f(advs), f(rets),
                 torch.as_tensor(valid), f(ha), f(hc))


def policy_loss(actor: RecurrentHeads, batch: Batch, clip: float, entropy_coef: float) -> torch.Tensor:
    """Clipped importance-ratio surrogate (negated) minus an entropy bonus, over valid steps."""
    logits = actor.unroll(batch.obs, batch.h_actor, batch.valid)
    if logits.shape[-1] == 2:
        hold = logits[..., HOLD]
        logits = torch.stack([torch.where(batch.masked, torch.full_like(hold, MASK_VALUE), hold),
                              logits[..., UPDATE]], -1)
    logp_all = torch.log_softmax(logits, -1)
    logp = logp_all.gather(-1, batch.actions[..., None])[..., 0]
    ratio = torch.exp(logp - batch.logp)
    surr = torch.minimum(ratio * batch.advantages, torch.clamp(ratio, 1 - clip, 1 + clip) * batch.advantages)
    ent = -(logp_all.exp() * logp_all).sum(-1)
    w = batch.valid.to(logits.dtype)
    n = w.sum().clamp_min(1.0)
    return -(surr * w).sum() / n - entropy_coef * (ent * w).sum() / n


def value_loss(critic: RecurrentHeads, batch: Batch) -> torch.Tensor:
    v = critic.unroll(batch.global_obs, batch.h_critic, batch.valid)[..., 0]
    w = batch.valid.to(v.dtype)
    return (((v - batch.returns) ** 2) * w).sum() / w.sum().clamp_min(1.0)


def _apply(opt: torch.optim.Optimizer, params, loss: torch.Tensor, max_norm: float) -> None:
    opt.zero_grad()
    loss.backward()
    grads = [p.grad for p in params if p.grad is not None]
    if not all(torch.isfinite(g).all() for g in grads):
        opt.zero_grad()
        raise TrainingDiverged("non-finite gradient")
    if max_norm:
        nn.utils.clip_grad_norm_(params, max_norm)
    opt.step()


def update_actor(ctrl: LayerController, batch: Batch) -> float:
    params = list(ctrl.actor.parameters())
    loss = policy_loss(ctrl.actor, batch, ctrl.tc.clip, ctrl.tc.entropy_coef)
    _apply(ctrl.actor_opt, params, loss, ctrl.tc.max_grad_norm)
    ctrl.refresh()
    return float(loss.detach())


def update_critic(ctrl: LayerController, batch: Batch) -> float:
    params = list(ctrl.critic.parameters())
    loss = value_loss(ctrl.critic, batch)
    _apply(ctrl.critic_opt, params, loss, ctrl.tc.max_grad_norm)
    ctrl.refresh()
    return float(loss.detach())


def ppo_update(ctrl: LayerController, rng: np.random.Generator) -> dict:
    batch = build_batch(ctrl)
    if batch is None:
        return {}
    tc = ctrl.tc
    stats = {"actor": [], "critic": []}
    for _ in range(tc.ppo_epochs):
        order = rng.permutation(batch.num_chunks)
        for part in np.array_split(order, min(tc.num_minibatches, batch.num_chunks)):
            mb = batch.select(torch.as_tensor(part))
            stats["actor"].append(update_actor(ctrl, mb))
            stats["critic"].append(update_critic(ctrl, mb))
    return {k: float(np.mean(v)) for k, v in stats.items()}


# ---------------------------------------------------------------- controller as an update policy



class HierarchicalController(UpdatePolicy):
    """Three layered controllers (or one joint controller) acting as an update policy."""

    name = "edgetimer"

    def __init__(self, cfg: ClusterConfig, tc: TrainConfig = TrainConfig(),
                 coeffs: RW.RewardCoefficients = RW.RewardCoefficients(), dtype=torch.float32):
        self.cfg = cfg
        self.tc = tc
        self.coeffs = coeffs
        self.training = False
        self.deterministic = True
        self.rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 2]))
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([tc.seed, 1]).generate_state(1)[0]))
        n, ns = cfg.num_edges, cfg.num_services
        if tc.decomposed:
            self.layers = {k: LayerController(k, n, obs_dim(k, ns), 2, tc, gen, dtype) for k in (1, 2, 3)}
        else:
            d = sum(obs_dim(k, ns) for k in (1, 2, 3))
            self.layers = {JOINT: LayerController(JOINT, n, d, len(JOINT_BITS), tc, gen, dtype)}
        self.reset(None)

    @property
    def guarded(self) -> bool:
        return True  # masks its own unsafe holds (or deliberately does not)

    def reset(self, env) -> None:
        n, h = self.cfg.num_edges, self.tc.hidden
        self.h_actor = {k: np.zeros((n, h)) for k in self.layers}
        self.h_critic = {k: np.zeros((n, h)) for k in self.layers}
        self._pending: dict[int, list] = {}
        self._idle = None
        self._joint_bits = None
        self.unsafe_taken = 0

    def _hold_unsafe(self, layer: int, ctx: SlotContext) -> np.ndarray:
        if self.tc.safe:
            return unsafe_hold(layer, ctx)
        if ctx.first:
            return np.ones(ctx.cfg.num_edges, dtype=bool)
        return np.zeros(ctx.cfg.num_edges, dtype=bool)

    def decide(self, layer: int, ctx: SlotContext) -> np.ndarray:
        n = ctx.cfg.num_edges
        if layer == 1:
            self._idle = idle_edges(ctx.env) if self.tc.skip_idle else np.zeros(n, dtype=bool)
        if layer in self.tc.static_layers:
            return np.ones(n, dtype=int)
        if not self.tc.decomposed:
            if layer == 1:
                self._joint_bits = self._decide_joint(ctx)
            bits = self._joint_bits[:, layer - 1].copy()
            if self.tc.safe and layer > 1:
                # all three bits are drawn before layer 1 executes, so unsafe holds are overridden here
                bits |= unsafe_hold(layer, ctx).astype(int)
            return bits
        active = ~self._idle
        if not active.any():
            return np.zeros(n, dtype=int)
        ctrl = self.layers[layer]
        obs = observe_all(layer, ctx, self.tc.obs_workload_scale)
        unsafe = self._hold_unsafe(layer, ctx)
        h_prev = self.h_actor[layer]
        actions, logits, h_next = ctrl.act(obs, h_prev, unsafe, self.rng, self.deterministic and not self.training)
        self.h_actor[layer] = np.where(active[:, None], h_next, h_prev)
        if not self.tc.safe:
            real_unsafe = unsafe_hold(layer, ctx) if layer > 1 else np.zeros(n, dtype=bool)
            self.unsafe_taken += int(np.sum(active & real_unsafe & (actions == HOLD)))
        if self.training:
            self._record(layer, ctrl, obs, actions, logits, unsafe, active, h_prev, ctx.t)
        return np.where(active, actions, HOLD).astype(int)

    def _decide_joint(self, ctx: SlotContext) -> np.ndarray:
        n = ctx.cfg.num_edges
        active = ~self._idle
        bits = np.zeros((n, 3), dtype=int)
        if not active.any():
            return bits
        ctrl = self.layers[JOINT]
        obs = np.concatenate([observe_all(k, ctx, self.tc.obs_workload_scale) for k in (1, 2, 3)], axis=1)
        h_prev = self.h_actor[JOINT]
        actions, logits, h_next = ctrl.act(obs, h_prev, np.zeros(n, dtype=bool), self.rng,
                                           self.deterministic and not self.training)
        self.h_actor[JOINT] = np.where(active[:, None], h_next, h_prev)
        if self.training:
            self._record(JOINT, ctrl, obs, actions, logits, np.zeros(n, dtype=bool), active, h_prev, ctx.t)
        bits[active] = JOINT_BITS[actions[active]]
        return bits

    def _record(self, layer, ctrl, obs, actions, logits, unsafe, active, h_prev, t):
        values, hc = ctrl.value(obs, self.h_critic[layer])
        hc_prev = self.h_critic[layer]
        self.h_critic[layer] = np.where(active[:, None], hc, hc_prev)
        logp = logits - logits.max(-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
        recs = []
        for i in np.flatnonzero(active):
            recs.append((i, Transition(
                obs=obs[i].copy(),
                global_obs=obs.reshape(-1).copy() if self.tc.centralized else obs[i].copy(),
                action=int(actions[i]),
                masked=bool(unsafe[i]),
                logp=float(logp[i, actions[i]]),
                value=float(values[i]),
                h_actor=h_prev[i].copy(),
                h_critic=hc_prev[i].copy(),
                slot=t,
            )))
        self._pending[layer] = recs

    def finish_slot(self, ctx: SlotContext, ledger: SlotLedger) -> None:
        if not self.training:
            return
        if self.tc.decomposed:
            rs = dict(zip((1, 2, 3), RW.layer_rewards(ledger, self.coeffs)))
        else:
            rs = {JOINT: ledger.total_profit}
        for layer, recs in self._pending.items():
            for i, tr in recs:
                tr.reward = rs[layer]
                self.layers[layer].buffer[i].append(tr)
        self._pending = {}

    def checkpoint_bytes(self, config_hash: str = "") -> bytes:
        buf = io.BytesIO()
        torch.save({
            "version": CHECKPOINT_VERSION,
            "config_hash": config_hash,
            "train_config": self.tc.to_dict(),
            "layers": {k: c.state_dict() for k, c in self.layers.items()},
        }, buf)
        return buf.getvalue()

    def load_checkpoint_bytes(self, data: bytes, config_hash: Optional[str] = None) -> None:
        blob = torch.load(io.BytesIO(data), weights_only=False)
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
        if config_hash is not None and blob["config_hash"] != config_hash:
            raise ValueError("checkpoint was trained under a different config")
        for k, s in blob["layers"].items():
            self.layers[int(k)].load_state_dict(s)


def config_hash(*parts) -> str:
    text = json.dumps([p if isinstance(p, (dict, list, str, int, float)) else str(p) for p in parts], sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_controller(data: bytes, cfg: ClusterConfig, coeffs=RW.RewardCoefficients(),
                    config_hash: Optional[str] = None) -> HierarchicalController:
    blob = torch.load(io.BytesIO(data), weights_only=False)
    tc_dict = dict(blob["train_config"])
    tc_dict["static_layers"] = tuple(tc_dict["static_layers"])
    ctrl = HierarchicalController(cfg, TrainConfig(**tc_dict), coeffs)
    ctrl.load_checkpoint_bytes(data, config_hash)
    return ctrl


# ---------------------------------------------------------------- training / inference

@dataclass
class EpochStats:
    epoch: int
    profit: float
    layer_reward: dict
    unsafe: int  # tasks whose dispatch hit a missing service
    seconds: float
    update_rate: dict = field(default_factory=dict)  # layer -> share of (slot, edge) pairs updated
    unsafe_actions: int = 0  # holds chosen while holding was infeasible


@dataclass
class TrainResult:
    controller: HierarchicalController
    curves: list[EpochStats] = field(default_factory=list)


def train(cfg: ClusterConfig, script: WorkloadScript, rule_set: R.RuleSet, tc: TrainConfig = TrainConfig(),
          coeffs: RW.RewardCoefficients = RW.RewardCoefficients(), params: R.RuleParams = R.RuleParams(),
          controller: Optional[HierarchicalController] = None,
          log: Optional[Callable[[EpochStats], None]] = None) -> TrainResult:
    """On-policy training: each epoch rolls the whole script once, then updates every controller."""
    torch.set_num_threads(1)
    ctrl = controller or HierarchicalController(cfg, tc, coeffs)
    update_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 3]))
    result = TrainResult(ctrl)
    for epoch in range(tc.epochs):
        tic = time.perf_counter()
        ctrl.training = True
        for c in ctrl.layers.values():
            c.clear()
        ep = run_episode(cfg, script, rule_set, ctrl, params, safety=tc.safe)
        if not math.isfinite(ep.total_profit):
            raise TrainingDiverged(f"epoch {epoch}: profit is not finite")
        layer_reward = {}
        for k, c in ctrl.layers.items():
            rs = [t.reward for traj in c.buffer for t in traj]
            layer_reward[k] = float(np.mean(rs)) if rs else 0.0
        for k in sorted(ctrl.layers):
            ppo_update(ctrl.layers[k], update_rng)
        ctrl.training = False
        rates = {k: float(ep.bits[:, k - 1].mean()) for k in (1, 2, 3)}
        stats = EpochStats(epoch, ep.total_profit, layer_reward, ep.unsafe, time.perf_counter() - tic, rates,
                           ctrl.unsafe_taken)
        result.curves.append(stats)
        if log:
            log(stats)
    ctrl.training = False
    return result


def infer(policy: UpdatePolicy, cfg: ClusterConfig, script: WorkloadScript, rule_set: R.RuleSet,
          params: R.RuleParams = R.RuleParams(), safety: Optional[bool] = None) -> EpisodeResult:
    """Deterministic rollout recording per-slot decision latency."""
    torch.set_num_threads(1)
    if isinstance(policy, HierarchicalController):
        policy.training = False
        policy.deterministic = True
        if safety is None:
            safety = policy.tc.safe
    return run_episode(cfg, script, rule_set, policy, params, safety=True if safety is None else safety)
