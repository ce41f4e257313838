"""Experiment driver: ``python -m mtsched <subcommand> ...``.

Subcommands: train, eval, grid, ablate, smoke. Every run reads one JSON
experiment file (``--config``); command-line flags override its fields.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import hdrl as H
from . import rewards as RW
from . import rules as R
from . import timescale as TS
from .domain import ClusterConfig, ConfigError, checked, grid_distances, state_violations
from .workload import (
    PATTERNS,
    TraceError,
    WorkloadScript,
    bursty_profile,
    diurnal_profile,
    ingest_trace,
    make_pattern,
    synth_workload,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_DIVERGED = 5
EXIT_SMOKE = 6

METHODS = ("edgetimer", "sst", "smt", "dt", "wt")


class UsageError(Exception):
    pass


class MissingCheckpoint(Exception):
    pass


# ---------------------------------------------------------------- seeds

def stream_seed(root: int, name: str) -> int:
    """Independent integer seed for the named stream derived from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------- experiment config

@dataclass(frozen=True)
class WorkloadSpec:
    source: str = "synthetic"  # synthetic | trace
    trace: str = ""
    horizon: int = 1000
    profile: str = "bursty"  # bursty | diurnal | constant
    rate: float = 0.3  # constant profile
    base: float = 0.02
    peak: float = 0.5
    mean_on: int = 40
    mean_off: int = 120
    cpu_choices: tuple[float, ...] = (0.25, 0.5)
    duration_range: tuple[int, int] = (1, 2)
    budget_scale: Optional[float] = None


@dataclass(frozen=True)
class Experiment:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    rules: str = "AM-MRP-EA"
    pattern: str = "D"
    seed: int = 0
    train: H.TrainConfig = field(default_factory=H.TrainConfig)
    rewards: RW.RewardCoefficients = field(default_factory=RW.RewardCoefficients)
    rule_params: R.RuleParams = field(default_factory=R.RuleParams)
    smt_periods: tuple[int, ...] = TS.SMT_PERIODS
    dt_grid: tuple[float, ...] = TS.DT_GRID
    wt_grid: tuple[float, ...] = TS.WT_GRID

    @property
    def rule_set(self) -> R.RuleSet:
        return R.RuleSet.parse(self.rules)

    def train_config(self) -> H.TrainConfig:
        return replace(self.train, seed=stream_seed(self.seed, "controller"))

    def to_dict(self) -> dict:
        return {
            "cluster": self.cluster.to_dict(),
            "workload": _plain(asdict(self.workload)),
            "rules": self.rules,
            "pattern": self.pattern,
            "seed": self.seed,
            "train": self.train.to_dict(),
            "rewards": asdict(self.rewards),
            "rule_params": _plain(asdict(self.rule_params)),
            "smt_periods": list(self.smt_periods),
            "dt_grid": list(self.dt_grid),
            "wt_grid": list(self.wt_grid),
        }

    def digest(self) -> str:
        return H.config_hash(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError([f"{where}: unknown field {k!r}" for k in unknown])
    kw = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"{where}: {exc}"]) from exc


def experiment_from_dict(data: dict) -> Experiment:
    top = {f.name for f in fields(Experiment)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError([f"unknown top-level field {k!r}" for k in unknown])
    kw = {}
    if "cluster" in data:
        try:
            kw["cluster"] = checked(ClusterConfig.from_dict(data["cluster"]))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError([f"cluster: {exc}"]) from exc
    sections = {"workload": WorkloadSpec, "train": H.TrainConfig, "rewards": RW.RewardCoefficients,
                "rule_params": R.RuleParams}
    for name, cls in sections.items():
        if name in data:
            kw[name] = _build(cls, data[name], name)
    for name in ("rules", "pattern", "seed"):
        if name in data:
            kw[name] = data[name]
    for name in ("smt_periods", "dt_grid", "wt_grid"):
        if name in data:
            kw[name] = tuple(data[name])
    exp = Experiment(**kw)
    _check_experiment(exp)
    return exp


def _check_experiment(exp: Experiment) -> None:
    errors = []
    try:
        exp.rule_set
    except ValueError as exc:
        errors.append(str(exc))
    if exp.pattern not in PATTERNS:
        errors.append(f"pattern must be one of {PATTERNS}")
    if exp.workload.source not in ("synthetic", "trace"):
        errors.append("workload.source must be 'synthetic' or 'trace'")
    if exp.workload.profile not in ("bursty", "diurnal", "constant"):
        errors.append("workload.profile must be bursty, diurnal or constant")
    if exp.workload.horizon <= 0:
        errors.append("workload.horizon must be positive")
    if exp.train.critic_target not in ("mc", "gae"):
        errors.append("train.critic_target must be 'mc' or 'gae'")
    if errors:
        raise ConfigError(errors)


def load_experiment(path: Optional[str]) -> Experiment:
    if not path:
        return Experiment()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError([f"config file {path} not found"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file {path}: {exc}"]) from exc
    return experiment_from_dict(data)


def acceptance_experiment(seed: int = 0) -> Experiment:
    """The small bursty three-edge setup used by the directional acceptance runs."""
    cluster = ClusterConfig(num_edges=3, num_services=3, service_mem_footprint=(3.0, 3.0, 3.0),
                            distance=grid_distances(3, 5.0, 50.0))
    train = H.TrainConfig(epochs=30, ppo_epochs=10, num_minibatches=4, init_update_bias=2.0)
    return Experiment(cluster=cluster, seed=seed, train=train, rewards=RW.RewardCoefficients(epsilon_clamp=0.1))


def build_script(exp: Experiment) -> WorkloadScript:
    """Pattern-A script from the workload section, then the configured pattern."""
    cfg, w = exp.cluster, exp.workload
    if w.source == "trace":
        base = ingest_trace(w.trace, cfg, w.budget_scale, seed=stream_seed(exp.seed, "edges"))
    else:
        if w.profile == "bursty":
            rates = bursty_profile(w.horizon, cfg.num_edges, seed=stream_seed(exp.seed, "profile"),
                                   base=w.base, peak=w.peak, mean_on=w.mean_on, mean_off=w.mean_off)
        elif w.profile == "diurnal":
            rates = diurnal_profile(w.horizon, low=w.base, high=w.peak)
        else:
            rates = w.rate
        base = synth_workload(cfg, w.horizon, rates, seed=stream_seed(exp.seed, "workload"),
                              cpu_choices=w.cpu_choices, duration_range=tuple(w.duration_range),
                              budget_scale=w.budget_scale)
    return make_pattern(base, exp.pattern, seed=stream_seed(exp.seed, "pattern"))


# ---------------------------------------------------------------- metrics

def metrics(results: dict[str, TS.EpisodeResult], reference: str = "edgetimer",
            unsafe_actions: Optional[dict] = None) -> list[dict]:
    """One summary row per method; profit normalized by the reference method's profit.

    ``unsafe_actions`` maps method to the number of infeasible holds it chose
    (methods behind the safety guard have none).
    """
    unsafe_actions = unsafe_actions or {}
    if not results or any(not r.ledgers for r in results.values()):
        raise ValueError("metrics need at least one non-empty episode")
    ref = reference if reference in results else next(iter(results))
    ref_profit = results[ref].total_profit
    rows = []
    for name, res in results.items():
        led = res.ledgers
        done_ok = sum(float(l.served.sum()) for l in led)
        done_late = sum(float(l.late.sum()) for l in led)
        n_ok = sum(1 for l in led for (_, d, b) in l.delays if d <= b)
        n_all = sum(len(l.delays) for l in led)
        total = res.total_profit
        rows.append({
            "method": name,
            "total_profit": round(total, 6),
            "normalized_profit": round(total / ref_profit, 6) if ref_profit else float("nan"),
            "revenue": round(sum(float(l.revenue.sum()) for l in led), 6),
            "placement_cost": round(sum(float((l.actions[0] * l.c1).sum()) for l in led), 6),
            "offloading_cost": round(sum(float((l.actions[1] * l.c2).sum()) for l in led), 6),
            "allocation_cost": round(sum(float((l.actions[2] * l.c3).sum()) for l in led), 6),
            "served_workload": round(done_ok, 6),
            "late_workload": round(done_late, 6),
            "completed_tasks": n_all,
            "within_budget_ratio": round(n_ok / n_all, 6) if n_all else 1.0,
            "updates_l1": int(res.bits[:, 0].sum()),
            "updates_l2": int(res.bits[:, 1].sum()),
            "updates_l3": int(res.bits[:, 2].sum()),
            "unsafe": res.unsafe,
            "unsafe_actions": int(unsafe_actions.get(name, 0)),
        })
    return rows


def delay_cdf(res: TS.EpisodeResult, num_services: int) -> dict:
    """Per-service empirical CDF of completion delay (slots)."""
    out = {}
    for s in range(num_services):
        d = np.sort([dl for l in res.ledgers for (sv, dl, _) in l.delays if sv == s])
        out[str(s)] = {"delay": d.tolist(), "cdf": (np.arange(1, len(d) + 1) / max(len(d), 1)).tolist()}
    return out


def update_timeline(res: TS.EpisodeResult) -> dict:
    """Slots at which each (layer, edge) actually updated."""
    t, _, n = res.bits.shape
    return {f"layer{k + 1}": {str(i): np.flatnonzero(res.bits[:, k, i]).tolist() for i in range(n)}
            for k in range(3)}


def latency_cdf(res: TS.EpisodeResult) -> dict:
    lat = np.sort(res.latency)
    return {"seconds": lat.tolist(), "cdf": (np.arange(1, len(lat) + 1) / max(len(lat), 1)).tolist(),
            "mean": float(lat.mean()) if len(lat) else 0.0, "max": float(lat.max()) if len(lat) else 0.0}


def _write_csv(path: Path, rows: Sequence[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def ledger_rows(results: dict[str, TS.EpisodeResult]) -> list[dict]:
    rows = []
    for name, res in results.items():
        for led in res.ledgers:
            for rec in led.records():
                rows.append({"method": name, **rec})
    return rows


def curve_rows(curves: Sequence[H.EpochStats]) -> list[dict]:
    rows = []
    for c in curves:
        for layer, r in sorted(c.layer_reward.items()):
            # the joint controller (layer 0) reports the mean rate over all three layers
            rate = c.update_rate.get(layer, float(np.mean(list(c.update_rate.values()))))
            rows.append({"epoch": c.epoch, "layer": layer, "mean_reward": r, "profit": c.profit,
                         "update_rate": rate, "unsafe": c.unsafe, "unsafe_actions": c.unsafe_actions})
    return rows


# ---------------------------------------------------------------- subcommands

def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def tune_baselines(exp: Experiment, script: WorkloadScript, methods=("sst", "smt", "dt", "wt")) -> dict:
    """Best parameters per baseline on ``script`` plus every evaluated grid point."""
    cfg, rs, rp = exp.cluster, exp.rule_set, exp.rule_params
    tuned, grid = {}, []
    if "sst" in methods:
        tuned["sst"] = None
    if "smt" in methods:
        best, best_p = None, -np.inf
        for triple in sorted(set(itertools.product(sorted(set(exp.smt_periods)), repeat=3))):
            p = TS.evaluate_profit(cfg, script, rs, TS.SMT(triple), rp)
            grid.append({"method": "smt", "params": "-".join(map(str, triple)), "profit": p})
            if p > best_p:
                best, best_p = triple, p
        tuned["smt"] = best
    for kind, values in (("dt", exp.dt_grid), ("wt", exp.wt_grid)):
        if kind not in methods:
            continue
        best, best_p = None, -np.inf
        for theta in sorted(values):
            p = TS.evaluate_profit(cfg, script, rs, TS.baseline_policy(kind, theta), rp)
            grid.append({"method": kind, "params": repr(float(theta)), "profit": p})
            if p > best_p:
                best, best_p = theta, p
        tuned[kind] = best
    return {"tuned": tuned, "grid": grid}


def _train(exp: Experiment, script: WorkloadScript, tc: H.TrainConfig) -> H.TrainResult:
    return H.train(exp.cluster, script, exp.rule_set, tc, exp.rewards, exp.rule_params,
                   log=lambda s: _log(f"epoch {s.epoch}: profit {s.profit:.1f} unsafe {s.unsafe}"))


def cmd_train(exp: Experiment, args) -> int:
    out = _outdir(args)
    script = build_script(exp)
    res = _train(exp, script, exp.train_config())
    (out / "checkpoint.bin").write_bytes(res.controller.checkpoint_bytes(exp.digest()))
    _write_csv(out / "curves.csv", curve_rows(res.curves))
    ep = H.infer(res.controller, exp.cluster, script, exp.rule_set, exp.rule_params)
    _write_csv(out / "metrics.csv", metrics({"edgetimer": ep}))
    _write_json(out / "experiment.json", exp.to_dict())
    return EXIT_OK


def _load_checkpoint(exp: Experiment, args) -> H.HierarchicalController:
    path = Path(args.checkpoint) if args.checkpoint else _outdir(args) / "checkpoint.bin"
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint {path} not found; run `train` first")
    try:
        return H.load_controller(path.read_bytes(), exp.cluster, exp.rewards, exp.digest())
    except (ValueError, RuntimeError, KeyError) as exc:
        raise MissingCheckpoint(f"checkpoint {path} unusable: {exc}") from exc


def run_methods(exp: Experiment, script: WorkloadScript, methods: Sequence[str],
                controller: Optional[H.HierarchicalController] = None) -> tuple[dict, dict]:
    """Roll every method over the same script; baselines tuned on that script first."""
    tuning = tune_baselines(exp, script, [m for m in methods if m != "edgetimer"])
    results = {}
    for m in methods:
        if m == "edgetimer":
            results[m] = H.infer(controller, exp.cluster, script, exp.rule_set, exp.rule_params)
        else:
            results[m] = H.infer(TS.baseline_policy(m, tuning["tuned"][m]), exp.cluster, script, exp.rule_set,
                                 exp.rule_params)
    return results, tuning


def _write_eval(out: Path, exp: Experiment, results: dict, tuning: dict,
                unsafe_actions: Optional[dict] = None) -> None:
    _write_csv(out / "ledger.csv", ledger_rows(results))
    rows = metrics(results, unsafe_actions=unsafe_actions)
    for r in rows:
        p = tuning["tuned"].get(r["method"]) if tuning else None
        r["params"] = "" if p is None else ("-".join(map(str, p)) if isinstance(p, tuple) else repr(float(p)))
    _write_csv(out / "metrics.csv", rows)
    plot = {
        "normalized_profit": {r["method"]: r["normalized_profit"] for r in rows},
        "delay_cdf": {m: delay_cdf(res, exp.cluster.num_services) for m, res in results.items()},
        "update_timeline": {m: update_timeline(res) for m, res in results.items()},
    }
    _write_json(out / "plotdata.json", plot)
    # wall-clock numbers are kept apart so the files above stay reproducible
    _write_json(out / "timing.json", {m: latency_cdf(res) for m, res in results.items()})


def cmd_eval(exp: Experiment, args) -> int:
    out = _outdir(args)
    methods = [args.method] if args.method else list(METHODS)
    controller = _load_checkpoint(exp, args) if "edgetimer" in methods else None
    script = build_script(exp)
    results, tuning = run_methods(exp, script, methods, controller)
    unsafe = {"edgetimer": controller.unsafe_taken} if controller is not None else {}
    _write_eval(out, exp, results, tuning, unsafe)
    for r in metrics(results):
        print(f"{r['method']:>10}  profit {r['total_profit']:.1f}  normalized {r['normalized_profit']:.3f}")
    return EXIT_OK


def cmd_grid(exp: Experiment, args) -> int:
    out = _outdir(args)
    methods = [args.method] if args.method and args.method != "edgetimer" else ["smt", "dt", "wt"]
    tuning = tune_baselines(exp, build_script(exp), methods)
    _write_csv(out / "grid.csv", tuning["grid"])
    for m, p in tuning["tuned"].items():
        print(f"{m}: {p}")
    return EXIT_OK


def cmd_ablate(exp: Experiment, args) -> int:
    out = _outdir(args)
    names = args.variants or [n for n in H.ABLATIONS if n != "full"]
    bad = [n for n in names if n not in H.ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation(s) {bad}; choose from {sorted(H.ABLATIONS)}")
    script = build_script(exp)
    results, curves, unsafe = {}, [], {}
    for name in names:
        tc = H.ablation_config(exp.train_config(), name)
        res = _train(exp, script, tc)
        results[name] = H.infer(res.controller, exp.cluster, script, exp.rule_set, exp.rule_params)
        unsafe[name] = res.controller.unsafe_taken
        curves += [{"variant": name, **r} for r in curve_rows(res.curves)]
    rows = metrics(results, reference="full", unsafe_actions=unsafe)
    _write_csv(out / "metrics.csv", rows)
    _write_csv(out / "curves.csv", curves)
    for r in rows:
        print(f"{r['method']:>18}  profit {r['total_profit']:.1f}  unsafe actions {r['unsafe_actions']}"
              f"  unsafe dispatches {r['unsafe']}")
    return EXIT_OK


def smoke(exp: Experiment, slots: int = 100) -> list[tuple[str, list[str]]]:
    """Run every rule combination under SST for ``slots`` slots; returns per-combo problems."""
    script = build_script(exp)
    script = WorkloadScript([e for e in script.events if e[0] < slots], min(slots, script.horizon), script.pattern_tag)
    report = []
    for rs in R.all_rule_sets():
        problems = []

        def check(ctx, ledger):
            problems.extend(state_violations(exp.cluster, ctx.placement, ctx.offload_target, ctx.allocation))

        try:
            TS.run_episode(exp.cluster, script, rs, TS.SST(), exp.rule_params, on_slot=check)
        except Exception as exc:  # report and keep going through the matrix
            problems.append(f"{type(exc).__name__}: {exc}")
        report.append((str(rs), problems))
    return report


def cmd_smoke(exp: Experiment, args) -> int:
    report = smoke(exp, args.slots)
    ok = sum(1 for _, p in report if not p)
    for name, problems in report:
        if problems:
            print(f"FAIL {name}: {problems[0]}")
    print(f"{ok}/{len(report)} combos complete")
    return EXIT_OK if ok == len(report) else EXIT_SMOKE


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment JSON file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--pattern", choices=PATTERNS)
    common.add_argument("--rules", help="rule triple such as AM-MRP-EA")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--out", default="runs/default")
    common.add_argument("--epochs", type=int, help="override train.epochs")
    common.add_argument("--preset", choices=("default", "acceptance"), default="default",
                        help="built-in experiment used when --config is absent")

    p = _Parser(prog="mtsched", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train the layered controllers")
    ev = sub.add_parser("eval", parents=[common], help="compare the controller with the baselines")
    ev.add_argument("--checkpoint")
    sub.add_parser("grid", parents=[common], help="tune the SMT/DT/WT baselines")
    ab = sub.add_parser("ablate", parents=[common], help="train and evaluate ablated controllers")
    ab.add_argument("variants", nargs="*")
    sm = sub.add_parser("smoke", parents=[common], help="run all 45 rule combinations briefly")
    sm.add_argument("--slots", type=int, default=100)
    return p


def resolve_experiment(args) -> Experiment:
    if args.config:
        exp = load_experiment(args.config)
    elif args.preset == "acceptance":
        exp = acceptance_experiment()
    else:
        exp = Experiment()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.pattern:
        over["pattern"] = args.pattern
    if args.rules:
        over["rules"] = args.rules
    if args.epochs is not None:
        over["train"] = replace(exp.train, epochs=args.epochs)
    exp = replace(exp, **over)
    _check_experiment(exp)
    return exp


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "grid": cmd_grid, "ablate": cmd_ablate, "smoke": cmd_smoke}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        exp = resolve_experiment(args)
        return COMMANDS[args.command](exp, args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return EXIT_USAGE
    except (ConfigError, TraceError) as exc:
        errs = getattr(exc, "errors", None) or [str(exc)]
        for e in errs:
            _log(f"config error: {e}")
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        _log(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except H.TrainingDiverged as exc:
        _log(f"training diverged: {exc}")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
