"""Replication harness: T-sweeps over seeded episodes, loss aggregation,
CSV/JSON outputs, and regret-scaling slopes.

Episodes are the unit of parallelism; the reduction is order-independent
(records are sorted by (policy, T, replicate) before stable summation), so
parallel and serial runs of the same plan produce identical aggregates.
"""

import os
import csv
import json
import math
import time
import subprocess
import numpy as np
from dataclasses import dataclass, field
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

from .instance import Instance, instance_from_dict, load_instance
from .fluid import solve_fluid, FluidSolution
from .sim import run_episode, percentage_loss, mix64, fold_name
from .pdnrm import PdNrmPolicy, PdNrmConfig, config_from_dict, constants_tuned
from .baselines import ClairvoyantPolicy, ExploreThenCommitPolicy, EtcConfig

POLICY_NAMES = ("pdnrm", "clairvoyant", "etc")
SUMMARY_HEADER = ["policy", "T", "mean_loss", "stderr", "mean_revenue",
                  "mean_shutoff", "wall_ms"]
EPISODES_HEADER = ["policy", "T", "replicate", "seed", "revenue", "loss", "shutoff"]


@dataclass(frozen=True)
class BenchPlan:
    instance: Instance
    policies: tuple
    T_grid: tuple
    replications: int
    base_seed: int
    output_dir: Optional[str] = None
    pdnrm_config: Optional[dict] = None     # JSON-style doc, resolved per horizon
    etc_config: Optional[EtcConfig] = None
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        grid = tuple(int(t) for t in self.T_grid)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("T_grid must be strictly increasing")
        object.__setattr__(self, "T_grid", grid)
        object.__setattr__(self, "policies", tuple(self.policies))
        for name in self.policies:
            if name not in POLICY_NAMES:
                raise ValueError(f"unknown policy {name!r}; choose from {POLICY_NAMES}")


@dataclass
class EpisodeResult:
    policy: str
    T: int
    replicate: int
    seed: int
    revenue: float
    loss: float
    shutoff: int          # shutoff period, or T when the market stayed open
    fingerprint: str
    inventory_ok: bool
    shutoff_ok: bool
    dual_updates: int
    max_loops_per_epoch: int
    wall_ms: float


@dataclass
class BenchSummary:
    plan: BenchPlan
    fluid: FluidSolution
    rows: list = field(default_factory=list)       # per (policy, T) dicts
    episodes: list = field(default_factory=list)   # EpisodeResult, sorted
    errors: list = field(default_factory=list)     # failed episodes, recorded not fatal

    def row(self, policy: str, T: int) -> dict:
        for r in self.rows:
            if r["policy"] == policy and r["T"] == int(T):
                return r
        raise KeyError(f"no summary row for ({policy}, {T})")


def episode_seed(base_seed: int, policy: str, T: int, replicate: int) -> int:
    return mix64(fold_name(base_seed, policy), T, replicate)


def build_policy(name: str, instance: Instance, fluid: FluidSolution,
                 pdnrm_config: Optional[dict] = None,
                 etc_config: Optional[EtcConfig] = None):
    if name == "pdnrm":
        if pdnrm_config is None:
            cfg = constants_tuned(instance.N, instance.T)
        elif isinstance(pdnrm_config, PdNrmConfig):
            cfg = pdnrm_config
        else:
            cfg = config_from_dict(pdnrm_config, instance=instance, T=instance.T)
        return PdNrmPolicy(instance, cfg)
    if name == "clairvoyant":
        return ClairvoyantPolicy(instance, fluid)
    if name == "etc":
        return ExploreThenCommitPolicy(instance, etc_config)
    raise ValueError(f"unknown policy {name!r}")


def _count_events(events):
    epochs = 0
    loops_per_epoch = {}
    for ev in events:
        if ev.get("kind") == "epoch":
            epochs += 1
        elif ev.get("kind") == "loop":
            loops_per_epoch[ev["s"]] = loops_per_epoch.get(ev["s"], 0) + 1
    max_loops = max(loops_per_epoch.values(), default=0)
    return epochs, max_loops


def _run_task(task: dict) -> dict:
    try:
        return _run_task_inner(task)
    except Exception as exc:  # recorded per episode, not fatal to the sweep
        return {
            "policy": task["policy"],
            "T": task["T"],
            "replicate": task["replicate"],
            "seed": task["seed"],
            "error": f"{type(exc).__name__}: {exc}",
        }


def _run_task_inner(task: dict) -> dict:
    instance = instance_from_dict(task["instance"]).with_horizon(task["T"])
    fluid = FluidSolution(
        d_star=np.asarray(task["fluid"]["d_star"]),
        p_star=np.asarray(task["fluid"]["p_star"]),
        lambda_star=np.asarray(task["fluid"]["lambda_star"]),
        value=task["fluid"]["value"],
        binding_mask=np.asarray(task["fluid"]["binding_mask"]),
        duality_gap=task["fluid"]["duality_gap"],
    )
    policy = build_policy(task["policy"], instance, fluid,
                          pdnrm_config=task["pdnrm_config"],
                          etc_config=EtcConfig(**task["etc_config"])
                          if task["etc_config"] else None)
    t0 = time.perf_counter()
    trace = run_episode(instance, policy, task["seed"])
    wall_ms = (time.perf_counter() - t0) * 1000.0
    epochs, max_loops = _count_events(trace.events)
    return {
        "policy": task["policy"],
        "T": task["T"],
        "replicate": task["replicate"],
        "seed": task["seed"],
        "revenue": trace.total_revenue,
        "loss": percentage_loss(instance, trace, fluid.value),
        "shutoff": trace.shutoff_period if trace.shutoff_period is not None else task["T"],
        "fingerprint": trace.fingerprint,
        "inventory_ok": trace.inventory_ok,
        "shutoff_ok": trace.shutoff_ok,
        "dual_updates": epochs,
        "max_loops_per_epoch": max_loops,
        "wall_ms": wall_ms,
    }


def run_bench(plan: BenchPlan) -> BenchSummary:
    """Execute the plan, aggregate, and (when output_dir is set) write
    summary.csv, episodes.csv, and run-metadata JSON."""
    fluid = solve_fluid(plan.instance)
    inst_doc = plan.instance.to_dict()
    fluid_doc = fluid.to_dict()
    etc_doc = None
    if plan.etc_config is not None:
        etc_doc = {
            "grid_points_per_axis": plan.etc_config.grid_points_per_axis,
            "exploration_fraction": plan.etc_config.exploration_fraction,
        }
    tasks = []
    for policy in plan.policies:
        for T in plan.T_grid:
            for rep in range(plan.replications):
                tasks.append({
                    "instance": inst_doc,
                    "fluid": fluid_doc,
                    "policy": policy,
                    "T": int(T),
                    "replicate": rep,
                    "seed": episode_seed(plan.base_seed, policy, int(T), rep),
                    "pdnrm_config": plan.pdnrm_config,
                    "etc_config": etc_doc,
                })

    wall_start = time.perf_counter()
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            raw = list(pool.map(_run_task, tasks, chunksize=1))
    else:
        raw = [_run_task(t) for t in tasks]
    raw.sort(key=lambda r: (r["policy"], r["T"], r["replicate"]))
    errors = [r for r in raw if "error" in r]
    episodes = [EpisodeResult(**r) for r in raw if "error" not in r]

    rows = []
    for policy in plan.policies:
        for T in plan.T_grid:
            cell = [e for e in episodes if e.policy == policy and e.T == T]
            if not cell:
                continue
            losses = [e.loss for e in cell]
            n = len(cell)
            mean_loss = math.fsum(losses) / n
            if n > 1:
                var = math.fsum((x - mean_loss) ** 2 for x in losses) / (n - 1)
                stderr = math.sqrt(var / n)
            else:
                stderr = 0.0
            rows.append({
                "policy": policy,
                "T": int(T),
                "mean_loss": mean_loss,
                "stderr": stderr,
                "mean_revenue": math.fsum(e.revenue for e in cell) / n,
                "mean_shutoff": math.fsum(e.shutoff for e in cell) / n,
                "wall_ms": math.fsum(e.wall_ms for e in cell),
            })
    summary = BenchSummary(plan=plan, fluid=fluid, rows=rows, episodes=episodes,
                           errors=errors)

    if plan.output_dir:
        os.makedirs(plan.output_dir, exist_ok=True)
        write_summary_csv(summary, os.path.join(plan.output_dir, "summary.csv"))
        write_episodes_csv(summary, os.path.join(plan.output_dir, "episodes.csv"))
        meta = {
            "git_hash": _git_hash(),
            "wall_seconds": time.perf_counter() - wall_start,
            "episode_errors": errors,
            "fluid": fluid_doc,
            "plan": {
                "instance": inst_doc,
                "policies": list(plan.policies),
                "T_grid": list(plan.T_grid),
                "replications": plan.replications,
                "base_seed": plan.base_seed,
                "pdnrm_config": plan.pdnrm_config,
                "etc_config": etc_doc,
                "workers": plan.workers,
            },
            "loss_denominator": "fluid upper bound T * phi(d*)",
        }
        with open(os.path.join(plan.output_dir, "run-metadata.json"), "w") as fh:
            json.dump(meta, fh, indent=2)
            fh.write("\n")
    return summary


def loglog_slope(summary: BenchSummary, policy: str) -> float:
    """Least-squares slope of ln(mean regret) against ln(T)."""
    points = []
    for row in summary.rows:
        if row["policy"] != policy:
            continue
        bound = row["T"] * summary.fluid.value
        regret = bound - row["mean_revenue"]
        if regret > 0:
            points.append((math.log(row["T"]), math.log(regret)))
    if len(points) < 3:
        raise ValueError("need at least 3 horizons with positive mean regret")
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    return float(np.polyfit(x, y, 1)[0])


def write_summary_csv(summary: BenchSummary, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for row in summary.rows:
            writer.writerow([
                row["policy"], row["T"],
                format(row["mean_loss"], ".17g"),
                format(row["stderr"], ".17g"),
                format(row["mean_revenue"], ".17g"),
                format(row["mean_shutoff"], ".17g"),
                format(row["wall_ms"], ".3f"),
            ])


def write_episodes_csv(summary: BenchSummary, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODES_HEADER)
        for e in summary.episodes:
            writer.writerow([
                e.policy, e.T, e.replicate, e.seed,
                format(e.revenue, ".17g"),
                format(e.loss, ".17g"),
                e.shutoff,
            ])


def _git_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


def plan_from_dict(doc: dict, base_dir: str = ".") -> BenchPlan:
    try:
        inst = doc["instance"]
        if isinstance(inst, str):
            path = inst if os.path.isabs(inst) else os.path.join(base_dir, inst)
            instance = load_instance(path)
        else:
            instance = instance_from_dict(inst)
        etc_cfg = None
        if doc.get("etc_config"):
            etc_cfg = EtcConfig(**doc["etc_config"])
        return BenchPlan(
            instance=instance,
            policies=tuple(doc.get("policies", ["pdnrm"])),
            T_grid=tuple(doc["T_grid"]),
            replications=int(doc["replications"]),
            base_seed=int(doc["base_seed"]),
            output_dir=doc.get("output_dir"),
            pdnrm_config=doc.get("pdnrm_config"),
            etc_config=etc_cfg,
            workers=int(doc.get("workers", 1)),
        )
    except KeyError as exc:
        raise ValueError(f"plan document missing key {exc}") from exc


def load_plan(path: str) -> BenchPlan:
    with open(path) as fh:
        return plan_from_dict(json.load(fh), base_dir=os.path.dirname(os.path.abspath(path)))
