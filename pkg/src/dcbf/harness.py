"""Experiment orchestration: seeded episode runner, metric aggregation, and
plot-data export (metric tables and barrier-field heatmap grids).

An episode is violated if any object's tilt ever meets the safety threshold,
not just at the end.  Goals are sampled on the table half far from the EE and
rejection-sampled so the straight-line path would touch at least one object.
Episodes whose executed action is zero for ``stall_patience`` consecutive
steps terminate early as not-reached.
"""

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import sim
from .baselines import APFConfig, DoNothingPolicy, PolicyObs, make_policy, sample_goal
from .errors import ConfigError, MissingCheckpoint
from .filter import FilterConfig, WindowTracker, filter_action, relevant_objects


@dataclass
class EpisodeResult:
    reached: bool
    violated: bool
    final_distance: float
    max_tilt_deg: float
    steps_used: int
    seed: int
    stalled: bool
    reports: list = None

    @property
    def safe_and_success(self):
        return self.reached and not self.violated


@dataclass(frozen=True)
class ExperimentConfig:
    object_counts: tuple = (4, 10, 20, 40)
    episodes: int = 100
    policies: tuple = ("donothing", "backstep", "apf", "dcbf")
    step_cap: int = 400
    master_seed: int = 0
    world: sim.WorldConfig = field(default_factory=sim.WorldConfig)
    goal_tolerance: float = 0.02
    stall_patience: int = 50
    threshold_deg: float = sim.DEFAULT_SAFETY_THRESHOLD_DEG
    history_len: int = 8

    def validate(self):
        if not self.object_counts or min(self.object_counts) < 1:
            raise ConfigError("object_counts must be non-empty positive")
        if self.episodes < 1 or self.step_cap < 1:
            raise ConfigError("episodes and step_cap must be >= 1")
        return self


def episode_seed(master_seed, n_objects, episode):
    """World seed for one experiment cell; shared across policies."""
    ss = np.random.SeedSequence([int(master_seed), int(n_objects), int(episode)])
    return int(ss.generate_state(1, np.uint64)[0])


def run_episode(world_config, policy_id, seed, goal=None, barrier=None,
                filter_cfg=None, apf_cfg=None, step_cap=400,
                threshold_deg=sim.DEFAULT_SAFETY_THRESHOLD_DEG, history_len=8,
                stall_patience=50, goal_tolerance=0.02, collect_reports=False,
                world=None):
    """Roll one seeded episode under a policy, optionally filter-wrapped.

    policy_id "dcbf" uses the straight-to-goal nominal controller wrapped by
    the sampling safety filter and requires ``barrier``.  A pre-built world
    (scripted scenario) can be passed instead of spawning from the seed.
    """
    if world is None:
        world = sim.spawn_world(world_config, seed)
    if goal is None:
        goal_rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        goal = sample_goal(world, goal_rng, tolerance=goal_tolerance)
    use_filter = policy_id.startswith("dcbf")
    if use_filter:
        if barrier is None:
            raise MissingCheckpoint(f"policy {policy_id!r} needs a trained barrier")
        nominal = DoNothingPolicy(goal)
        fcfg = (filter_cfg or FilterConfig()).validate()
    else:
        nominal = make_policy(policy_id, goal, apf_cfg)
        fcfg = (filter_cfg or FilterConfig()).validate()

    tracker = WindowTracker(world, history_len)
    threshold_rad = math.radians(threshold_deg)
    violated = False
    stalled = False
    max_tilt = 0.0
    stall_run = 0
    reports = [] if collect_reports else None
    steps = 0
    prev_ee = None
    reached = False

    while True:
        dist = math.hypot(world.ee[0] - goal.gx, world.ee[1] - goal.gy)
        if dist <= goal.tolerance:
            reached = True
            break
        if steps >= step_cap:
            break
        scene = tracker.scene(world, prev_waypoint=prev_ee)
        rel = relevant_objects(scene, fcfg)
        tilt_rel = float(np.degrees(np.max(world.theta[rel]))) if rel.size else 0.0
        obs = PolicyObs(robot=world.ee.copy(),
                        objects_xy=world.pos[~world.fallen].copy(),
                        max_tilt_deg=tilt_rel,
                        max_step=world_config.max_step,
                        obj_radius=world_config.obj_radius)
        u = nominal.act(obs)
        if use_filter:
            u, report = filter_action(barrier, scene, u, fcfg)
            if reports is not None:
                reports.append(report)
        prev_ee = world.ee.copy()
        world.step(u)
        tracker.update(world)
        steps += 1
        if world.n_objects:
            top = float(np.max(world.theta))
            max_tilt = max(max_tilt, math.degrees(top))
            if top >= threshold_rad:
                violated = True
        if math.hypot(u[0], u[1]) == 0.0:
            stall_run += 1
            if stall_run >= stall_patience:
                stalled = True
                break
        else:
            stall_run = 0

    final_distance = math.hypot(world.ee[0] - goal.gx, world.ee[1] - goal.gy)
    return EpisodeResult(reached=reached, violated=violated,
                         final_distance=final_distance, max_tilt_deg=max_tilt,
                         steps_used=steps, seed=seed, stalled=stalled,
                         reports=reports)


def run_experiment(cfg, barriers=None, filter_cfg=None, apf_cfg=None):
    """Per (policy x object count) metrics over seeded episode grids.

    barriers maps dcbf-flavored policy ids to BarrierModel instances.  Every
    policy sees the same worlds and goals within a cell.
    """
    cfg.validate()
    barriers = barriers or {}
    for pid in cfg.policies:
        if pid.startswith("dcbf") and pid not in barriers:
            raise MissingCheckpoint(f"no checkpoint supplied for policy {pid!r}")
    rows = []
    for count in cfg.object_counts:
        world_cfg = replace(cfg.world, n_objects=count)
        for pid in cfg.policies:
            results = []
            for ep in range(cfg.episodes):
                results.append(run_episode(
                    world_cfg, pid, episode_seed(cfg.master_seed, count, ep),
                    barrier=barriers.get(pid), filter_cfg=filter_cfg,
                    apf_cfg=apf_cfg, step_cap=cfg.step_cap,
                    threshold_deg=cfg.threshold_deg,
                    history_len=cfg.history_len,
                    stall_patience=cfg.stall_patience,
                    goal_tolerance=cfg.goal_tolerance))
            rows.append(summarize_cell(pid, count, results))
    return rows


def summarize_cell(policy_id, n_objects, results):
    n = len(results)
    violating = [r.max_tilt_deg for r in results if r.violated]
    return {
        "policy": policy_id,
        "n_objects": n_objects,
        "episodes": n,
        "safe_rate": sum(not r.violated for r in results) / n,
        "reach_rate": sum(r.reached for r in results) / n,
        "safe_success_rate": sum(r.safe_and_success for r in results) / n,
        "mean_final_distance": float(np.mean([r.final_distance for r in results])),
        "mean_max_tilt_violating": float(np.mean(violating)) if violating else None,
        "mean_steps": float(np.mean([r.steps_used for r in results])),
        "stall_rate": sum(r.stalled for r in results) / n,
    }


_EXPORT_COLUMNS = ("policy", "n_objects", "episodes", "safe_rate", "reach_rate",
                   "safe_success_rate", "mean_final_distance",
                   "mean_max_tilt_violating", "mean_steps", "stall_rate")


def export_table(rows, base_path, formats=("csv", "txt")):
    """Write the metrics table as CSV and/or aligned text; returns the paths."""
    base = str(base_path)
    parent = os.path.dirname(os.path.abspath(base))
    os.makedirs(parent, exist_ok=True)
    paths = []
    if "csv" in formats:
        path = base + ".csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=_EXPORT_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k) for k in _EXPORT_COLUMNS})
        paths.append(path)
    if "txt" in formats:
        path = base + ".txt"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(table_to_text(rows))
            fh.write("\n")
        paths.append(path)
    return paths


def table_to_text(rows):
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    widths = {c: len(c) for c in _EXPORT_COLUMNS}
    for row in rows:
        for c in _EXPORT_COLUMNS:
            widths[c] = max(widths[c], len(fmt(row.get(c))))
    lines = ["  ".join(c.ljust(widths[c]) for c in _EXPORT_COLUMNS)]
    for row in rows:
        lines.append("  ".join(fmt(row.get(c)).ljust(widths[c]) for c in _EXPORT_COLUMNS))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# barrier-field heatmaps


def heatmap_grid(barrier, scene, resolution, bounds=None):
    """Global barrier value over a grid of candidate EE positions.

    Returns (xs, ys, grid) with grid[j, i] the value at (xs[i], ys[j]),
    evaluated against the current object histories of the scene.
    """
    if resolution < 2:
        raise ConfigError("resolution must be >= 2")
    cfg = scene.config
    lo, hi = (0.0, cfg.table_side) if bounds is None else bounds
    xs = np.linspace(lo, hi, resolution)
    ys = np.linspace(lo, hi, resolution)
    live = np.flatnonzero(~scene.fallen)
    if live.size == 0:
        return xs, ys, np.full((resolution, resolution), np.inf)
    gx, gy = np.meshgrid(xs, ys)
    points = np.column_stack([gx.ravel(), gy.ravel()])
    table = barrier.value_table(scene.windows[live][:, 1:, :], points)
    return xs, ys, np.min(table, axis=1).reshape(resolution, resolution)


def export_heatmap(path, xs, ys, grid):
    """Dump a heatmap grid as x,y,value CSV rows."""
    os.makedirs(os.path.dirname(os.path.abspath(str(path))), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "global_barrier"])
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(grid[j, i]))])
    return str(path)
