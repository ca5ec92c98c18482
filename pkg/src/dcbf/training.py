"""Barrier training: hinge losses on labeled pairs, plus the iterative
boundary-refinement loop that re-simulates near-boundary scenarios under the
barrier-maximizing control and fine-tunes on the relabeled outcomes.

Loss terms over a batch of labeled transition pairs:

  L_s = mean over safe pairs   of [ -B(current) ]+
  L_u = mean over unsafe pairs of [  B(current) ]+
  L_d = mean over all pairs    of [ (1 - gamma) B(current) - B(next) + sigma ]+
  L   = eta_s L_s + eta_u L_u + eta_d L_d

where ``current`` is the (r^t, O^{t-1}) element of the pair, ``next`` is
(r^{t+1}, O^t), and the pair's label reflects the object's ground-truth state
at t+1.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn, sim
from .data import SAFE, UNSAFE, _records_from_logs
from .errors import ConfigError, CorruptSnapshot, DegenerateDataset
from .filter import SceneObs
from .model import ArchSpec, BarrierModel, windows_to_features

SIGMA_CHOICES = (0.01, 0.02)   # robustness margins the pipeline is run with
REFINEMENT_STEPS = 4           # s: rollout length under the safest control


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.1           # linear class-K rate: gamma(h) = gamma * h
    sigma: float = 0.02          # robustness margin
    eta_s: float = 1.0
    eta_u: float = 1.0
    eta_d: float = 0.5
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 12
    seed: int = 0
    holdout_fraction: float = 0.1

    def validate(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("gamma must lie in (0, 1]")
        if self.sigma < 0 or min(self.eta_s, self.eta_u, self.eta_d) < 0:
            raise ConfigError("sigma and loss weights must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        return self


@dataclass(frozen=True)
class RefineConfig:
    delta: float = 0.1               # boundary band |B| <= delta
    steps: int = REFINEMENT_STEPS    # rollout length under safest control
    n_batches: int = 47
    samples_per_batch: int = 48      # boundary scenarios re-simulated per batch
    mode: str = "both"               # both | unsafe-only | safe-only
    fine_tune_epochs: int = 3
    max_extra_epochs: int = 8        # extra epochs if misclassifications rose

    def validate(self):
        if self.delta <= 0 or self.steps < 1 or self.n_batches < 0:
            raise ConfigError("delta > 0, steps >= 1, n_batches >= 0 required")
        if self.mode not in ("both", "unsafe-only", "safe-only"):
            raise ConfigError("mode must be both | unsafe-only | safe-only")
        return self


def default_action_grid(max_step, n_dirs=8, magnitudes=(0.25, 0.5, 0.75, 1.0)):
    """Stay plus n_dirs x len(magnitudes) polar actions, stay first."""
    rows = [np.zeros(2)]
    for mag in magnitudes:
        r = mag * max_step
        for k in range(n_dirs):
            ang = 2.0 * math.pi * k / n_dirs
            rows.append(np.array([r * math.cos(ang), r * math.sin(ang)]))
    return np.array(rows)


# ---------------------------------------------------------------------------
# features and losses


def records_to_features(records):
    """Stack current/next relative-frame inputs for a record batch."""
    obj_w = np.stack([r.obj_window for r in records])
    rob_w = np.stack([r.robot_window for r in records])
    cur_robot, cur_hist = windows_to_features(obj_w[:, :-1, :], rob_w[:, -2, :])
    next_robot, next_hist = windows_to_features(obj_w[:, 1:, :], rob_w[:, -1, :])
    unsafe = np.array([r.label == UNSAFE for r in records])
    return cur_hist, cur_robot, next_hist, next_robot, unsafe


@dataclass
class LossReport:
    l_s: float
    l_u: float
    l_d: float
    total: float
    grads: dict
    n_safe: int
    n_unsafe: int


def loss_terms(barrier, records, cfg):
    """Loss values and parameter gradients for one minibatch."""
    if not records:
        raise ConfigError("loss_terms needs a non-empty batch")
    cfg.validate()
    cur_hist, cur_robot, next_hist, next_robot, unsafe = records_to_features(records)
    safe_idx = np.flatnonzero(~unsafe)
    unsafe_idx = np.flatnonzero(unsafe)

    with nn.Tape() as tape:
        b_cur = barrier.forward(cur_hist, cur_robot)
        b_next = barrier.forward(next_hist, next_robot)
        parts = []
        l_s = l_u = 0.0
        if safe_idx.size:
            ls_var = nn.mean_all(nn.relu(nn.affine(nn.take_rows(b_cur, safe_idx), -1.0)))
            parts.append(nn.affine(ls_var, cfg.eta_s))
            l_s = ls_var.item()
        if unsafe_idx.size:
            lu_var = nn.mean_all(nn.relu(nn.take_rows(b_cur, unsafe_idx)))
            parts.append(nn.affine(lu_var, cfg.eta_u))
            l_u = lu_var.item()
        ld_var = nn.mean_all(nn.relu(nn.add(
            nn.affine(b_cur, 1.0 - cfg.gamma, cfg.sigma), nn.affine(b_next, -1.0))))
        parts.append(nn.affine(ld_var, cfg.eta_d))
        total = parts[0]
        for p in parts[1:]:
            total = nn.add(total, p)
    grads = nn.backward(tape, 1.0, output=total)
    return LossReport(l_s=l_s, l_u=l_u, l_d=ld_var.item(), total=total.item(),
                      grads=grads, n_safe=int(safe_idx.size), n_unsafe=int(unsafe_idx.size))


# ---------------------------------------------------------------------------
# evaluation helpers


def predict_current_values(barrier, records, chunk=4096):
    """B(current) for every record, evaluated in bounded chunks."""
    values = np.zeros(len(records))
    for lo in range(0, len(records), chunk):
        part = records[lo: lo + chunk]
        cur_hist, cur_robot, *_ = records_to_features(part)
        values[lo: lo + len(part)] = barrier.values(cur_hist, cur_robot)
    return values


def classification_accuracy(barrier, records):
    if not records:
        return float("nan")
    values = predict_current_values(barrier, records)
    unsafe = np.array([r.label == UNSAFE for r in records])
    return float(np.mean((values >= 0.0) == ~unsafe))


def misclassification_count(barrier, records):
    """Records whose predicted sign disagrees with their label."""
    if not records:
        return 0
    values = predict_current_values(barrier, records)
    unsafe = np.array([r.label == UNSAFE for r in records])
    return int(np.sum((values >= 0.0) != ~unsafe))


def false_unsafe_rate(barrier, records):
    """Fraction of safe-labeled records the barrier calls unsafe."""
    safe_records = [r for r in records if r.label == SAFE]
    if not safe_records:
        return float("nan")
    values = predict_current_values(barrier, safe_records)
    return float(np.mean(values < 0.0))


def split_holdout(records, fraction, seed):
    """Deterministic holdout split by trajectory id; returns id sets."""
    traj_ids = sorted({r.trajectory_id for r in records})
    if fraction <= 0.0 or len(traj_ids) < 2:
        return set(traj_ids), set()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    perm = rng.permutation(len(traj_ids))
    n_hold = max(1, int(round(fraction * len(traj_ids))))
    hold = {traj_ids[i] for i in perm[:n_hold]}
    return set(traj_ids) - hold, hold


# ---------------------------------------------------------------------------
# initial training


def train_initial(dataset, cfg, barrier=None, arch=None, holdout_ids=None,
                  epoch_offset=0):
    """Minibatch Adam on the hinge losses; returns (model, log rows).

    With ``barrier`` given, training warm-starts from it (used by refinement
    fine-tuning).  The holdout split is by trajectory and never trained on.
    """
    cfg.validate()
    records = dataset.records if hasattr(dataset, "records") else list(dataset)
    labels = {r.label for r in records}
    if labels != {SAFE, UNSAFE}:
        raise DegenerateDataset(f"need both classes, found {sorted(labels)}")

    if holdout_ids is None:
        _, holdout_ids = split_holdout(records, cfg.holdout_fraction, cfg.seed)
    train_recs = [r for r in records if r.trajectory_id not in holdout_ids]
    hold_recs = [r for r in records if r.trajectory_id in holdout_ids]
    if {r.label for r in train_recs} != {SAFE, UNSAFE}:
        raise DegenerateDataset("training split lost a class; lower holdout_fraction")

    if barrier is None:
        t_hist = records[0].history_len
        arch = arch or ArchSpec(history_len=t_hist)
        barrier = BarrierModel.initialize(arch, seed=cfg.seed)

    log = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 1 + epoch_offset + epoch]))
        order = rng.permutation(len(train_recs))
        sums = np.zeros(4)
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_recs[i] for i in order[lo: lo + cfg.batch_size]]
            report = loss_terms(barrier, batch, cfg)
            nn.adam_step(barrier.store, report.grads, lr=cfg.lr)
            sums += (report.l_s, report.l_u, report.l_d, report.total)
            n_batches += 1
        means = sums / max(n_batches, 1)
        log.append({
            "epoch": epoch_offset + epoch,
            "l_s": means[0], "l_u": means[1], "l_d": means[2], "total": means[3],
            "holdout_acc": classification_accuracy(barrier, hold_recs) if hold_recs else None,
        })
    return barrier, log


def log_to_text(log):
    lines = ["epoch l_s l_u l_d total holdout_acc"]
    for row in log:
        acc = "-" if row["holdout_acc"] is None else f"{row['holdout_acc']:.4f}"
        lines.append(f"{row['epoch']} {row['l_s']:.6f} {row['l_u']:.6f} "
                     f"{row['l_d']:.6f} {row['total']:.6f} {acc}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# refinement


@dataclass(frozen=True)
class BoundarySample:
    index: int          # position in dataset.records
    value: float        # B(current)


def find_boundary_samples(dataset, barrier, delta, mode="both"):
    """Records with |B(current)| <= delta, optionally one-sided."""
    if delta <= 0:
        raise ConfigError("delta must be positive")
    records = dataset.records
    if not records:
        return []
    values = predict_current_values(barrier, records)
    sel = np.abs(values) <= delta
    if mode == "unsafe-only":
        sel &= values <= 0.0
    elif mode == "safe-only":
        sel &= values >= 0.0
    elif mode != "both":
        raise ConfigError(f"unknown mode {mode!r}")
    return [BoundarySample(int(i), float(values[i])) for i in np.flatnonzero(sel)]


def safest_control(barrier, scene, action_grid):
    """Grid action maximizing the global barrier of the predicted next state.

    Ties break toward the smallest action norm, then the lowest grid index.
    """
    grid = np.asarray(action_grid, dtype=np.float64).reshape(-1, 2)
    if grid.shape[0] == 0:
        raise ConfigError("action grid must be non-empty")
    live = np.flatnonzero(~scene.fallen)
    if live.size:
        nexts = np.array([sim.ee_next_position(scene.robot, a, scene.config)
                          for a in grid])
        table = barrier.value_table(scene.windows[live][:, 1:, :], nexts)
        values = np.min(table, axis=1)
    else:
        values = np.full(grid.shape[0], np.inf)
    best = np.max(values)
    norms = np.hypot(grid[:, 0], grid[:, 1])
    ties = np.flatnonzero(values == best)
    chosen = int(min(ties, key=lambda k: (norms[k], k)))
    return grid[chosen].copy()


def refine_batch(barrier, dataset, refine_cfg, world_config, batch_index=0,
                 action_grid=None):
    """Re-simulate near-boundary scenarios under the safest control.

    Each selected scenario is restored from its snapshot, replayed to the
    sample's step, then rolled ``steps`` further with the barrier-maximizing
    grid action; every per-object transition along the rollout is recorded
    and labeled by the ground-truth simulator.  Existing records are never
    mutated.
    """
    refine_cfg.validate()
    boundary = find_boundary_samples(dataset, barrier, refine_cfg.delta, refine_cfg.mode)
    if not boundary:
        return []
    order = sorted(boundary, key=lambda s: (abs(s.value), s.index))
    scenarios = {}
    for s in order:
        rec = dataset.records[s.index]
        key = (rec.trajectory_id, rec.step_index)
        if key not in scenarios:
            scenarios[key] = rec
        if len(scenarios) >= refine_cfg.samples_per_batch:
            break

    grid = action_grid if action_grid is not None \
        else default_action_grid(world_config.max_step)
    t_hist = dataset.records[0].history_len
    threshold_deg = dataset.manifest.get("threshold_deg", sim.DEFAULT_SAFETY_THRESHOLD_DEG)
    new_records = []
    for (traj_id, step_index), rec in scenarios.items():
        entry = dataset.snapshots.get(rec.snapshot_ref)
        if entry is None:
            raise CorruptSnapshot(f"snapshot {rec.snapshot_ref} missing from store")
        world = sim.restore(entry.data, world_config)
        snap_step = world.step_count
        n = world.n_objects
        n_replay = rec.replay_actions.shape[0]
        total = n_replay + refine_cfg.steps
        obj_log = np.zeros((total + 1, n, 4))
        robot_log = np.zeros((total + 1, 2))
        fallen_log = np.zeros((total + 1, n), dtype=bool)
        actions = np.zeros((total, 2))
        obj_log[0] = world.state_rows()
        robot_log[0] = world.ee
        fallen_log[0] = world.fallen
        for k, a in enumerate(rec.replay_actions):
            actions[k] = a
            world.step(a)
            obj_log[k + 1] = world.state_rows()
            robot_log[k + 1] = world.ee
            fallen_log[k + 1] = world.fallen
        if world.step_count != step_index:
            raise CorruptSnapshot(
                f"replay of {rec.snapshot_ref} landed on step {world.step_count}, "
                f"expected {step_index}")
        for k in range(refine_cfg.steps):
            local = n_replay + k
            idx = np.clip(np.arange(local - 1 - t_hist, local + 1), 0, None)
            scene = SceneObs(robot=world.ee.copy(),
                             windows=obj_log[idx].transpose(1, 0, 2).copy(),
                             fallen=world.fallen.copy(), config=world_config)
            u = safest_control(barrier, scene, grid)
            actions[local] = u
            world.step(u)
            obj_log[local + 1] = world.state_rows()
            robot_log[local + 1] = world.ee
            fallen_log[local + 1] = world.fallen
        new_records.extend(_records_from_logs(
            traj_id, obj_log, robot_log, fallen_log, actions, t_hist,
            snapshot_stride=1, threshold_deg=threshold_deg, step_offset=snap_step,
            snapshot_base=rec.snapshot_ref,
            id_suffix=f":r{batch_index:02d}", start_local=n_replay))
    return new_records


def refine_loop(barrier, dataset, refine_cfg, train_cfg):
    """Alternate refinement rollouts, dataset augmentation, and fine-tuning.

    After each batch the model is fine-tuned for ``fine_tune_epochs`` epochs,
    extended one epoch at a time (up to ``max_extra_epochs``) while the
    dataset misclassification count still exceeds the pre-batch count.  Stops
    early once the dataset is perfectly classified.
    """
    refine_cfg.validate()
    train_cfg.validate()
    world_config = sim.WorldConfig.from_dict(dataset.manifest["world_config"])
    _, holdout_ids = split_holdout(dataset.records, train_cfg.holdout_fraction,
                                   train_cfg.seed)
    metrics = []
    miscount = misclassification_count(barrier, dataset.records)
    epoch_counter = 10_000  # keep fine-tune shuffles distinct from initial epochs
    for batch in range(refine_cfg.n_batches):
        if miscount == 0:
            break
        new_records = refine_batch(barrier, dataset, refine_cfg, world_config,
                                   batch_index=batch)
        dataset.append_records(new_records)
        prev = miscount
        ft = replace(train_cfg, epochs=refine_cfg.fine_tune_epochs)
        barrier, _ = train_initial(dataset, ft, barrier=barrier,
                                   holdout_ids=holdout_ids, epoch_offset=epoch_counter)
        epoch_counter += refine_cfg.fine_tune_epochs
        miscount = misclassification_count(barrier, dataset.records)
        extra = 0
        one = replace(train_cfg, epochs=1)
        while miscount > prev and extra < refine_cfg.max_extra_epochs:
            barrier, _ = train_initial(dataset, one, barrier=barrier,
                                       holdout_ids=holdout_ids, epoch_offset=epoch_counter)
            epoch_counter += 1
            extra += 1
            miscount = misclassification_count(barrier, dataset.records)
        metrics.append({
            "batch": batch,
            "n_new_records": len(new_records),
            "misclassified": miscount,
            "extra_epochs": extra,
            "dataset_size": len(dataset.records),
        })
        if miscount == 0:
            break
    return barrier, metrics
