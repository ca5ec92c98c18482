"""Rollout collection, labeled per-object transition pairs, dataset balancing
and persistence.

A record emitted at trajectory step t pairs ((r^t, O^{t-1}), (r^{t+1}, O^t))
for one object and is labeled by that object's ground-truth tilt at t+1.
Records store absolute state windows; the relative-frame inputs the model
consumes are recomputed deterministically via the object-frame transform.

Storage layout per record:
  obj_window    (T+2, 4)  object states o^{t-1-T} .. o^t, oldest first
  robot_window  (T+3, 2)  EE positions  r^{t-1-T} .. r^{t+1}
Negative time indices are warm-up padded with the episode's initial state.

Snapshots are taken every ``snapshot_stride`` steps; a record references the
latest snapshot at or before t-T-1 together with the action suffix needed to
replay to t, so a replay reproduces the full history window of every object
in the scene, not just the record's own.

File format: ``<base>.dataset`` holds a manifest JSON line followed by one
JSON record per line; ``<base>.snapshots`` is a self-indexed binary sidecar.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import sim
from .baselines import PolicyObs, make_policy, sample_goal
from .errors import ConfigError, CorruptDataset, VersionMismatch
from .filter import FilterConfig, WindowTracker, relevant_objects
from .model import ObjectHistory, to_object_frame

DATASET_VERSION = 1
SAFE = "safe"
UNSAFE = "unsafe"

_SIDOCAR_MAGIC = b"DCBFSNST"


def label(next_object_tilt_deg, fallen, threshold_deg=sim.DEFAULT_SAFETY_THRESHOLD_DEG):
    """Unsafe iff the object has fallen or its next tilt meets the threshold."""
    return UNSAFE if (fallen or next_object_tilt_deg >= threshold_deg) else SAFE


@dataclass
class TransitionRecord:
    object_id: int
    trajectory_id: str
    step_index: int
    label: str
    obj_window: np.ndarray
    robot_window: np.ndarray
    snapshot_ref: str
    replay_actions: np.ndarray

    @property
    def history_len(self):
        return self.obj_window.shape[0] - 2

    def current_history(self):
        return ObjectHistory(self.object_id, self.obj_window[:-1])

    def next_history(self):
        return ObjectHistory(self.object_id, self.obj_window[1:])

    def current_robot_next(self):
        return self.robot_window[-2]

    def next_robot_next(self):
        return self.robot_window[-1]

    def current_obs(self):
        return to_object_frame(self.current_robot_next(), self.current_history())

    def next_obs(self):
        return to_object_frame(self.next_robot_next(), self.next_history())

    def to_json(self):
        return json.dumps({
            "object_id": self.object_id,
            "trajectory_id": self.trajectory_id,
            "step_index": self.step_index,
            "label": self.label,
            "snapshot_ref": self.snapshot_ref,
            "obj_window": self.obj_window.tolist(),
            "robot_window": self.robot_window.tolist(),
            "replay_actions": self.replay_actions.tolist(),
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(
            object_id=int(d["object_id"]),
            trajectory_id=str(d["trajectory_id"]),
            step_index=int(d["step_index"]),
            label=str(d["label"]),
            obj_window=np.array(d["obj_window"], dtype=np.float64),
            robot_window=np.array(d["robot_window"], dtype=np.float64),
            snapshot_ref=str(d["snapshot_ref"]),
            replay_actions=np.array(d["replay_actions"], dtype=np.float64).reshape(-1, 2),
        )


@dataclass
class SnapshotEntry:
    data: bytes
    trajectory_id: str
    step: int


class Dataset:
    def __init__(self, records=None, manifest=None, snapshots=None):
        self.records = list(records or [])
        self.manifest = dict(manifest or {"version": DATASET_VERSION})
        self.snapshots = dict(snapshots or {})
        self.recount()

    def recount(self):
        unsafe = sum(1 for r in self.records if r.label == UNSAFE)
        self.manifest["counts"] = {
            "total": len(self.records),
            "safe": len(self.records) - unsafe,
            "unsafe": unsafe,
        }

    def append_records(self, records):
        self.records.extend(records)
        self.recount()

    def __len__(self):
        return len(self.records)

    @classmethod
    def merge(cls, a, b):
        """Concatenate two datasets; clashing snapshot ids from b are remapped."""
        snapshots = dict(a.snapshots)
        remap = {}
        for sid, entry in b.snapshots.items():
            if sid in snapshots and snapshots[sid].data != entry.data:
                new_id = f"m:{sid}"
                while new_id in snapshots:
                    new_id = "m:" + new_id
                remap[sid] = new_id
                snapshots[new_id] = entry
            else:
                snapshots[sid] = entry
        records = list(a.records)
        for rec in b.records:
            if rec.snapshot_ref in remap:
                rec = TransitionRecord(
                    rec.object_id, rec.trajectory_id, rec.step_index, rec.label,
                    rec.obj_window, rec.robot_window, remap[rec.snapshot_ref],
                    rec.replay_actions)
            records.append(rec)
        manifest = {"version": DATASET_VERSION,
                    "merged_from": [a.manifest.get("seed"), b.manifest.get("seed")]}
        for key in ("world_config", "history_len", "threshold_deg"):
            if key in a.manifest:
                manifest[key] = a.manifest[key]
        return cls(records, manifest, snapshots)


# ---------------------------------------------------------------------------
# collection


def trajectory_seed(seed, traj_index, stream=0):
    ss = np.random.SeedSequence([int(seed), int(traj_index), int(stream)])
    return int(ss.generate_state(1, np.uint64)[0])


def collect(policy, n_trajectories, world_config, episode_len, seed,
            history_len=8, snapshot_stride=4,
            threshold_deg=sim.DEFAULT_SAFETY_THRESHOLD_DEG,
            goal_tolerance=0.02, relevance_cfg=None):
    """Roll out a collection policy and emit labeled transition records.

    policy: a baseline policy id string, or a callable goal -> policy object.
    One record per object per step t in [T, episode_len - 1].
    """
    world_config.validate()
    if episode_len <= history_len:
        raise ConfigError("episode_len must exceed history_len")
    relevance_cfg = relevance_cfg or FilterConfig()
    t_hist = history_len

    records = []
    snapshots = {}
    for traj in range(n_trajectories):
        traj_id = f"t{traj:05d}"
        world = sim.spawn_world(world_config, trajectory_seed(seed, traj))
        goal_rng = np.random.default_rng(trajectory_seed(seed, traj, stream=1))
        goal = sample_goal(world, goal_rng, tolerance=goal_tolerance)
        pol = policy(goal) if callable(policy) else make_policy(policy, goal)

        n = world.n_objects
        obj_log = np.zeros((episode_len + 1, n, 4))
        robot_log = np.zeros((episode_len + 1, 2))
        fallen_log = np.zeros((episode_len + 1, n), dtype=bool)
        obj_log[0] = world.state_rows()
        robot_log[0] = world.ee
        fallen_log[0] = world.fallen
        tracker = WindowTracker(world, t_hist)
        actions = np.zeros((episode_len, 2))

        for t in range(episode_len):
            if t % snapshot_stride == 0:
                snapshots[f"{traj_id}s{t:04d}"] = SnapshotEntry(
                    sim.snapshot(world), traj_id, t)
            scene = tracker.scene(world)
            rel = relevant_objects(scene, relevance_cfg)
            max_tilt = float(np.degrees(np.max(world.theta[rel]))) if rel.size else 0.0
            obs = PolicyObs(robot=world.ee.copy(),
                            objects_xy=world.pos[~world.fallen].copy(),
                            max_tilt_deg=max_tilt,
                            max_step=world_config.max_step,
                            obj_radius=world_config.obj_radius)
            a = pol.act(obs)
            actions[t] = np.asarray(a, dtype=np.float64)
            world.step(actions[t])
            tracker.update(world)
            obj_log[t + 1] = world.state_rows()
            robot_log[t + 1] = world.ee
            fallen_log[t + 1] = world.fallen

        records.extend(_records_from_logs(
            traj_id, obj_log, robot_log, fallen_log, actions, t_hist,
            snapshot_stride, threshold_deg, step_offset=0))

    manifest = {
        "version": DATASET_VERSION,
        "seed": int(seed),
        "n_trajectories": int(n_trajectories),
        "episode_len": int(episode_len),
        "policy": getattr(policy, "policy_id", policy if isinstance(policy, str) else "custom"),
        "history_len": int(t_hist),
        "snapshot_stride": int(snapshot_stride),
        "threshold_deg": float(threshold_deg),
        "world_config": json.loads(world_config.canonical_json()),
    }
    return Dataset(records, manifest, snapshots)


def _records_from_logs(traj_id, obj_log, robot_log, fallen_log, actions, t_hist,
                       snapshot_stride, threshold_deg, step_offset,
                       snapshot_base=None, id_suffix="", start_local=None):
    """Build records from absolute state logs.

    Log row k corresponds to trajectory step step_offset + k.  With
    snapshot_base given (refinement rollouts), every record references that
    snapshot and stores the local action log up to its step as the replay
    suffix; otherwise records point at the stride snapshot at or before
    t - T - 1 of their own trajectory.
    """
    episode_len = actions.shape[0]
    n = obj_log.shape[1]
    if start_local is None:
        start_local = max(t_hist - step_offset, 0)
    records = []
    for local_t in range(start_local, episode_len):
        t = step_offset + local_t
        idx = np.clip(np.arange(local_t - 1 - t_hist, local_t + 1), 0, None)
        ridx = np.clip(np.arange(local_t - 1 - t_hist, local_t + 2), 0, None)
        if snapshot_base is None:
            snap_step = (max(t - t_hist - 1, 0) // snapshot_stride) * snapshot_stride
            snapshot_ref = f"{traj_id}s{snap_step:04d}"
            replay = actions[snap_step:local_t]
        else:
            snapshot_ref = snapshot_base
            replay = actions[:local_t]
        for i in range(n):
            tilt_deg_next = math.degrees(obj_log[local_t + 1, i, 3])
            records.append(TransitionRecord(
                object_id=i,
                trajectory_id=traj_id + id_suffix,
                step_index=t,
                label=label(tilt_deg_next, bool(fallen_log[local_t + 1, i]), threshold_deg),
                obj_window=obj_log[idx, i, :].copy(),
                robot_window=robot_log[ridx, :].copy(),
                snapshot_ref=snapshot_ref,
                replay_actions=np.array(replay, dtype=np.float64).reshape(-1, 2),
            ))
    return records


# ---------------------------------------------------------------------------
# balancing


def balance(dataset, free_space_dist=0.15, motion_eps=1e-4):
    """Drop free-space records: object far from the EE across the whole window
    and essentially motionless.  Unsafe records are always retained."""
    if free_space_dist <= 0 or motion_eps <= 0:
        raise ConfigError("balance parameters must be positive")
    kept = []
    for rec in dataset.records:
        if rec.label == UNSAFE:
            kept.append(rec)
            continue
        obj = rec.obj_window[1:]            # o^{t-T} .. o^t
        rob = rec.robot_window[1:-1]        # r^{t-T} .. r^t
        dists = np.hypot(rob[:, 0] - obj[:, 0], rob[:, 1] - obj[:, 1])
        d_next = math.hypot(rec.robot_window[-1, 0] - obj[-1, 0],
                            rec.robot_window[-1, 1] - obj[-1, 1])
        moved = np.max(np.hypot(obj[:, 0] - obj[0, 0], obj[:, 1] - obj[0, 1]))
        if min(float(np.min(dists)), d_next) > free_space_dist and moved < motion_eps:
            continue
        kept.append(rec)
    manifest = dict(dataset.manifest)
    manifest["balance"] = {"free_space_dist": free_space_dist, "motion_eps": motion_eps}
    return Dataset(kept, manifest, dict(dataset.snapshots))


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset, base_path):
    """Write ``<base>.dataset`` (manifest line + record lines) and the
    ``<base>.snapshots`` sidecar; returns the two paths."""
    import os

    base = str(base_path)
    os.makedirs(os.path.dirname(os.path.abspath(base)), exist_ok=True)
    dataset.recount()
    data_path = base + ".dataset"
    with open(data_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataset.manifest, separators=(",", ":"), sort_keys=True))
        fh.write("\n")
        for rec in dataset.records:
            fh.write(rec.to_json())
            fh.write("\n")
    snap_path = base + ".snapshots"
    index = {}
    blobs = []
    offset = 0
    for sid, entry in dataset.snapshots.items():
        index[sid] = {"offset": offset, "length": len(entry.data),
                      "trajectory_id": entry.trajectory_id, "step": entry.step}
        blobs.append(entry.data)
        offset += len(entry.data)
    idx_blob = json.dumps(index, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(snap_path, "wb") as fh:
        fh.write(_SIDOCAR_MAGIC)
        fh.write(struct.pack("<HI", DATASET_VERSION, len(idx_blob)))
        fh.write(idx_blob)
        for blob in blobs:
            fh.write(blob)
    return data_path, snap_path


def load_dataset(base_path):
    base = str(base_path)
    try:
        with open(base + ".dataset", "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CorruptDataset(f"cannot read dataset: {exc}") from exc
    if not lines:
        raise CorruptDataset("empty dataset file")
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptDataset(f"bad manifest line: {exc}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise VersionMismatch(f"dataset version {manifest.get('version')} unsupported")
    try:
        records = [TransitionRecord.from_json(line) for line in lines[1:]]
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CorruptDataset(f"bad record line: {exc}") from exc
    counts = manifest.get("counts", {})
    unsafe = sum(1 for r in records if r.label == UNSAFE)
    if counts and (counts.get("total") != len(records)
                   or counts.get("unsafe") != unsafe):
        raise CorruptDataset("manifest counts do not match record stream")

    snapshots = {}
    try:
        with open(base + ".snapshots", "rb") as fh:
            blob = fh.read()
        if blob[: len(_SIDOCAR_MAGIC)] != _SIDOCAR_MAGIC:
            raise CorruptDataset("bad snapshot sidecar magic")
        version, idx_len = struct.unpack_from("<HI", blob, len(_SIDOCAR_MAGIC))
        if version != DATASET_VERSION:
            raise VersionMismatch(f"snapshot sidecar version {version} unsupported")
        head = len(_SIDOCAR_MAGIC) + struct.calcsize("<HI")
        index = json.loads(blob[head: head + idx_len].decode("utf-8"))
        body = blob[head + idx_len:]
        for sid, meta in index.items():
            chunk = body[meta["offset"]: meta["offset"] + meta["length"]]
            if len(chunk) != meta["length"]:
                raise CorruptDataset(f"snapshot {sid} truncated")
            snapshots[sid] = SnapshotEntry(chunk, meta["trajectory_id"], int(meta["step"]))
    except OSError as exc:
        raise CorruptDataset(f"cannot read snapshot sidecar: {exc}") from exc
    except (json.JSONDecodeError, KeyError, struct.error) as exc:
        raise CorruptDataset(f"bad snapshot sidecar: {exc}") from exc
    return Dataset(records, manifest, snapshots)
