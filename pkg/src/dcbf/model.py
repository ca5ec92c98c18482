"""Object-centric learned barrier function and its min-composition.

The network scores one object at a time: an LSTM encodes the object's recent
state history expressed in the object's own anchor frame, an MLP encodes the
candidate next robot position in the same frame, and a fusion MLP maps the
concatenated features to a scalar.  Non-negative output means the queried
interaction is predicted safe.  The scene-level value is the minimum over
per-object values, so one unsafe object makes the whole scene unsafe.

Feature layout (version 1): history rows are ordered oldest to newest and
hold (x - anchor_x, y - anchor_y, z, theta) with theta in radians; the robot
feature is (x - anchor_x, y - anchor_y).  The anchor is the oldest entry of
the history window and is itself excluded from the rows fed to the LSTM.
"""

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .errors import ShapeMismatch, ShortHistory, VersionMismatch

FEATURE_LAYOUT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    history_len: int = 8                 # T: rows fed to the LSTM
    obj_features: int = 4
    robot_features: int = 2
    lstm_hidden: int = 64
    robot_layers: tuple = (64, 64)
    fusion_layers: tuple = (64, 64)
    activation: str = "relu"
    feature_layout: int = FEATURE_LAYOUT_VERSION

    def to_dict(self):
        d = asdict(self)
        d["robot_layers"] = list(d["robot_layers"])
        d["fusion_layers"] = list(d["fusion_layers"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["robot_layers"] = tuple(d["robot_layers"])
        d["fusion_layers"] = tuple(d["fusion_layers"])
        return cls(**d)


@dataclass(frozen=True)
class ObjectHistory:
    """T+1 object states, oldest first; entry 0 anchors the relative frame."""

    object_id: int
    entries: np.ndarray      # (T+1, 4) rows of absolute (x, y, z, theta)


@dataclass(frozen=True)
class RelativeObservation:
    rel_robot_next: np.ndarray   # (2,)
    rel_history: np.ndarray      # (T, 4)


def to_object_frame(robot_next, history):
    """Subtract the anchor (oldest entry) from all planar coordinates.

    The anchor row itself is excluded from the returned history; z and theta
    pass through unttransformed.
    """
    entries = np.asarray(history.entries, dtype=np.float64)
    if entries.ndim != 2 or entries.shape[1] != 4 or entries.shape[0] < 2:
        raise ShortHistory(f"history needs at least 2 rows of 4, got {entries.shape}")
    anchor = entries[0, :2]
    rel_history = entries[1:].copy()
    rel_history[:, :2] -= anchor
    robot_next = np.asarray(robot_next, dtype=np.float64).reshape(2)
    return RelativeObservation(rel_robot_next=robot_next - anchor, rel_history=rel_history)


def windows_to_features(windows, robot_next):
    """Vectorized to_object_frame over N same-length windows.

    windows: (N, T+1, 4) absolute histories; robot_next: (2,) or (N, 2).
    Returns (rel_robot (N, 2), rel_hist (N, T, 4)).
    """
    windows = np.asarray(windows, dtype=np.float64)
    anchors = windows[:, 0, :2]
    rel_hist = windows[:, 1:, :].copy()
    rel_hist[:, :, :2] -= anchors[:, None, :]
    robot_next = np.asarray(robot_next, dtype=np.float64)
    if robot_next.ndim == 1:
        robot_next = np.broadcast_to(robot_next, (windows.shape[0], 2))
    return robot_next - anchors, rel_hist


class BarrierModel:
    """Parameters plus architecture of the per-object barrier network."""

    def __init__(self, arch, store):
        self.arch = arch
        self.store = store
        self.eval_count = 0
        h = arch.lstm_hidden
        self._robot_spec = nn.MlpSpec(
            sizes=(arch.robot_features, *arch.robot_layers), activation=arch.activation)
        self._fusion_spec = nn.MlpSpec(
            sizes=(h + arch.robot_layers[-1], *arch.fusion_layers, 1),
            activation=arch.activation)

    @classmethod
    def initialize(cls, arch=None, seed=0):
        arch = arch or ArchSpec()
        store = nn.ParamStore()
        rng = np.random.Generator(np.random.PCG64(seed))
        nn.init_lstm(store.slice("lstm"), arch.obj_features, arch.lstm_hidden, rng)
        model = cls(arch, store)
        nn.init_mlp(store.slice("robot"), model._robot_spec, rng)
        nn.init_mlp(store.slice("fusion"), model._fusion_spec, rng)
        return model

    # -- forward -------------------------------------------------------------

    def _check_features(self, rel_hist, rel_robot):
        arch = self.arch
        if rel_hist.ndim != 3 or rel_hist.shape[1:] != (arch.history_len, arch.obj_features):
            raise ShapeMismatch(
                f"history features {rel_hist.shape} != (B, {arch.history_len}, {arch.obj_features})")
        if rel_robot.ndim != 2 or rel_robot.shape[1] != arch.robot_features:
            raise ShapeMismatch(f"robot features {rel_robot.shape} != (B, {arch.robot_features})")
        if rel_hist.shape[0] != rel_robot.shape[0]:
            raise ShapeMismatch("history and robot batch sizes differ")

    def forward(self, rel_hist, rel_robot):
        """Differentiable batch forward; records on the active tape if any."""
        rel_hist = np.asarray(rel_hist, dtype=np.float64)
        rel_robot = np.asarray(rel_robot, dtype=np.float64)
        self._check_features(rel_hist, rel_robot)
        h = nn.lstm_forward(self.store.slice("lstm"), rel_hist, self.arch.lstm_hidden)
        return self._head(h, rel_robot)

    def _head(self, h_var, rel_robot):
        r = nn.mlp_forward(self.store.slice("robot"), rel_robot, self._robot_spec)
        fused = nn.concat_cols([h_var, r])
        return nn.mlp_forward(self.store.slice("fusion"), fused, self._fusion_spec)

    # -- inference -----------------------------------------------------------

    def values(self, rel_hist, rel_robot):
        """Barrier values for a feature batch; counts one evaluation per row."""
        rel_hist = np.asarray(rel_hist, dtype=np.float64)
        if rel_hist.shape[0] == 0:
            return np.zeros(0)
        out = self.forward(rel_hist, rel_robot)
        self.eval_count += rel_hist.shape[0]
        return out.data[:, 0].copy()

    def barrier_value(self, obs):
        """Scalar barrier for one RelativeObservation (batched path, batch 1)."""
        return float(self.values(obs.rel_history[None, :, :], obs.rel_robot_next[None, :])[0])

    def batched_barrier(self, obs_list):
        """Per-row barrier values; bit-compatible with barrier_value per row."""
        if len(obs_list) == 0:
            return np.zeros(0)
        rel_hist = np.stack([o.rel_history for o in obs_list])
        rel_robot = np.stack([o.rel_robot_next for o in obs_list])
        return self.values(rel_hist, rel_robot)

    def global_barrier(self, obs_list):
        """Scene-level barrier: min over per-object values; empty scene is +inf."""
        if len(obs_list) == 0:
            return float("inf")
        return float(np.min(self.batched_barrier(obs_list)))

    def value_table(self, windows, robot_nexts):
        """Values for every (action, object) pair with shared history encoding.

        windows: (N, T+1, 4) absolute object histories; robot_nexts: (A, 2)
        candidate next robot positions.  Returns (A, N).  The LSTM encoding of
        each object is computed once and reused across actions, which is
        bitwise identical to evaluating each pair separately because every
        kernel is row-stable.
        """
        windows = np.asarray(windows, dtype=np.float64)
        robot_nexts = np.asarray(robot_nexts, dtype=np.float64).reshape(-1, 2)
        n = windows.shape[0]
        a = robot_nexts.shape[0]
        if n == 0 or a == 0:
            return np.zeros((a, n))
        anchors = windows[:, 0, :2]
        _, rel_hist = windows_to_features(windows, np.zeros(2))
        h = nn.lstm_forward(self.store.slice("lstm"), rel_hist, self.arch.lstm_hidden)
        h_tiled = nn.Var(np.tile(h.data, (a, 1)))
        rel_robot = (robot_nexts[:, None, :] - anchors[None, :, :]).reshape(a * n, 2)
        out = self._head(h_tiled, rel_robot)
        self.eval_count += a * n
        return out.data[:, 0].reshape(a, n).copy()

    def reset_eval_count(self):
        self.eval_count = 0

    # -- persistence ---------------------------------------------------------

    def save_bytes(self):
        return nn.save_params(self.store, extra={"arch": self.arch.to_dict()})

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.save_bytes())

    @classmethod
    def from_bytes(cls, blob, expect_arch=None):
        store, extra = nn.load_params(blob)
        if not extra or "arch" not in extra:
            raise VersionMismatch("checkpoint carries no architecture block")
        arch = ArchSpec.from_dict(extra["arch"])
        if expect_arch is not None and arch != expect_arch:
            raise VersionMismatch(
                f"checkpoint architecture {arch} does not match expected {expect_arch}")
        return cls(arch, store)

    @classmethod
    def load(cls, path, expect_arch=None):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), expect_arch=expect_arch)

    def copy(self):
        return BarrierModel(self.arch, self.store.copy())

    def arch_json(self):
        return json.dumps(self.arch.to_dict(), sort_keys=True)
