"""Runtime safety filter: keep the nominal action when its predicted next
state is safe, otherwise substitute the nearest safe action from a sampled
candidate set.

The filter never touches world state; it works from a SceneObs, which carries
absolute per-object state windows of length T+2 so both the current-history
and previous-history views exist (the latter is only needed by the optional
decrease-condition mode).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .sim import clamp_norm, ee_next_position


@dataclass(frozen=True)
class FilterConfig:
    n_candidates: int = 64
    ring_scales: tuple = (0.25, 0.5, 1.0, 2.0)   # ring radii as multiples of max_step
    relevance_radius: float = 0.3
    motion_window_eps: float = 1e-4
    decrease_mode: bool = False
    gamma: float = 0.1                            # only used by decrease_mode
    fallback: str = "stay"                        # "stay" | "backstep"

    def validate(self):
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if self.relevance_radius <= 0:
            raise ConfigError("relevance_radius must be positive")
        if self.fallback not in ("stay", "backstep"):
            raise ConfigError("fallback must be 'stay' or 'backstep'")
        return self


@dataclass
class SceneObs:
    """Observation handed to the filter: robot pose plus object windows.

    windows holds absolute (x, y, z, theta) rows, oldest first, length T+2;
    windows[:, 1:, :] is the current history and windows[:, :-1, :] the
    previous one.  Warm-up padding repeats the episode's initial state.
    """

    robot: np.ndarray            # (2,)
    windows: np.ndarray          # (N, T+2, 4)
    fallen: np.ndarray           # (N,) bool
    config: object               # WorldConfig (kinematics + table bounds)
    prev_waypoint: np.ndarray = None


class WindowTracker:
    """Rolling per-object state windows with warm-up padding."""

    def __init__(self, world, history_len):
        self.history_len = history_len
        rows = world.state_rows()
        self.windows = np.repeat(rows[:, None, :], history_len + 2, axis=1)

    def update(self, world):
        self.windows[:, :-1, :] = self.windows[:, 1:, :]
        self.windows[:, -1, :] = world.state_rows()

    def scene(self, world, prev_waypoint=None):
        return SceneObs(robot=world.ee.copy(), windows=self.windows.copy(),
                        fallen=world.fallen.copy(), config=world.config,
                        prev_waypoint=prev_waypoint)


def relevant_objects(obs, cfg):
    """Indices worth checking: near the EE now, or moving within the window.

    Fallen objects are never relevant; their state cannot get worse.
    """
    n = obs.windows.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    last_xy = obs.windows[:, -1, :2]
    near = np.hypot(last_xy[:, 0] - obs.robot[0], last_xy[:, 1] - obs.robot[1]) \
        <= cfg.relevance_radius
    window_xy = obs.windows[:, 1:, :2]
    drift = window_xy - window_xy[:, :1, :]
    moved = np.max(np.hypot(drift[..., 0], drift[..., 1]), axis=1) >= cfg.motion_window_eps
    return np.flatnonzero((near | moved) & ~obs.fallen)


def candidate_actions(u_nom, cfg, max_step):
    """Concentric rings around the nominal plus the stay action.

    Candidates are clamped to max_step and exact duplicates (including the
    nominal itself) are dropped, keeping the first occurrence; ring order is
    radius-ascending so index tie-breaks favor near candidates.
    """
    u_nom = np.asarray(u_nom, dtype=np.float64)
    n_dirs = max(1, cfg.n_candidates // len(cfg.ring_scales))
    angles = 2.0 * math.pi * np.arange(n_dirs) / n_dirs
    rows = []
    for scale in cfg.ring_scales:
        r = scale * max_step
        for ang in angles:
            rows.append(clamp_norm(u_nom + r * np.array([math.cos(ang), math.sin(ang)]),
                                   max_step))
    rows.append(np.zeros(2))
    seen = {u_nom.tobytes()}
    out = []
    for row in rows:
        key = row.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(row)
    return np.array(out).reshape(-1, 2)


@dataclass
class FilterReport:
    passed_nominal: bool
    nominal_value: float
    relevant: np.ndarray
    candidates: np.ndarray            # (A, 2); empty on pass-through
    candidate_values: np.ndarray      # (A,) global barrier per candidate
    candidate_safe: np.ndarray        # (A,) bool
    distances: np.ndarray             # (A,) ||u - u_nom||
    chosen_index: int                 # -1 = nominal or fallback
    chosen_value: float               # B_global of the returned action, if known
    no_safe_action: bool
    candidates_evaluated: int         # actions whose next state was scored
    barrier_evals: int                # per-object barrier evaluations
    current_value: float = None       # decrease mode only

    def to_dict(self):
        return {
            "passed_nominal": self.passed_nominal,
            "nominal_value": self.nominal_value,
            "relevant": [int(i) for i in self.relevant],
            "candidates": self.candidates.tolist(),
            "candidate_values": self.candidate_values.tolist(),
            "candidate_safe": [bool(b) for b in self.candidate_safe],
            "distances": self.distances.tolist(),
            "chosen_index": self.chosen_index,
            "chosen_value": self.chosen_value,
            "no_safe_action": self.no_safe_action,
            "candidates_evaluated": self.candidates_evaluated,
            "barrier_evals": self.barrier_evals,
            "current_value": self.current_value,
        }

    def to_text(self):
        head = (f"nominal B={self.nominal_value:+.4f} pass={self.passed_nominal} "
                f"relevant={len(self.relevant)} evals={self.barrier_evals}")
        if self.passed_nominal:
            return head
        tail = (f" chosen={self.chosen_index} B={self.chosen_value} "
                f"no_safe={self.no_safe_action}")
        return head + tail


def filter_action(barrier, obs, u_nom, cfg):
    """Minimally invasive safe action; returns (action, FilterReport).

    ``barrier`` must expose value_table(windows, robot_nexts) -> (A, N).
    """
    u_nom = np.asarray(u_nom, dtype=np.float64)
    rel = relevant_objects(obs, cfg)
    n_rel = rel.size
    histories = obs.windows[rel][:, 1:, :]
    evals = 0

    current_value = None
    if cfg.decrease_mode and n_rel:
        prev = obs.windows[rel][:, :-1, :]
        current_value = float(np.min(barrier.value_table(prev, obs.robot[None, :])))
        evals += n_rel

    def globals_for(actions):
        nexts = np.array([ee_next_position(obs.robot, a, obs.config) for a in actions])
        table = barrier.value_table(histories, nexts)
        return np.min(table, axis=1) if n_rel else np.full(len(actions), np.inf)

    def admissible(value):
        if value < 0.0:
            return False
        if cfg.decrease_mode and current_value is not None:
            return value >= (1.0 - cfg.gamma) * current_value
        return True

    nominal_value = float(globals_for(u_nom[None, :])[0])
    evals += n_rel
    if admissible(nominal_value):
        report = FilterReport(
            passed_nominal=True, nominal_value=nominal_value, relevant=rel,
            candidates=np.zeros((0, 2)), candidate_values=np.zeros(0),
            candidate_safe=np.zeros(0, dtype=bool), distances=np.zeros(0),
            chosen_index=-1, chosen_value=nominal_value, no_safe_action=False,
            candidates_evaluated=1, barrier_evals=evals, current_value=current_value)
        return u_nom.copy(), report

    cands = candidate_actions(u_nom, cfg, obs.config.max_step)
    values = globals_for(cands)
    evals += n_rel * len(cands)
    safe = np.array([admissible(v) for v in values])
    dists = np.hypot(cands[:, 0] - u_nom[0], cands[:, 1] - u_nom[1])

    if safe.any():
        safe_idx = np.flatnonzero(safe)
        chosen = int(safe_idx[np.argmin(dists[safe_idx])])
        action = cands[chosen].copy()
        chosen_value = float(values[chosen])
        no_safe = False
    else:
        chosen = -1
        chosen_value = None
        no_safe = True
        if cfg.fallback == "backstep" and obs.prev_waypoint is not None:
            action = clamp_norm(np.asarray(obs.prev_waypoint) - obs.robot,
                                obs.config.max_step)
        else:
            action = np.zeros(2)

    report = FilterReport(
        passed_nominal=False, nominal_value=nominal_value, relevant=rel,
        candidates=cands, candidate_values=values, candidate_safe=safe,
        distances=dists, chosen_index=chosen, chosen_value=chosen_value,
        no_safe_action=no_safe, candidates_evaluated=1 + len(cands),
        barrier_evals=evals, current_value=current_value)
    return action, report
