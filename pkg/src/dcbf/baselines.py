"""Comparison policies: straight-to-goal, back-stepping, and potential fields.

All policies are pure functions of their observations; the thin class
wrappers only carry the per-episode position histories that the back-stepping
and potential-field rules consult.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .sim import clamp_norm

BACKSTEP_TRIGGER_DEG = 14.0
BACKSTEP_WAYPOINT_LAG = 5
OSCILLATION_EPS = 1e-3


@dataclass(frozen=True)
class GoalSpec:
    gx: float
    gy: float
    tolerance: float = 0.02

    @property
    def vec(self):
        return np.array([self.gx, self.gy])


@dataclass(frozen=True)
class APFConfig:
    kp: float = 5.0              # attractive gain
    eta: float = 50.0            # repulsive gain
    influence_len: float = 1.2   # potential area side; obstacles matter inside it
    oscillation_len: int = 3

    def validate(self):
        # eta = 0 is allowed: it degenerates to the straight-to-goal policy
        if min(self.kp, self.influence_len) <= 0 or self.eta < 0 or self.oscillation_len < 1:
            raise ConfigError("APF parameters must be positive")
        return self


@dataclass
class PolicyObs:
    """What the episode runner shows a policy each step."""

    robot: np.ndarray            # (2,) EE position
    objects_xy: np.ndarray       # (K, 2) live object base centers
    max_tilt_deg: float          # max tilt over relevant objects
    max_step: float
    obj_radius: float


# ---------------------------------------------------------------------------
# pure policy functions


def do_nothing_action(robot, goal, max_step):
    """Straight toward the goal, clamped; lands exactly when within reach."""
    delta = goal.vec - np.asarray(robot, dtype=np.float64)
    return clamp_norm(delta, max_step)


def back_stepping_action(robot, goal, observed_max_tilt_deg, waypoint_history,
                         max_step, trigger_deg=BACKSTEP_TRIGGER_DEG,
                         lag=BACKSTEP_WAYPOINT_LAG):
    """Retreat to the waypoint ``lag`` steps back when tilt nears the threshold."""
    if observed_max_tilt_deg >= trigger_deg:
        if not waypoint_history:
            return np.zeros(2)
        target = waypoint_history[max(0, len(waypoint_history) - lag)]
        return clamp_norm(np.asarray(target, dtype=np.float64) - robot, max_step)
    return do_nothing_action(robot, goal, max_step)


def apf_action(robot, goal, object_positions, cfg, recent_positions, max_step,
               obj_radius):
    """Gradient-descent step on the classical attractive/repulsive potential.

    U = 1/2 kp ||x - g||^2 + sum 1/2 eta (1/d - 1/d0)^2 for d < d0, with d the
    distance to each object's base-circle surface.  The step is -grad(U)/kp so
    that with no obstacles in range it reduces exactly to do_nothing.
    """
    robot = np.asarray(robot, dtype=np.float64)
    if len(recent_positions) >= cfg.oscillation_len:
        tail = np.asarray(recent_positions[-cfg.oscillation_len:])
        diffs = tail[:, None, :] - tail[None, :, :]
        if np.max(np.hypot(diffs[..., 0], diffs[..., 1])) <= OSCILLATION_EPS:
            return np.zeros(2)
    # gradient pre-divided by kp, so with no repulsion the step is exactly
    # the do_nothing step (no multiply/divide round trip on the attraction)
    grad = robot - goal.vec
    d0 = cfg.influence_len
    for c in np.asarray(object_positions, dtype=np.float64).reshape(-1, 2):
        off = robot - c
        center_dist = math.hypot(off[0], off[1])
        d = max(center_dist - obj_radius, 1e-6)
        if d < d0:
            away = off / center_dist if center_dist > 0 else np.array([1.0, 0.0])
            grad -= (cfg.eta / cfg.kp) * (1.0 / d - 1.0 / d0) / (d * d) * away
    return clamp_norm(-grad, max_step)


# ---------------------------------------------------------------------------
# stateful wrappers


class DoNothingPolicy:
    policy_id = "donothing"

    def __init__(self, goal):
        self.goal = goal

    def act(self, obs):
        return do_nothing_action(obs.robot, self.goal, obs.max_step)


class BackSteppingPolicy:
    policy_id = "backstep"

    def __init__(self, goal, trigger_deg=BACKSTEP_TRIGGER_DEG, lag=BACKSTEP_WAYPOINT_LAG):
        self.goal = goal
        self.trigger_deg = trigger_deg
        self.lag = lag
        self.waypoints = []

    def act(self, obs):
        action = back_stepping_action(
            obs.robot, self.goal, obs.max_tilt_deg, self.waypoints,
            obs.max_step, self.trigger_deg, self.lag)
        self.waypoints.append(np.array(obs.robot))
        return action


class APFPolicy:
    policy_id = "apf"

    def __init__(self, goal, cfg=None):
        self.goal = goal
        self.cfg = (cfg or APFConfig()).validate()
        self.recent = []

    def act(self, obs):
        action = apf_action(obs.robot, self.goal, obs.objects_xy, self.cfg,
                            self.recent, obs.max_step, obs.obj_radius)
        self.recent.append(np.array(obs.robot))
        if len(self.recent) > self.cfg.oscillation_len:
            self.recent.pop(0)
        return action


POLICY_IDS = ("donothing", "backstep", "apf")


def make_policy(policy_id, goal, apf_cfg=None):
    if policy_id == "donothing":
        return DoNothingPolicy(goal)
    if policy_id == "backstep":
        return BackSteppingPolicy(goal)
    if policy_id == "apf":
        return APFPolicy(goal, apf_cfg)
    raise ConfigError(f"unknown policy id {policy_id!r}; expected one of {POLICY_IDS}")


# ---------------------------------------------------------------------------
# goal sampling


def _segment_point_distance(a, b, p):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return math.hypot(*(p - a))
    t = min(1.0, max(0.0, float((p - a) @ ab) / denom))
    closest = a + t * ab
    return math.hypot(*(p - closest))


def sample_goal(world, rng, tolerance=0.02, require_contact=True, max_tries=200,
                margin=0.05):
    """Uniform goal over the table half far from the EE.

    When require_contact is set, goals are rejection-sampled until the
    straight EE-to-goal segment passes within touching distance of at least
    one live object, so the task cannot be solved contact-free.
    """
    cfg = world.config
    side = cfg.table_side
    if world.ee[0] <= side / 2:
        x_lo, x_hi = side / 2, side - margin
    else:
        x_lo, x_hi = margin, side / 2
    live = world.pos[~world.fallen]
    touch = cfg.obj_radius + cfg.ee_radius
    goal = None
    for _ in range(max_tries):
        goal = np.array([rng.uniform(x_lo, x_hi), rng.uniform(margin, side - margin)])
        if not require_contact or live.shape[0] == 0:
            break
        if any(_segment_point_distance(world.ee, goal, p) < touch for p in live):
            break
    return GoalSpec(gx=float(goal[0]), gy=float(goal[1]), tolerance=tolerance)
