"""Deterministic 2D quasi-static pushing simulator.

A disk end-effector pushes upright cylinders on a square table.  Objects
translate when pushed, tilt in proportion to how far and how fast they were
shoved, relax back upright when left alone, and fall irreversibly once their
tilt passes the critical angle.  There is no momentum: with a zero action and
no overlaps the world is a fixed point apart from tilt recovery.

Contact resolution is positional: Gauss-Seidel sweeps over pairs in fixed
index order, end-effector pairs first.  Sweeps continue past the configured
minimum until the contact set stops changing (chains shed overlap only
geometrically per sweep), bounded by a hard cap.  The end-effector has
infinite mass (objects always yield to it) except when a configuration is
geometrically unresolvable - an object pinned head-on between the
end-effector and a wall.  In that case the commanded displacement is scaled
back along a fixed backoff ladder until the contact set resolves, so the
non-penetration invariant holds after every step.

Snapshot binary layout (little-endian):

    magic   8s   b"DCBFSNAP"
    version u16  1
    cfghash u64  first 8 bytes of sha256 over the canonical config JSON
    step    u64  step counter
    ee      2 f64
    count   u32  number of objects
    per object: x, y, theta, tilt_dir_x, tilt_dir_y, mass, mu_s, mu_d (8 f64)
                fallen (u8)
    prng: pcg64 state (16 bytes), inc (16 bytes), has_uint32 (u8),
          uinteger (u32)
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, CorruptSnapshot, PlacementInfeasible

DEFAULT_SAFETY_THRESHOLD_DEG = 15.0

_OVERLAP_TOL = 1e-9      # allowed residual penetration after a step
_SEP_EPS = 1e-12         # over-projection margin when separating a pair
_SPAWN_GAP = 1e-9
_MAX_SWEEPS = 200        # hard cap on resolution sweeps per step
_EE_BACKOFF = (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.0)
_SNAP_MAGIC = b"DCBFSNAP"
_SNAP_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    table_side: float = 1.2
    dt: float = 0.1                       # bookkeeping only under quasi-statics
    max_step: float = 0.01
    ee_radius: float = 0.02
    n_objects: int = 4
    mass_range: tuple = (1.3, 2.0)
    static_friction_range: tuple = (0.5, 0.7)
    dynamic_friction_range: tuple = (0.3, 0.49)
    obj_radius: float = 0.05
    obj_height: float = 0.20
    tilt_gain: float = 25.0               # tilt per meter of resolved displacement
    tilt_restore_rate: float = 0.05       # rad per contact-free step
    contact_iters: int = 8
    seed: int = 0
    ee_start: tuple = None                # default: (0.1, table_side / 2)

    def validate(self):
        if self.table_side <= 0:
            raise ConfigError("table_side must be positive")
        if self.max_step <= 0:
            raise ConfigError("max_step must be positive")
        if self.obj_radius <= 0 or self.obj_height <= 0:
            raise ConfigError("object dimensions must be positive")
        if self.ee_radius <= 0:
            raise ConfigError("ee_radius must be positive")
        if self.contact_iters < 1:
            raise ConfigError("contact_iters must be >= 1")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be >= 0")
        for name in ("mass_range", "static_friction_range", "dynamic_friction_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 < min <= max")
        return self

    @property
    def theta_crit(self):
        return math.atan(self.obj_radius / (self.obj_height / 2.0))

    def ee_home(self):
        if self.ee_start is not None:
            return np.array(self.ee_start, dtype=np.float64)
        return np.array([0.1, self.table_side / 2.0])

    def canonical_json(self):
        d = asdict(self)
        if d["ee_start"] is not None:
            d["ee_start"] = list(d["ee_start"])
        for k in ("mass_range", "static_friction_range", "dynamic_friction_range"):
            d[k] = list(d[k])
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("mass_range", "static_friction_range", "dynamic_friction_range"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("ee_start") is not None:
            d["ee_start"] = tuple(d["ee_start"])
        return cls(**d)

    def config_hash(self):
        digest = hashlib.sha256(self.canonical_json().encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ObjectPhys:
    mass: float
    mu_s: float
    mu_d: float


@dataclass(frozen=True)
class ObjectState:
    x: float
    y: float
    z: float
    theta: float
    tilt_dir: tuple
    fallen: bool


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float

    @property
    def vec(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float

    @property
    def vec(self):
        return np.array([self.dx, self.dy])


def as_vec2(value):
    if isinstance(value, (Action, RobotState)):
        return value.vec
    v = np.asarray(value, dtype=np.float64)
    if v.shape != (2,):
        raise ConfigError(f"expected a 2-vector, got shape {v.shape}")
    return v


def clamp_norm(v, limit):
    v = np.asarray(v, dtype=np.float64)
    n = math.hypot(v[0], v[1])
    if n > limit:
        return v * (limit / n)
    return v.copy()


def ee_next_position(ee, action, config):
    """Kinematic robot model: clamped displacement, clamped to the table."""
    a = clamp_norm(as_vec2(action), config.max_step)
    lo = config.ee_radius
    hi = config.table_side - config.ee_radius
    return np.clip(ee + a, lo, hi)


@dataclass
class StepReport:
    world: "World"
    displacement: np.ndarray       # (N, 2) resolved object displacements
    disp_norm: np.ndarray          # (N,)
    tilt_delta: np.ndarray         # (N,)
    contacts: list                 # pairs (-1, i) for EE-object, (i, j) otherwise
    ee_scale: float                # fraction of the commanded action executed
    ee_displacement: np.ndarray


class World:
    """Mutable simulator state.  Confined to one thread of control at a time."""

    def __init__(self, config, ee, pos, theta, tilt_dir, fallen, mass, mu_s, mu_d,
                 step_count=0, rng_state=None):
        self.config = config
        self.ee = np.array(ee, dtype=np.float64)
        self.pos = np.array(pos, dtype=np.float64).reshape(-1, 2)
        self.theta = np.array(theta, dtype=np.float64)
        self.tilt_dir = np.array(tilt_dir, dtype=np.float64).reshape(-1, 2)
        self.fallen = np.array(fallen, dtype=bool)
        self.mass = np.array(mass, dtype=np.float64)
        self.mu_s = np.array(mu_s, dtype=np.float64)
        self.mu_d = np.array(mu_d, dtype=np.float64)
        self.step_count = int(step_count)
        self.rng = np.random.Generator(np.random.PCG64(0))
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state

    # -- views ---------------------------------------------------------------

    @property
    def n_objects(self):
        return self.pos.shape[0]

    def z(self):
        return (self.config.obj_height / 2.0) * np.cos(self.theta)

    def object_state(self, i):
        return ObjectState(
            x=float(self.pos[i, 0]), y=float(self.pos[i, 1]),
            z=float((self.config.obj_height / 2.0) * math.cos(self.theta[i])),
            theta=float(self.theta[i]),
            tilt_dir=(float(self.tilt_dir[i, 0]), float(self.tilt_dir[i, 1])),
            fallen=bool(self.fallen[i]),
        )

    def object_states(self):
        return [self.object_state(i) for i in range(self.n_objects)]

    def object_phys(self, i):
        return ObjectPhys(float(self.mass[i]), float(self.mu_s[i]), float(self.mu_d[i]))

    def robot_state(self):
        return RobotState(float(self.ee[0]), float(self.ee[1]))

    def state_rows(self):
        """Per-object (x, y, z, theta) rows as observed by learners."""
        return np.column_stack([self.pos, self.z(), self.theta])

    # -- stepping ------------------------------------------------------------

    def step(self, action):
        cfg = self.config
        a = clamp_norm(as_vec2(action), cfg.max_step)
        pre_pos = self.pos.copy()
        pre_theta = self.theta.copy()
        pre_ee = self.ee.copy()
        live = np.flatnonzero(~self.fallen)

        pairs_ee, pairs_oo = self._broadphase(pre_pos, pre_ee, live)
        accepted = None
        for lam in _EE_BACKOFF:
            ee_target = self._clamp_ee(pre_ee + lam * a)
            trial = pre_pos.copy()
            contacts, sources = self._resolve(trial, ee_target, pairs_ee, pairs_oo)
            if self._max_penetration(trial, ee_target, live) <= _OVERLAP_TOL:
                accepted = (lam, ee_target, trial, contacts, sources)
                break
        lam, ee_target, new_pos, contacts, sources = accepted

        self.ee = ee_target
        self.pos = new_pos
        displacement = self.pos - pre_pos
        disp_norm = np.hypot(displacement[:, 0], displacement[:, 1])

        touched = set()
        for p in contacts:
            touched.update(k for k in p if k >= 0)
        gain = cfg.tilt_gain * cfg.obj_height / (2.0 * cfg.obj_radius)
        theta_crit = cfg.theta_crit
        for i in live:
            if i in touched:
                self.theta[i] += gain * disp_norm[i] * self.mu_s[i]
                src = sources.get(i)
                if src:
                    best = max(src.items(), key=lambda kv: math.hypot(kv[1][0], kv[1][1]))
                    n = math.hypot(best[1][0], best[1][1])
                    if n > 0:
                        self.tilt_dir[i] = np.asarray(best[1]) / n
            elif self.theta[i] > 0.0:
                # snap residues within one ulp-scale of the rate to exactly zero
                if self.theta[i] <= cfg.tilt_restore_rate * (1.0 + 1e-9):
                    self.theta[i] = 0.0
                else:
                    self.theta[i] -= cfg.tilt_restore_rate
            if self.theta[i] >= theta_crit:
                self.theta[i] = math.pi / 2.0
                self.fallen[i] = True

        self.step_count += 1
        return StepReport(
            world=self,
            displacement=displacement,
            disp_norm=disp_norm,
            tilt_delta=self.theta - pre_theta,
            contacts=sorted(contacts),
            ee_scale=lam,
            ee_displacement=self.ee - pre_ee,
        )

    def _clamp_ee(self, p):
        cfg = self.config
        return np.clip(p, cfg.ee_radius, cfg.table_side - cfg.ee_radius)

    def _broadphase(self, pos, ee, live):
        cfg = self.config
        if live.size == 0:
            return [], []
        margin = 6.0 * cfg.max_step
        d_ee = np.hypot(pos[live, 0] - ee[0], pos[live, 1] - ee[1])
        pairs_ee = [int(i) for i, d in zip(live, d_ee)
                    if d < cfg.ee_radius + cfg.obj_radius + margin]
        pairs_oo = []
        cutoff = 2.0 * cfg.obj_radius + margin
        for a_idx in range(live.size):
            i = int(live[a_idx])
            for b_idx in range(a_idx + 1, live.size):
                j = int(live[b_idx])
                if math.hypot(pos[i, 0] - pos[j, 0], pos[i, 1] - pos[j, 1]) < cutoff:
                    pairs_oo.append((i, j))
        return pairs_ee, pairs_oo

    def _resolve(self, pos, ee, pairs_ee, pairs_oo):
        cfg = self.config
        lo = cfg.obj_radius
        hi = cfg.table_side - cfg.obj_radius
        r_ee = cfg.ee_radius + cfg.obj_radius
        r_oo = 2.0 * cfg.obj_radius
        contacts = set()
        sources = {}

        def push(i, source, vec):
            pos[i, 0] = min(max(pos[i, 0] + vec[0], lo), hi)
            pos[i, 1] = min(max(pos[i, 1] + vec[1], lo), hi)
            acc = sources.setdefault(i, {})
            if source in acc:
                acc[source] = (acc[source][0] + vec[0], acc[source][1] + vec[1])
            else:
                acc[source] = (vec[0], vec[1])

        max_sweeps = max(_MAX_SWEEPS, cfg.contact_iters)
        for sweep in range(max_sweeps):
            touched_any = False
            for i in pairs_ee:
                dx = pos[i, 0] - ee[0]
                dy = pos[i, 1] - ee[1]
                dist = math.hypot(dx, dy)
                if dist < r_ee:
                    touched_any = True
                    contacts.add((-1, i))
                    if dist > 0.0:
                        nx, ny = dx / dist, dy / dist
                    else:
                        nx, ny = 1.0, 0.0
                    depth = r_ee - dist + _SEP_EPS
                    push(i, -1, (depth * nx, depth * ny))
            for i, j in pairs_oo:
                dx = pos[j, 0] - pos[i, 0]
                dy = pos[j, 1] - pos[i, 1]
                dist = math.hypot(dx, dy)
                if dist < r_oo:
                    touched_any = True
                    contacts.add((i, j))
                    if dist > 0.0:
                        nx, ny = dx / dist, dy / dist
                    else:
                        nx, ny = 1.0, 0.0
                    depth = r_oo - dist + _SEP_EPS
                    share_i = self.mass[j] / (self.mass[i] + self.mass[j])
                    push(i, j, (-depth * share_i * nx, -depth * share_i * ny))
                    push(j, i, (depth * (1.0 - share_i) * nx, depth * (1.0 - share_i) * ny))
            if not touched_any:
                # a clean sweep means every later sweep is a no-op
                break
        return contacts, sources

    def _max_penetration(self, pos, ee, live):
        if live.size == 0:
            return 0.0
        cfg = self.config
        p = pos[live]
        worst = float(np.max(cfg.ee_radius + cfg.obj_radius
                             - np.hypot(p[:, 0] - ee[0], p[:, 1] - ee[1])))
        if live.size > 1:
            diff = p[:, None, :] - p[None, :, :]
            dist = np.hypot(diff[..., 0], diff[..., 1])
            iu = np.triu_indices(live.size, k=1)
            worst = max(worst, float(np.max(2.0 * cfg.obj_radius - dist[iu])))
        return worst

    def max_penetration(self):
        """Deepest residual overlap among live circles (negative = separated)."""
        return self._max_penetration(self.pos, self.ee, np.flatnonzero(~self.fallen))


# ---------------------------------------------------------------------------
# construction


def spawn_world(config, seed=None):
    """Randomized world: rejection-sampled placements, randomized hidden physics."""
    config.validate()
    if seed is None:
        seed = config.seed
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = config
    ee = cfg.ee_home()
    if not np.all((ee >= cfg.ee_radius) & (ee <= cfg.table_side - cfg.ee_radius)):
        raise ConfigError("ee_start outside table bounds")

    lo = cfg.obj_radius
    hi = cfg.table_side - cfg.obj_radius
    if hi <= lo and cfg.n_objects > 0:
        raise PlacementInfeasible("table too small for a single object")
    placed = []
    attempts = 0
    while len(placed) < cfg.n_objects:
        if attempts >= 10_000:
            raise PlacementInfeasible(
                f"placed {len(placed)}/{cfg.n_objects} objects in {attempts} attempts")
        attempts += 1
        p = rng.uniform(lo, hi, 2)
        if math.hypot(p[0] - ee[0], p[1] - ee[1]) < cfg.ee_radius + cfg.obj_radius + _SPAWN_GAP:
            continue
        ok = all(math.hypot(p[0] - q[0], p[1] - q[1]) >= 2.0 * cfg.obj_radius + _SPAWN_GAP
                 for q in placed)
        if ok:
            placed.append(p)

    n = cfg.n_objects
    mass = rng.uniform(*cfg.mass_range, n) if n else np.zeros(0)
    mu_s = rng.uniform(*cfg.static_friction_range, n) if n else np.zeros(0)
    mu_d = np.zeros(n)
    for i in range(n):
        for _ in range(1000):
            draw = rng.uniform(*cfg.dynamic_friction_range)
            if draw < mu_s[i]:
                mu_d[i] = draw
                break
        else:
            raise PlacementInfeasible("could not draw mu_d < mu_s; check friction ranges")

    return World(
        config=cfg,
        ee=ee,
        pos=np.array(placed, dtype=np.float64).reshape(n, 2),
        theta=np.zeros(n),
        tilt_dir=np.tile([1.0, 0.0], (n, 1)),
        fallen=np.zeros(n, dtype=bool),
        mass=mass, mu_s=mu_s, mu_d=mu_d,
        step_count=0,
        rng_state=rng.bit_generator.state,
    )


def make_world(config, objects, ee=None, seed=0):
    """Hand-built world for scripted scenarios and tests.

    objects: iterable of dicts with keys x, y and optional theta, mass,
    mu_s, mu_d, fallen.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    ee = np.array(ee, dtype=np.float64) if ee is not None else config.ee_home()
    pos, theta, fallen, mass, mu_s, mu_d = [], [], [], [], [], []
    for spec in objects:
        pos.append((spec["x"], spec["y"]))
        is_fallen = spec.get("fallen", False)
        t = math.pi / 2.0 if is_fallen else spec.get("theta", 0.0)
        if not is_fallen and not (0.0 <= t < config.theta_crit):
            raise ConfigError("upright objects need 0 <= theta < theta_crit")
        theta.append(t)
        fallen.append(is_fallen)
        mass.append(spec.get("mass", 1.5))
        mu_s.append(spec.get("mu_s", 0.6))
        mu_d.append(spec.get("mu_d", 0.4))
        if not (0.0 < mu_d[-1] < mu_s[-1]):
            raise ConfigError("objects need 0 < mu_d < mu_s")
    n = len(pos)
    return World(
        config=config, ee=ee,
        pos=np.array(pos, dtype=np.float64).reshape(n, 2),
        theta=np.array(theta), tilt_dir=np.tile([1.0, 0.0], (n, 1)),
        fallen=np.array(fallen, dtype=bool),
        mass=np.array(mass), mu_s=np.array(mu_s), mu_d=np.array(mu_d),
        step_count=0, rng_state=rng.bit_generator.state,
    )


# ---------------------------------------------------------------------------
# safety predicates


def tilt_deg(obj):
    """Tilt of an ObjectState in degrees."""
    return math.degrees(obj.theta)


def is_violation(obj, threshold_deg=DEFAULT_SAFETY_THRESHOLD_DEG):
    """True iff the object's tilt meets the threshold (inclusive).

    Compared in radians so that a tilt of exactly threshold_deg degrees
    counts as a violation despite degree/radian round-tripping.
    """
    if threshold_deg <= 0:
        raise ConfigError("threshold_deg must be positive")
    return obj.theta >= math.radians(threshold_deg)


# ---------------------------------------------------------------------------
# snapshots


def snapshot(world):
    """Byte-exact serialization of the world, PRNG state included."""
    cfg = world.config
    n = world.n_objects
    parts = [
        _SNAP_MAGIC,
        struct.pack("<HQQddI", _SNAP_VERSION, cfg.config_hash(), world.step_count,
                    world.ee[0], world.ee[1], n),
    ]
    for i in range(n):
        parts.append(struct.pack(
            "<8dB",
            world.pos[i, 0], world.pos[i, 1], world.theta[i],
            world.tilt_dir[i, 0], world.tilt_dir[i, 1],
            world.mass[i], world.mu_s[i], world.mu_d[i],
            int(world.fallen[i]),
        ))
    st = world.rng.bit_generator.state
    parts.append(st["state"]["state"].to_bytes(16, "little"))
    parts.append(st["state"]["inc"].to_bytes(16, "little"))
    parts.append(struct.pack("<BI", int(st["has_uint32"]), int(st["uinteger"])))
    return b"".join(parts)


def restore(data, config):
    """Rebuild a World from snapshot bytes; the config must hash-match."""
    head = struct.calcsize("<HQQddI")
    if len(data) < len(_SNAP_MAGIC) + head or data[: len(_SNAP_MAGIC)] != _SNAP_MAGIC:
        raise CorruptSnapshot("bad magic or truncated header")
    version, cfg_hash, step_count, ee_x, ee_y, n = struct.unpack_from(
        "<HQQddI", data, len(_SNAP_MAGIC))
    if version != _SNAP_VERSION:
        raise CorruptSnapshot(f"unsupported snapshot version {version}")
    if cfg_hash != config.config_hash():
        raise CorruptSnapshot("snapshot belongs to a different world config")
    offset = len(_SNAP_MAGIC) + head
    obj_size = struct.calcsize("<8dB")
    tail = 16 + 16 + struct.calcsize("<BI")
    if len(data) != offset + n * obj_size + tail:
        raise CorruptSnapshot("snapshot length does not match object count")
    pos = np.zeros((n, 2))
    theta = np.zeros(n)
    tilt_dir = np.zeros((n, 2))
    fallen = np.zeros(n, dtype=bool)
    mass = np.zeros(n)
    mu_s = np.zeros(n)
    mu_d = np.zeros(n)
    for i in range(n):
        vals = struct.unpack_from("<8dB", data, offset)
        pos[i] = vals[0:2]
        theta[i] = vals[2]
        tilt_dir[i] = vals[3:5]
        mass[i], mu_s[i], mu_d[i] = vals[5:8]
        fallen[i] = bool(vals[8])
        offset += obj_size
    state = int.from_bytes(data[offset: offset + 16], "little")
    inc = int.from_bytes(data[offset + 16: offset + 32], "little")
    has_uint32, uinteger = struct.unpack_from("<BI", data, offset + 32)
    rng_state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": int(has_uint32),
        "uinteger": int(uinteger),
    }
    return World(
        config=config, ee=(ee_x, ee_y), pos=pos, theta=theta, tilt_dir=tilt_dir,
        fallen=fallen, mass=mass, mu_s=mu_s, mu_d=mu_d,
        step_count=step_count, rng_state=rng_state,
    )
