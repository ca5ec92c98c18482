import math

import numpy as np
import pytest

from dcbf import sim
from dcbf.errors import ConfigError, CorruptSnapshot, PlacementInfeasible


def default_config(**overrides):
    return sim.WorldConfig(**overrides)


def single_object_world(obj_x=0.5, obj_y=0.5, ee=(0.43, 0.5), mu_s=0.6, theta=0.0, **cfg):
    config = default_config(n_objects=1, **cfg)
    world = sim.make_world(
        config, [{"x": obj_x, "y": obj_y, "mu_s": mu_s, "mu_d": 0.4, "theta": theta}], ee=ee)
    return world


# ---------------------------------------------------------------------------
# spawn_world


def test_spawn_empty_scene_steps_are_noops():
    world = sim.spawn_world(default_config(n_objects=0), seed=3)
    before = sim.snapshot(world)
    report = world.step((0.01, 0.0))
    assert report.contacts == []
    assert world.n_objects == 0
    # only the EE and the step counter moved
    assert sim.restore(before, world.config).n_objects == 0


def test_spawn_deterministic_bytes():
    cfg = default_config(n_objects=6)
    a = sim.spawn_world(cfg, seed=42)
    b = sim.spawn_world(cfg, seed=42)
    assert sim.snapshot(a) == sim.snapshot(b)
    c = sim.spawn_world(cfg, seed=43)
    assert sim.snapshot(a) != sim.snapshot(c)


def test_spawn_dense_packing_succeeds():
    # 40 disks of r=0.05 on a 1.2 m table: packing fraction ~= 0.22
    world = sim.spawn_world(default_config(n_objects=40), seed=0)
    pos = world.pos
    for i in range(40):
        for j in range(i + 1, 40):
            assert np.hypot(*(pos[i] - pos[j])) >= 2 * world.config.obj_radius
        assert np.hypot(*(pos[i] - world.ee)) >= world.config.obj_radius + world.config.ee_radius
    assert np.all(world.theta == 0.0)


def test_spawn_infeasible_raises():
    with pytest.raises(PlacementInfeasible):
        sim.spawn_world(default_config(table_side=0.3, n_objects=20), seed=0)


def test_spawn_phys_within_ranges():
    world = sim.spawn_world(default_config(n_objects=10), seed=7)
    cfg = world.config
    assert np.all((world.mass >= cfg.mass_range[0]) & (world.mass <= cfg.mass_range[1]))
    assert np.all((world.mu_s >= cfg.static_friction_range[0])
                  & (world.mu_s <= cfg.static_friction_range[1]))
    assert np.all((world.mu_d >= cfg.dynamic_friction_range[0])
                  & (world.mu_d <= cfg.dynamic_friction_range[1]))
    assert np.all(world.mu_d < world.mu_s)


def test_config_validation():
    with pytest.raises(ConfigError):
        default_config(table_side=-1.0).validate()
    with pytest.raises(ConfigError):
        default_config(mass_range=(2.0, 1.0)).validate()
    with pytest.raises(ConfigError):
        default_config(contact_iters=0).validate()


# ---------------------------------------------------------------------------
# step


def test_step_no_contact_moves_only_ee():
    world = single_object_world(obj_x=0.9, obj_y=0.9, ee=(0.2, 0.2))
    before_obj = world.object_state(0)
    report = world.step((0.01, 0.0))
    assert np.allclose(world.ee, [0.21, 0.2])
    assert world.object_state(0) == before_obj
    assert report.contacts == []
    assert report.ee_scale == 1.0


def test_step_clamps_action_norm():
    world = sim.spawn_world(default_config(n_objects=0), seed=0)
    start = world.ee.copy()
    world.step((1.0, 0.0))
    assert np.hypot(*(world.ee - start)) <= world.config.max_step + 1e-15


def test_tilt_law_direct_evaluation():
    # resolved displacement d = 0.004, mu_s = 0.6, k_tilt = 25, h/(2r) = 2
    world = single_object_world()
    report = world.step((0.004, 0.0))
    assert report.disp_norm[0] == pytest.approx(0.004, abs=1e-9)
    assert world.theta[0] == pytest.approx(25 * 0.004 * 0.6 * 2, abs=1e-9)
    assert (-1, 0) in report.contacts


def test_theta_crit_snaps_to_fallen():
    theta_crit = default_config().theta_crit
    assert theta_crit == pytest.approx(math.atan(0.05 / 0.10), abs=1e-15)
    world = single_object_world(theta=0.2)
    world.step((0.01, 0.0))  # +0.3 rad at full speed -> past theta_crit
    assert world.fallen[0]
    assert world.theta[0] == math.pi / 2
    state = world.object_state(0)
    assert state.fallen and sim.tilt_deg(state) == pytest.approx(90.0)


def test_fallen_objects_excluded_from_contact():
    world = single_object_world(theta=0.2)
    world.step((0.01, 0.0))
    assert world.fallen[0]
    pos_before = world.pos[0].copy()
    for _ in range(10):
        report = world.step((0.01, 0.0))
        assert report.contacts == []
    assert np.array_equal(world.pos[0], pos_before)
    assert world.theta[0] == math.pi / 2  # irreversible


def test_object_object_push_splits_by_inverse_mass():
    config = default_config(n_objects=2)
    world = sim.make_world(
        config,
        [{"x": 0.50, "y": 0.5, "mass": 1.5}, {"x": 0.601, "y": 0.5, "mass": 1.5}],
        ee=(0.43, 0.5))
    report = world.step((0.01, 0.0))
    # chain push: EE shoves object 0 into object 1
    assert (-1, 0) in report.contacts and (0, 1) in report.contacts
    assert report.disp_norm[1] > 0
    assert world.max_penetration() <= 1e-9


def test_wall_clamp_feeds_tilt_law_and_blocks_ee():
    # object pinned head-on between the EE and the bottom wall: the EE must
    # back off instead of tunneling the object through the wall
    config = default_config(n_objects=1)
    world = sim.make_world(config, [{"x": 0.5, "y": 0.052, "mu_s": 0.51, "mu_d": 0.4}],
                           ee=(0.5, 0.13))
    for _ in range(30):
        world.step((0.0, -0.001))
        assert world.max_penetration() <= 1e-9
    assert not world.fallen[0]
    assert world.pos[0, 1] >= world.config.obj_radius - 1e-12
    # EE stopped above the pinned object instead of passing through:
    # object center bottoms out at obj_radius, EE center at + (obj_r + ee_r)
    stop = world.config.obj_radius + world.config.obj_radius + world.config.ee_radius
    assert world.ee[1] >= stop - 1e-6


def test_z_tracks_theta():
    world = single_object_world(theta=0.3)
    h = world.config.obj_height
    assert world.object_state(0).z == pytest.approx((h / 2) * math.cos(0.3), abs=1e-15)


# ---------------------------------------------------------------------------
# tilt_deg / is_violation


def test_tilt_deg_conversions():
    mk = lambda t: sim.ObjectState(0, 0, 0, t, (1, 0), False)
    assert sim.tilt_deg(mk(0.0)) == 0.0
    assert sim.tilt_deg(mk(math.pi / 2)) == 90.0
    assert sim.tilt_deg(mk(0.2618)) == pytest.approx(15.0, abs=1e-3)
    assert sim.tilt_deg(mk(math.pi / 12)) == pytest.approx(15.0, abs=1e-9)


def test_is_violation_inclusive_threshold():
    mk = lambda t, fallen=False: sim.ObjectState(0, 0, 0, t, (1, 0), fallen)
    assert not sim.is_violation(mk(math.radians(14.99)))
    assert sim.is_violation(mk(math.radians(15.0)))
    assert sim.is_violation(mk(math.pi / 2, fallen=True))
    with pytest.raises(ConfigError):
        sim.is_violation(mk(0.0), threshold_deg=0.0)


# ---------------------------------------------------------------------------
# snapshot / restore


def test_snapshot_roundtrip_identity():
    world = sim.spawn_world(default_config(n_objects=5), seed=11)
    world.step((0.01, 0.003))
    blob = sim.snapshot(world)
    again = sim.snapshot(sim.restore(blob, world.config))
    assert blob == again


def test_snapshot_replay_bitwise():
    cfg = default_config(n_objects=4)
    world = sim.spawn_world(cfg, seed=5)
    rng = np.random.default_rng(9)
    actions = rng.uniform(-0.01, 0.01, (60, 2))
    for a in actions[:10]:
        world.step(a)
    mid = sim.snapshot(world)
    rest = []
    for a in actions[10:]:
        world.step(a)
        rest.append(sim.snapshot(world))
    replay = sim.restore(mid, cfg)
    for a, expected in zip(actions[10:], rest):
        replay.step(a)
        assert sim.snapshot(replay) == expected


def test_snapshot_config_mismatch():
    world = sim.spawn_world(default_config(n_objects=2), seed=0)
    blob = sim.snapshot(world)
    other = default_config(n_objects=2, max_step=0.02)
    with pytest.raises(CorruptSnapshot):
        sim.restore(blob, other)


def test_snapshot_truncated_and_garbled():
    world = sim.spawn_world(default_config(n_objects=2), seed=0)
    blob = sim.snapshot(world)
    with pytest.raises(CorruptSnapshot):
        sim.restore(blob[:-5], world.config)
    with pytest.raises(CorruptSnapshot):
        sim.restore(b"XXXXXXXX" + blob[8:], world.config)


# ---------------------------------------------------------------------------
# invariants & properties


def test_property_determinism_and_non_penetration():
    for seed in range(8):
        cfg = default_config(n_objects=int(np.random.default_rng(seed).integers(1, 12)))
        w1 = sim.spawn_world(cfg, seed=seed)
        w2 = sim.spawn_world(cfg, seed=seed)
        rng = np.random.default_rng(seed + 100)
        goal = rng.uniform(0.2, 1.0, 2)
        for _ in range(50):
            a = sim.clamp_norm(goal - w1.ee, cfg.max_step) + rng.uniform(-0.004, 0.004, 2)
            w1.step(a)
            w2.step(a)
            assert sim.snapshot(w1) == sim.snapshot(w2)
            assert w1.max_penetration() <= 1e-9


def test_property_tilt_monotone_under_sustained_push():
    world = single_object_world()
    prev = 0.0
    for _ in range(8):
        report = world.step((0.001, 0.0))
        assert (-1, 0) in report.contacts
        assert world.theta[0] >= prev
        prev = world.theta[0]
    # contact ceases: recovery may now shrink theta
    world.step((-0.01, 0.0))
    world.step((0.0, 0.0))
    assert world.theta[0] < prev


def test_property_recovery_step_count():
    # expected = ceil(theta0 / tilt_restore_rate) with rate 0.05
    for theta0, expected in ((0.2, 4), (0.12, 3), (0.049, 1), (0.3, 6)):
        world = single_object_world(theta=theta0, ee=(0.2, 0.2), obj_x=0.8, obj_y=0.8)
        steps = 0
        while world.theta[0] > 0.0:
            world.step((0.0, 0.0))
            steps += 1
            assert steps < 100
        assert steps == expected


def test_property_irreversibility():
    world = single_object_world(theta=0.2)
    world.step((0.01, 0.0))
    assert world.fallen[0]
    rng = np.random.default_rng(0)
    for _ in range(40):
        world.step(rng.uniform(-0.01, 0.01, 2))
        assert world.fallen[0] and world.theta[0] == math.pi / 2


def test_property_quasi_static_fixed_point():
    world = sim.spawn_world(default_config(n_objects=6), seed=2)
    pos = world.pos.copy()
    ee = world.ee.copy()
    for _ in range(5):
        world.step((0.0, 0.0))
    assert np.array_equal(world.pos, pos)
    assert np.array_equal(world.ee, ee)
    assert np.all(world.theta == 0.0)


def test_ee_next_position_matches_step_kinematics():
    world = sim.spawn_world(default_config(n_objects=0), seed=1)
    target = sim.ee_next_position(world.ee, (0.5, 0.5), world.config)
    world.step((0.5, 0.5))
    assert np.array_equal(world.ee, target)
