import numpy as np
import pytest

from dcbf import model as dm
from dcbf.errors import ShapeMismatch, ShortHistory, VersionMismatch

SMALL = dm.ArchSpec(history_len=4, lstm_hidden=8, robot_layers=(8, 8), fusion_layers=(8, 8))


def random_history(rng, t=4, object_id=0, origin=(0.5, 0.5)):
    entries = np.zeros((t + 1, 4))
    entries[:, :2] = np.asarray(origin) + rng.uniform(-0.02, 0.02, (t + 1, 2))
    entries[:, 2] = 0.1 * np.cos(rng.uniform(0, 0.3, t + 1))
    entries[:, 3] = rng.uniform(0, 0.3, t + 1)
    return dm.ObjectHistory(object_id=object_id, entries=entries)


def random_obs(rng, t=4):
    hist = random_history(rng, t)
    robot = hist.entries[-1, :2] + rng.uniform(-0.05, 0.05, 2)
    return dm.to_object_frame(robot, hist)


# ---------------------------------------------------------------------------
# to_object_frame


def test_to_object_frame_subtracts_anchor():
    entries = np.zeros((5, 4))
    entries[:, 0] = 0.2
    entries[:, 1] = 0.3
    hist = dm.ObjectHistory(0, entries)
    obs = dm.to_object_frame(np.array([0.25, 0.3]), hist)
    assert obs.rel_robot_next == pytest.approx([0.05, 0.0], abs=1e-15)
    assert obs.rel_history.shape == (4, 4)
    # stationary object: every planar entry is exactly zero
    assert np.array_equal(obs.rel_history[:, :2], np.zeros((4, 2)))


def test_to_object_frame_keeps_z_theta():
    entries = np.zeros((3, 4))
    entries[:, 2] = [0.1, 0.09, 0.08]
    entries[:, 3] = [0.0, 0.1, 0.2]
    obs = dm.to_object_frame(np.zeros(2), dm.ObjectHistory(0, entries))
    assert np.array_equal(obs.rel_history[:, 2], [0.09, 0.08])
    assert np.array_equal(obs.rel_history[:, 3], [0.1, 0.2])


def test_to_object_frame_translation_cancels(rng):
    hist = random_history(rng)
    robot = np.array([0.4, 0.45])
    base = dm.to_object_frame(robot, hist)
    offset = np.array([0.3, -0.2])
    shifted_entries = hist.entries.copy()
    shifted_entries[:, :2] += offset
    shifted = dm.to_object_frame(robot + offset, dm.ObjectHistory(0, shifted_entries))
    assert np.allclose(shifted.rel_robot_next, base.rel_robot_next, atol=1e-12)
    assert np.allclose(shifted.rel_history, base.rel_history, atol=1e-12)


def test_to_object_frame_short_history():
    with pytest.raises(ShortHistory):
        dm.to_object_frame(np.zeros(2), dm.ObjectHistory(0, np.zeros((1, 4))))


def test_windows_to_features_matches_scalar(rng):
    windows = np.stack([random_history(rng).entries for _ in range(6)])
    robot = rng.uniform(0.3, 0.7, 2)
    rel_robot, rel_hist = dm.windows_to_features(windows, robot)
    for i in range(6):
        obs = dm.to_object_frame(robot, dm.ObjectHistory(i, windows[i]))
        assert np.array_equal(rel_robot[i], obs.rel_robot_next)
        assert np.array_equal(rel_hist[i], obs.rel_history)


# ---------------------------------------------------------------------------
# barrier values


def test_barrier_value_pure(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=3)
    obs = random_obs(rng)
    assert m.barrier_value(obs) == m.barrier_value(obs)


def test_barrier_zero_params_outputs_zero(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=0)
    for name in m.store.names():
        m.store.set_(name, np.zeros_like(m.store[name]))
    assert m.barrier_value(random_obs(rng)) == 0.0


def test_barrier_translation_invariance_of_value(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=1)
    hist = random_history(rng)
    robot = np.array([0.52, 0.48])
    v0 = m.barrier_value(dm.to_object_frame(robot, hist))
    offset = np.array([0.31, -0.17])
    entries = hist.entries.copy()
    entries[:, :2] += offset
    v1 = m.barrier_value(dm.to_object_frame(robot + offset, dm.ObjectHistory(0, entries)))
    assert abs(v0 - v1) < 1e-12


def test_global_barrier_min_and_permutation(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=2)
    obs = [random_obs(rng) for _ in range(5)]
    values = [m.barrier_value(o) for o in obs]
    g = m.global_barrier(obs)
    assert g == min(values)
    perm = [obs[i] for i in (3, 0, 4, 1, 2)]
    assert m.global_barrier(perm) == g
    assert m.global_barrier([obs[2]]) == values[2]
    assert m.global_barrier([]) == float("inf")


def test_batched_barrier_bitwise_equals_scalar_loop(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=4)
    obs = [random_obs(rng) for _ in range(17)]
    batched = m.batched_barrier(obs)
    singles = np.array([m.barrier_value(o) for o in obs])
    assert np.array_equal(batched, singles)
    assert m.batched_barrier([obs[0]])[0] == singles[0]


def test_value_table_bitwise_equals_per_pair(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=5)
    windows = np.stack([random_history(rng).entries for _ in range(4)])
    robots = rng.uniform(0.3, 0.7, (6, 2))
    table = m.value_table(windows, robots)
    assert table.shape == (6, 4)
    for a in range(6):
        for i in range(4):
            obs = dm.to_object_frame(robots[a], dm.ObjectHistory(i, windows[i]))
            assert table[a, i] == m.barrier_value(obs)


def test_eval_counter_counts_rows(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=6)
    m.reset_eval_count()
    obs = [random_obs(rng) for _ in range(7)]
    m.global_barrier(obs)
    assert m.eval_count == 7
    m.value_table(np.stack([random_history(rng).entries for _ in range(3)]),
                  rng.uniform(0.3, 0.7, (5, 2)))
    assert m.eval_count == 7 + 15


def test_shape_mismatch_raises(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=7)
    with pytest.raises(ShapeMismatch):
        m.values(np.zeros((2, 3, 4)), np.zeros((2, 2)))  # wrong history length
    with pytest.raises(ShapeMismatch):
        m.values(np.zeros((2, 4, 4)), np.zeros((3, 2)))  # batch mismatch


# ---------------------------------------------------------------------------
# persistence


def test_model_checkpoint_roundtrip(rng):
    m = dm.BarrierModel.initialize(SMALL, seed=8)
    blob = m.save_bytes()
    again = dm.BarrierModel.from_bytes(blob)
    assert again.arch == m.arch
    obs = random_obs(rng)
    assert again.barrier_value(obs) == m.barrier_value(obs)
    assert again.save_bytes() == blob


def test_model_checkpoint_arch_mismatch():
    m = dm.BarrierModel.initialize(SMALL, seed=9)
    blob = m.save_bytes()
    with pytest.raises(VersionMismatch):
        dm.BarrierModel.from_bytes(blob, expect_arch=dm.ArchSpec())


def test_model_checkpoint_missing_arch():
    from dcbf import nn
    store = nn.ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(VersionMismatch):
        dm.BarrierModel.from_bytes(nn.save_params(store))
