import numpy as np
import pytest

from dcbf import filter as flt
from dcbf import model as dm
from dcbf import sim
from dcbf.errors import ConfigError

T = 4
ARCH = dm.ArchSpec(history_len=T, lstm_hidden=8, robot_layers=(8, 8), fusion_layers=(8, 8))


class FakeBarrier:
    """value_table driven by a scalar function of (robot_next, last object xy)."""

    def __init__(self, fn):
        self.fn = fn
        self.eval_count = 0

    def value_table(self, windows, robot_nexts):
        out = np.array([[self.fn(r, w) for w in windows] for r in robot_nexts])
        self.eval_count += out.size
        return out.reshape(len(robot_nexts), len(windows))


def make_scene(robot=(0.3, 0.6), objects=((0.5, 0.6),), drift=0.0, fallen=None,
               config=None):
    config = config or sim.WorldConfig(n_objects=len(objects))
    objects = np.asarray(objects, dtype=np.float64).reshape(-1, 2)
    n = objects.shape[0]
    windows = np.zeros((n, T + 2, 4))
    for i in range(n):
        windows[i, :, 0] = objects[i, 0] - drift * np.arange(T + 2)[::-1]
        windows[i, :, 1] = objects[i, 1]
        windows[i, :, 2] = 0.1
    fallen = np.zeros(n, dtype=bool) if fallen is None else np.asarray(fallen, dtype=bool)
    return flt.SceneObs(robot=np.asarray(robot, dtype=np.float64), windows=windows,
                        fallen=fallen, config=config)


def always(value):
    return FakeBarrier(lambda r, w: value)


# ---------------------------------------------------------------------------
# relevance


def test_relevant_objects_by_radius_and_motion():
    cfg = flt.FilterConfig(relevance_radius=0.3, motion_window_eps=1e-4)
    scene = make_scene(objects=[(0.5, 0.6), (1.1, 0.6)])
    assert list(flt.relevant_objects(scene, cfg)) == [0]
    # distant object that moved within the window is included
    moving = make_scene(objects=[(0.5, 0.6), (1.1, 0.6)], drift=0.001)
    assert list(flt.relevant_objects(moving, cfg)) == [0, 1]


def test_relevant_objects_infinite_radius_and_fallen():
    cfg = flt.FilterConfig(relevance_radius=np.inf)
    scene = make_scene(objects=[(0.5, 0.6), (1.1, 0.6), (0.9, 0.2)],
                       fallen=[False, False, True])
    assert list(flt.relevant_objects(scene, cfg)) == [0, 1]


# ---------------------------------------------------------------------------
# candidate set


def test_candidate_actions_shape_and_clamp():
    cfg = flt.FilterConfig()
    u_nom = np.array([0.01, 0.0])
    cands = flt.candidate_actions(u_nom, cfg, 0.01)
    norms = np.hypot(cands[:, 0], cands[:, 1])
    assert np.all(norms <= 0.01 + 1e-12)
    assert any(np.array_equal(c, np.zeros(2)) for c in cands)  # stay included
    assert not any(np.array_equal(c, u_nom) for c in cands)    # nominal excluded
    assert len({c.tobytes() for c in cands}) == len(cands)     # deduplicated


# ---------------------------------------------------------------------------
# filter contract


def test_pass_through_bitwise():
    cfg = flt.FilterConfig()
    scene = make_scene()
    u_nom = np.array([0.0071234, -0.0022])
    out, report = flt.filter_action(always(0.4), scene, u_nom, cfg)
    assert out.tobytes() == u_nom.tobytes()
    assert report.passed_nominal and report.candidates_evaluated == 1
    assert report.chosen_value == 0.4


def test_empty_relevant_set_passes_with_zero_evals():
    cfg = flt.FilterConfig(relevance_radius=0.05)
    scene = make_scene(objects=[(1.1, 0.1)])
    barrier = always(-1.0)  # would block, but nothing is relevant
    out, report = flt.filter_action(barrier, scene, np.array([0.01, 0.0]), cfg)
    assert report.passed_nominal
    assert report.nominal_value == float("inf")
    assert report.barrier_evals == 0 and barrier.eval_count == 0


def test_unsafe_nominal_picks_nearest_safe_candidate():
    # safe iff next robot position retreats from the object: barrier favors
    # candidates on the far side, argmin distance among them must win
    cfg = flt.FilterConfig()
    scene = make_scene(robot=(0.42, 0.6), objects=[(0.5, 0.6)])

    def fn(robot_next, window):
        return 0.3 if robot_next[0] <= 0.42 else -0.2

    out, report = flt.filter_action(FakeBarrier(fn), scene, np.array([0.01, 0.0]), cfg)
    assert not report.passed_nominal and not report.no_safe_action
    safe_idx = np.flatnonzero(report.candidate_safe)
    best = safe_idx[np.argmin(report.distances[safe_idx])]
    assert report.chosen_index == best
    assert np.array_equal(out, report.candidates[best])
    assert report.chosen_value >= 0.0


def test_all_unsafe_falls_back_to_stay():
    cfg = flt.FilterConfig()
    scene = make_scene()
    out, report = flt.filter_action(always(-0.5), scene, np.array([0.01, 0.0]), cfg)
    assert report.no_safe_action
    assert np.array_equal(out, np.zeros(2))
    assert report.chosen_index == -1 and report.chosen_value is None


def test_backstep_fallback_moves_toward_waypoint():
    cfg = flt.FilterConfig(fallback="backstep")
    scene = make_scene()
    scene.prev_waypoint = np.array([0.25, 0.6])
    out, report = flt.filter_action(always(-0.5), scene, np.array([0.01, 0.0]), cfg)
    assert report.no_safe_action
    assert out[0] < 0  # retreating toward the waypoint


def test_filter_brute_force_oracle(rng):
    # output must equal an exhaustive recomputation over the candidate set
    m = dm.BarrierModel.initialize(ARCH, seed=0)
    # shift the head bias so values straddle zero
    bias = m.store["fusion/b2"].copy()
    cfg = flt.FilterConfig()
    world_cfg = sim.WorldConfig(n_objects=2)
    for trial in range(40):
        m.store.set_("fusion/b2", bias + rng.uniform(-0.3, 0.3, bias.shape))
        robot = rng.uniform(0.3, 0.9, 2)
        objs = robot + rng.uniform(-0.12, 0.12, (2, 2))
        scene = make_scene(robot=robot, objects=objs, config=world_cfg)
        u_nom = rng.uniform(-0.01, 0.01, 2)
        out, report = flt.filter_action(m, scene, u_nom, cfg)

        rel = flt.relevant_objects(scene, cfg)
        hist = scene.windows[rel][:, 1:, :]

        def gval(u):
            nxt = sim.ee_next_position(robot, u, world_cfg)
            obs = [dm.to_object_frame(nxt, dm.ObjectHistory(i, hist[k]))
                   for k, i in enumerate(rel)]
            return m.global_barrier(obs)

        if gval(u_nom) >= 0:
            assert report.passed_nominal and out.tobytes() == u_nom.tobytes()
            continue
        cands = flt.candidate_actions(u_nom, cfg, world_cfg.max_step)
        values = np.array([gval(u) for u in cands])
        assert np.array_equal(values, report.candidate_values)
        safe = np.flatnonzero(values >= 0)
        if safe.size == 0:
            assert report.no_safe_action and np.array_equal(out, np.zeros(2))
        else:
            dists = np.hypot(*(cands - u_nom).T)
            expect = safe[np.argmin(dists[safe])]
            assert report.chosen_index == expect
            assert np.array_equal(out, cands[expect])


def test_eval_count_linearity(rng):
    m = dm.BarrierModel.initialize(ARCH, seed=1)
    cfg = flt.FilterConfig()
    scene = make_scene(robot=(0.44, 0.6), objects=[(0.5, 0.6), (0.56, 0.66)])
    for shift in (-3.0, 0.0):  # force sweep and pass-through
        m.store.set_("fusion/b2", np.array([shift]))
        m.reset_eval_count()
        _, report = flt.filter_action(m, scene, np.array([0.01, 0.0]), cfg)
        n_rel = len(report.relevant)
        assert report.barrier_evals == report.candidates_evaluated * n_rel
        assert m.eval_count == report.barrier_evals


def test_filter_does_not_mutate_scene():
    cfg = flt.FilterConfig()
    scene = make_scene()
    before = (scene.windows.tobytes(), scene.robot.tobytes(), scene.fallen.tobytes())
    flt.filter_action(always(-1.0), scene, np.array([0.01, 0.0]), cfg)
    after = (scene.windows.tobytes(), scene.robot.tobytes(), scene.fallen.tobytes())
    assert before == after


def test_decrease_mode_is_stricter():
    cfg = flt.FilterConfig(decrease_mode=True, gamma=0.1)
    scene = make_scene()

    # next value positive but below (1 - gamma) * current -> rejected
    def fn(robot_next, window):
        return 1.0 if np.array_equal(robot_next, scene.robot) else 0.5

    _, report = flt.filter_action(FakeBarrier(fn), scene, np.array([0.01, 0.0]), cfg)
    assert not report.passed_nominal
    assert report.current_value == 1.0
    plain = flt.FilterConfig(decrease_mode=False)
    _, report2 = flt.filter_action(FakeBarrier(fn), scene, np.array([0.01, 0.0]), plain)
    assert report2.passed_nominal


def test_window_tracker_padding_and_shift():
    world = sim.spawn_world(sim.WorldConfig(n_objects=3), seed=2)
    tracker = flt.WindowTracker(world, history_len=T)
    first = world.state_rows()
    assert tracker.windows.shape == (3, T + 2, 4)
    assert np.array_equal(tracker.windows, np.repeat(first[:, None, :], T + 2, axis=1))
    world.step((0.01, 0.0))
    tracker.update(world)
    assert np.array_equal(tracker.windows[:, -1, :], world.state_rows())
    assert np.array_equal(tracker.windows[:, 0, :], first)


def test_filter_config_validation():
    with pytest.raises(ConfigError):
        flt.FilterConfig(n_candidates=0).validate()
    with pytest.raises(ConfigError):
        flt.FilterConfig(fallback="panic").validate()


def test_report_text_and_dict():
    cfg = flt.FilterConfig()
    scene = make_scene()
    _, report = flt.filter_action(always(-0.5), scene, np.array([0.01, 0.0]), cfg)
    d = report.to_dict()
    assert d["no_safe_action"] is True
    assert "nominal" in report.to_text()
