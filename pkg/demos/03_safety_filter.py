"""The sampling safety filter in action, plus boundary refinement.

Loads the checkpoint written by 02_collect_and_train.py (run that first),
refines it for a few batches, then shows the filter overriding a reckless
nominal controller.

Run:  python3 demos/03_safety_filter.py
"""

import numpy as np

from dcbf import data as dd
from dcbf import sim
from dcbf import training as tr
from dcbf.baselines import GoalSpec, do_nothing_action
from dcbf.filter import FilterConfig, WindowTracker, filter_action
from dcbf.model import BarrierModel

barrier = BarrierModel.load("/tmp/dcbf_demo.ckpt")
dataset = dd.load_dataset("/tmp/dcbf_demo_data")
world_config = sim.WorldConfig.from_dict(dataset.manifest["world_config"])

print("refining near-boundary samples with the safest-control rollouts ...")
before = tr.misclassification_count(barrier, dataset.records)
barrier, metrics = tr.refine_loop(
    barrier, dataset, tr.RefineConfig(n_batches=3, samples_per_batch=16),
    tr.TrainConfig(sigma=0.02, seed=0, holdout_fraction=0.15))
for row in metrics:
    print(" ", row)
print(f"misclassified records: {before} -> "
      f"{tr.misclassification_count(barrier, dataset.records)}")

# Drive straight at an object; watch the filter peel off or slow down.
world = sim.make_world(world_config,
                       [{"x": 0.5, "y": 0.6}, {"x": 0.62, "y": 0.6},
                        {"x": 0.56, "y": 0.72}, {"x": 0.8, "y": 0.4}],
                       ee=(0.1, 0.6))
goal = GoalSpec(1.05, 0.6)
tracker = WindowTracker(world, barrier.arch.history_len)
fcfg = FilterConfig()

print("\nstep | nominal        | executed       | B_global | note")
for step in range(250):
    u_nom = do_nothing_action(world.ee, goal, world_config.max_step)
    scene = tracker.scene(world)
    u, rep = filter_action(barrier, scene, u_nom, fcfg)
    world.step(u)
    tracker.update(world)
    if step % 25 == 0 or not rep.passed_nominal and step % 5 == 0:
        note = "pass" if rep.passed_nominal else (
            "NO SAFE ACTION -> stay" if rep.no_safe_action else "substituted")
        print(f"{step:4d} | ({u_nom[0]:+.4f},{u_nom[1]:+.4f}) | "
              f"({u[0]:+.4f},{u[1]:+.4f}) | {rep.nominal_value:+8.3f} | {note}")
    if np.hypot(*(world.ee - goal.vec)) <= goal.tolerance:
        print(f"reached the goal in {step + 1} steps")
        break

tilts = [sim.tilt_deg(world.object_state(i)) for i in range(world.n_objects)]
print(f"\nmax tilt along the way: {max(tilts):.1f} deg "
      f"(threshold {sim.DEFAULT_SAFETY_THRESHOLD_DEG} deg); "
      f"fallen: {int(world.fallen.sum())}")
