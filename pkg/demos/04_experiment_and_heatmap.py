"""Mini experiment grid and a barrier-field heatmap dump.

Compares do-nothing, APF, and the filtered controller on shared seeded
worlds, then exports a grid of global barrier values over candidate EE
positions (the CSV is easy to plot with matplotlib or any spreadsheet).

Run 02 and 03 first, or point CKPT at your own checkpoint.
"""

from dcbf import sim
from dcbf.filter import WindowTracker
from dcbf.harness import (ExperimentConfig, export_heatmap, export_table,
                          heatmap_grid, run_experiment, table_to_text)
from dcbf.model import BarrierModel

CKPT = "/tmp/dcbf_demo.ckpt"

barrier = BarrierModel.load(CKPT)
cfg = ExperimentConfig(object_counts=(4, 10), episodes=10,
                       policies=("donothing", "apf", "dcbf"),
                       step_cap=300, master_seed=3,
                       history_len=barrier.arch.history_len)
print("running 10 episodes per cell (same worlds for every policy) ...")
rows = run_experiment(cfg, barriers={"dcbf": barrier})
print(table_to_text(rows))
export_table(rows, "/tmp/dcbf_demo_metrics")
print("\nmetrics -> /tmp/dcbf_demo_metrics.{csv,txt}")

world = sim.spawn_world(sim.WorldConfig(n_objects=10), seed=4)
scene = WindowTracker(world, barrier.arch.history_len).scene(world)
xs, ys, grid = heatmap_grid(barrier, scene, resolution=48)
export_heatmap("/tmp/dcbf_demo_field.csv", xs, ys, grid)
print("barrier field over candidate EE positions -> /tmp/dcbf_demo_field.csv")
print(f"field range: [{grid.min():+.3f}, {grid.max():+.3f}]; "
      f"negative cells are predicted-unsafe robot positions")
