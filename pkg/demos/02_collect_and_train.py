"""Collect labeled interaction data and train a small barrier function.

A scaled-down version of the full pipeline so it finishes in about a minute:
fewer trajectories and a lighter network than the defaults.

Run:  python3 demos/02_collect_and_train.py
"""

from dcbf import data as dd
from dcbf import sim
from dcbf import training as tr
from dcbf.model import ArchSpec

world_config = sim.WorldConfig(n_objects=4)

print("collecting 40 back-stepping trajectories on 4-object worlds ...")
dataset = dd.collect("backstep", 40, world_config, episode_len=80, seed=11)
print("  raw:", dataset.manifest["counts"])

# Balancing drops free-space records: objects far from the EE that never moved.
dataset = dd.balance(dataset)
print("  balanced:", dataset.manifest["counts"])

cfg = tr.TrainConfig(sigma=0.02, epochs=8, batch_size=256, seed=0,
                     holdout_fraction=0.15)
arch = ArchSpec(lstm_hidden=32, robot_layers=(32, 32), fusion_layers=(32, 32))
print("\ntraining", arch.lstm_hidden, "hidden units,", cfg.epochs, "epochs ...")
barrier, log = tr.train_initial(dataset, cfg, arch=arch)
print(tr.log_to_text(log))

values = tr.predict_current_values(barrier, dataset.records[:6])
print("\nsample barrier values (>= 0 means predicted safe):")
for rec, v in zip(dataset.records[:6], values):
    print(f"  label={rec.label:6s}  B={v:+.3f}")

barrier.save("/tmp/dcbf_demo.ckpt")
print("\ncheckpoint saved to /tmp/dcbf_demo.ckpt")
dd.save_dataset(dataset, "/tmp/dcbf_demo_data")
print("dataset saved to /tmp/dcbf_demo_data.{dataset,snapshots}")
