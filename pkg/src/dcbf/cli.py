"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error (corrupt or
missing artifacts).
"""

import argparse
import json
import sys

from . import config as cfgmod
from . import data as dd
from . import sim
from . import training as tr
from .errors import (ConfigError, CorruptCheckpoint, CorruptDataset,
                     CorruptSnapshot, DcbfError, MissingCheckpoint,
                     PlacementInfeasible, VersionMismatch)
from .filter import WindowTracker
from .harness import (ExperimentConfig, export_heatmap, export_table,
                      heatmap_grid, run_episode, run_experiment, table_to_text)
from .model import ArchSpec, BarrierModel

_DATA_ERRORS = (CorruptDataset, CorruptSnapshot, CorruptCheckpoint,
                VersionMismatch, MissingCheckpoint, PlacementInfeasible,
                FileNotFoundError, IsADirectoryError, PermissionError)


def build_parser():
    parser = argparse.ArgumentParser(prog="dcbf", description=__doc__)
    parser.add_argument("--config", help="JSON config file overlaying the defaults")
    parser.add_argument("--seed", type=int, help="override the seed of the subcommand")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="roll out a collection policy into a dataset")
    p.add_argument("--policy", default="backstep", choices=("donothing", "backstep", "apf"))
    p.add_argument("--n-traj", type=int, default=200)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--episode-len", type=int, default=80)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True, help="dataset base path")
    p.add_argument("--balance", action="store_true", help="drop free-space records")

    p = sub.add_parser("train", help="initial barrier training on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--sigma", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="write the per-epoch training log here")

    p = sub.add_parser("refine", help="boundary refinement of a trained barrier")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--s", dest="steps", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--mode", choices=("both", "unsafe-only", "safe-only"))
    p.add_argument("--log", help="write per-batch refinement metrics here")

    p = sub.add_parser("eval", help="run the experiment grid and export metrics")
    p.add_argument("--counts", default="4,10,20,40")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--policies", default="donothing,backstep,apf")
    p.add_argument("--ckpt", help="checkpoint for dcbf policies")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="metrics base path")

    p = sub.add_parser("demo", help="run one episode verbosely")
    p.add_argument("--policy", default="donothing")
    p.add_argument("--ckpt")
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--heatmap", help="dump a barrier-field grid CSV of the start state")
    p.add_argument("--heatmap-res", type=int, default=40)

    p = sub.add_parser("inspect-dataset", help="print a dataset's manifest and counts")
    p.add_argument("--data", required=True)
    p.add_argument("--records", type=int, default=3, help="sample records to print")

    p = sub.add_parser("heatmap", help="barrier-field grid for a fresh world")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--res", type=int, default=40)
    p.add_argument("--out", required=True)

    p = sub.add_parser("show-config", help="print the effective configuration")
    return parser


def _seeded(args, default):
    if getattr(args, "seed", None) is not None:
        return args.seed
    return default


def cmd_collect(args, cfg):
    world = cfgmod.world_config(cfg, n_objects=args.objects)
    ds = dd.collect(args.policy, args.n_traj, world, args.episode_len,
                    _seeded(args, 7), history_len=cfg["safety"]["history_len"],
                    snapshot_stride=args.stride,
                    threshold_deg=cfg["safety"]["threshold_deg"])
    if args.balance:
        ds = dd.balance(ds)
    paths = dd.save_dataset(ds, args.out)
    counts = ds.manifest["counts"]
    print(f"collected {counts['total']} records "
          f"({counts['safe']} safe / {counts['unsafe']} unsafe) -> {paths[0]}")
    return 0


def cmd_train(args, cfg):
    ds = dd.load_dataset(args.data)
    overrides = {k: getattr(args, k) for k in
                 ("sigma", "gamma", "epochs", "lr", "batch_size", "seed")
                 if getattr(args, k, None) is not None}
    tcfg = cfgmod.train_config(cfg, **overrides)
    arch = ArchSpec(history_len=ds.manifest.get("history_len", 8))
    barrier, log = tr.train_initial(ds, tcfg, arch=arch)
    barrier.save(args.out)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(tr.log_to_text(log) + "\n")
    acc = log[-1]["holdout_acc"] if log else None
    print(f"trained {tcfg.epochs} epochs on {len(ds)} records; "
          f"holdout accuracy {acc}; checkpoint -> {args.out}")
    return 0


def cmd_refine(args, cfg):
    ds = dd.load_dataset(args.data)
    barrier = BarrierModel.load(args.ckpt)
    overrides = {k: v for k, v in (("delta", args.delta), ("steps", args.steps),
                                   ("n_batches", args.batches), ("mode", args.mode))
                 if v is not None}
    rcfg = cfgmod.refine_config(cfg, **overrides)
    tcfg = cfgmod.train_config(cfg, **({"seed": args.seed} if args.seed is not None else {}))
    barrier, metrics = tr.refine_loop(barrier, ds, rcfg, tcfg)
    barrier.save(args.out)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            json.dump(metrics, fh, indent=2)
    final = metrics[-1]["misclassified"] if metrics else 0
    print(f"refined {len(metrics)} batches; dataset misclassifications {final}; "
          f"checkpoint -> {args.out}")
    return 0


def cmd_eval(args, cfg):
    counts = tuple(int(c) for c in args.counts.split(","))
    policies = tuple(args.policies.split(","))
    barriers = {}
    for pid in policies:
        if pid.startswith("dcbf"):
            if not args.ckpt:
                raise MissingCheckpoint("eval with a dcbf policy needs --ckpt")
            barriers[pid] = BarrierModel.load(args.ckpt)
    ecfg = ExperimentConfig(
        object_counts=counts, episodes=args.episodes, policies=policies,
        step_cap=cfg["experiment"]["step_cap"], master_seed=_seeded(args, 0),
        world=cfgmod.world_config(cfg),
        goal_tolerance=cfg["experiment"]["goal_tolerance"],
        stall_patience=cfg["experiment"]["stall_patience"],
        threshold_deg=cfg["safety"]["threshold_deg"],
        history_len=cfg["safety"]["history_len"])
    rows = run_experiment(ecfg, barriers, filter_cfg=cfgmod.filter_config(cfg),
                          apf_cfg=cfgmod.apf_config(cfg))
    paths = export_table(rows, args.out)
    print(table_to_text(rows))
    print(f"exported -> {', '.join(paths)}")
    return 0


def cmd_demo(args, cfg):
    world_cfg = cfgmod.world_config(cfg, n_objects=args.objects)
    barrier = BarrierModel.load(args.ckpt) if args.ckpt else None
    policy = args.policy
    if policy.startswith("dcbf") and barrier is None:
        raise MissingCheckpoint("demo with the dcbf policy needs --ckpt")
    if args.heatmap:
        if barrier is None:
            raise MissingCheckpoint("--heatmap needs --ckpt")
        world = sim.spawn_world(world_cfg, _seeded(args, 0))
        scene = WindowTracker(world, cfg["safety"]["history_len"]).scene(world)
        xs, ys, grid = heatmap_grid(barrier, scene, args.heatmap_res)
        export_heatmap(args.heatmap, xs, ys, grid)
        print(f"barrier field ({args.heatmap_res}x{args.heatmap_res}) -> {args.heatmap}")
    result = run_episode(world_cfg, policy, _seeded(args, 0), barrier=barrier,
                         filter_cfg=cfgmod.filter_config(cfg),
                         apf_cfg=cfgmod.apf_config(cfg), step_cap=args.steps,
                         threshold_deg=cfg["safety"]["threshold_deg"],
                         history_len=cfg["safety"]["history_len"],
                         stall_patience=cfg["experiment"]["stall_patience"],
                         collect_reports=barrier is not None and policy.startswith("dcbf"))
    print(f"policy={policy} seed={_seeded(args, 0)} objects={args.objects}")
    print(f"reached={result.reached} violated={result.violated} "
          f"stalled={result.stalled} steps={result.steps_used}")
    print(f"final_distance={result.final_distance:.4f} "
          f"max_tilt_deg={result.max_tilt_deg:.2f}")
    if result.reports:
        n_blocked = sum(not r.passed_nominal for r in result.reports)
        print(f"filter interventions: {n_blocked}/{len(result.reports)} steps")
    return 0


def cmd_inspect(args, cfg):
    ds = dd.load_dataset(args.data)
    print(json.dumps(ds.manifest, indent=2, sort_keys=True))
    print(f"snapshots: {len(ds.snapshots)}")
    for rec in ds.records[: args.records]:
        print(f"record traj={rec.trajectory_id} step={rec.step_index} "
              f"obj={rec.object_id} label={rec.label} snapshot={rec.snapshot_ref}")
    return 0


def cmd_heatmap(args, cfg):
    barrier = BarrierModel.load(args.ckpt)
    world = sim.spawn_world(cfgmod.world_config(cfg, n_objects=args.objects),
                            _seeded(args, 0))
    scene = WindowTracker(world, cfg["safety"]["history_len"]).scene(world)
    xs, ys, grid = heatmap_grid(barrier, scene, args.res)
    export_heatmap(args.out, xs, ys, grid)
    print(f"barrier field ({args.res}x{args.res}) -> {args.out}")
    return 0


_COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "demo": cmd_demo,
    "inspect-dataset": cmd_inspect,
    "heatmap": cmd_heatmap,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        cfg = cfgmod.load_config(args.config)
        if args.command == "show-config":
            print(cfgmod.config_to_json(cfg))
            return 0
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DcbfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
