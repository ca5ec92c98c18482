import json

import pytest

from dcbf import cli
from dcbf import config as cfgmod
from dcbf.errors import ConfigError


def run(args):
    return cli.main(args)


# ---------------------------------------------------------------------------
# golden default configuration (paper-constant fidelity)


def test_golden_config_constants():
    cfg = cfgmod.default_config()
    assert cfg["safety"]["threshold_deg"] == 15.0
    assert cfg["world"]["max_step"] == 0.01
    assert cfg["safety"]["backstep_trigger_deg"] == 14.0
    assert cfg["apf"]["kp"] == 5.0
    assert cfg["apf"]["eta"] == 50.0
    assert cfg["apf"]["influence_len"] == 1.2
    assert cfg["apf"]["oscillation_len"] == 3
    assert cfg["refine"]["steps"] == 4
    assert cfg["safety"]["sigma_choices"] == [0.01, 0.02]
    assert cfg["train"]["sigma"] in cfg["safety"]["sigma_choices"]


def test_config_merge_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        cfgmod.merge_config({"world": {"tablesize": 2.0}})
    with pytest.raises(ConfigError):
        cfgmod.merge_config({"mystery": {}})
    merged = cfgmod.merge_config({"world": {"n_objects": 7}})
    assert merged["world"]["n_objects"] == 7


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"sigma": 0.01}}))
    cfg = cfgmod.load_config(path)
    assert cfg["train"]["sigma"] == 0.01


# ---------------------------------------------------------------------------
# CLI flows and exit codes


def test_cli_show_config(capsys):
    assert run(["show-config"]) == 0
    out = capsys.readouterr().out
    assert json.loads(out)["safety"]["threshold_deg"] == 15.0


def test_cli_bad_config_file_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["--config", str(bad), "show-config"]) == 2
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"nope": {}}))
    assert run(["--config", str(unknown), "show-config"]) == 2


def test_cli_missing_dataset_exits_3(tmp_path):
    assert run(["train", "--data", str(tmp_path / "absent"),
                "--out", str(tmp_path / "ckpt.bin")]) == 3


def test_cli_end_to_end_tiny(tmp_path, capsys):
    data = str(tmp_path / "mini")
    assert run(["collect", "--policy", "donothing", "--n-traj", "3",
                "--objects", "2", "--episode-len", "40", "--seed", "0",
                "--out", data]) == 0
    assert run(["inspect-dataset", "--data", data]) == 0

    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({
        "train": {"epochs": 2, "batch_size": 32, "holdout_fraction": 0.0},
        "refine": {"n_batches": 1, "samples_per_batch": 2, "fine_tune_epochs": 1,
                   "max_extra_epochs": 0},
    }))
    ckpt = str(tmp_path / "ckpt.bin")
    assert run(["--config", str(cfg), "train", "--data", data, "--out", ckpt]) == 0

    refined = str(tmp_path / "refined.bin")
    assert run(["--config", str(cfg), "refine", "--ckpt", ckpt, "--data", data,
                "--out", refined]) == 0

    metrics = str(tmp_path / "metrics")
    assert run(["eval", "--counts", "1", "--episodes", "1",
                "--policies", "donothing,dcbf", "--ckpt", refined,
                "--out", metrics]) == 0
    out = capsys.readouterr().out
    assert "donothing" in out and "dcbf" in out

    heat = str(tmp_path / "field.csv")
    assert run(["heatmap", "--ckpt", refined, "--objects", "2", "--seed", "1",
                "--res", "6", "--out", heat]) == 0
    assert len(open(heat).read().splitlines()) == 1 + 36

    assert run(["demo", "--policy", "dcbf", "--ckpt", refined, "--objects", "2",
                "--seed", "2", "--steps", "30"]) == 0


def test_cli_eval_dcbf_without_ckpt_exits_3(tmp_path):
    assert run(["eval", "--counts", "1", "--episodes", "1",
                "--policies", "dcbf", "--out", str(tmp_path / "m")]) == 3


def test_cli_corrupt_checkpoint_exits_3(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert run(["heatmap", "--ckpt", str(bad), "--out", str(tmp_path / "h.csv")]) == 3
