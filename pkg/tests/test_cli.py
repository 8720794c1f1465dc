import json
import subprocess
import sys

import numpy as np
import pytest

from fanbench.cli import EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, main
from fanbench.data import load_dataset
from fanbench.tracker import TrackerTrainingError

TINY = {
    "dataset": {"n_train": 2, "n_val": 1, "n_test": 1, "frames": [12, 14], "max_distractors": 0},
    "pairs": {"n_pairs": 4, "max_gap": 5},
    "tracker": {"epochs": 1, "batch_size": 2},
    "fan": {"epochs": 1, "batch_size": 2, "base_channels": 4, "n_blocks": 1, "disc_channels": 4},
    "fan_pairs": {"n_pairs": 2, "max_gap": 5},
    "validation": {"clips": 1, "max_frames": 5},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["make-data", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    with_data = dict(TINY, data=str(root / "data"))
    cfg.write_text(json.dumps(with_data))
    assert main(["train-tracker", "--config", str(cfg), "--variant", "B",
                 "--out", str(root / "t.pt")]) == EXIT_OK
    return root, cfg


def test_make_data_writes_splits(workspace):
    root, _ = workspace
    assert [len(load_dataset(root / "data" / s)) for s in ("train", "val", "test")] == [2, 1, 1]


def test_train_fan_attack_evaluate_report(workspace, capsys):
    root, cfg = workspace
    assert main(["train-fan", "--tracker", str(root / "t.pt"), "--preset", "untargeted",
                 "--config", str(cfg), "--out", str(root / "g.pt")]) == EXIT_OK
    meta = json.loads((root / "g.json").read_text())
    assert meta["preset"] == "untargeted" and len(meta["validation"]) == 2

    spec = root / "attack.json"
    spec.write_text(json.dumps({"kind": "fan_untargeted", "generator": str(root / "g.pt")}))
    clip = next((root / "data" / "test").iterdir())
    assert main(["attack", "--tracker", str(root / "t.pt"), "--video", str(clip),
                 "--attack", str(spec), "--out", str(root / "traj.csv")]) == EXIT_OK
    assert (root / "traj.csv").read_text().startswith("frame,x,y,w,h")

    capsys.readouterr()
    assert main(["evaluate", "--tracker", str(root / "t.pt"), "--videos", str(root / "data" / "test"),
                 "--attack", str(spec), "--protocol", "restart", "--out", str(root / "rep")]) == EXIT_OK
    table = capsys.readouterr().out
    assert "| metric |" in table and "mean_failures" in table
    assert main(["report", "--in", str(root / "rep"), "--format", "json"]) == EXIT_OK
    data = json.loads(capsys.readouterr().out)
    assert [d["attack"] for d in data] == ["none", "fan_untargeted"]
    assert (root / "rep" / "plots").is_dir()


@pytest.mark.parametrize("argv", [
    ["make-data", "--config", "{missing}", "--out", "{out}"],
    ["report", "--in", "{missing}"],
    ["evaluate", "--tracker", "{missing}", "--videos", "{out}", "--out", "{out}"],
])
def test_invalid_inputs_exit_2(tmp_path, argv):
    argv = [a.format(missing=tmp_path / "nope.json", out=tmp_path / "o") for a in argv]
    assert main(argv) == EXIT_INVALID


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"datset": {}}))
    assert main(["make-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_INVALID
    assert "datset" in capsys.readouterr().err


def test_bad_attack_spec_exit_2(workspace, tmp_path):
    root, _ = workspace
    spec = tmp_path / "a.json"
    spec.write_text(json.dumps({"kind": "laser"}))
    clip = next((root / "data" / "test").iterdir())
    assert main(["attack", "--tracker", str(root / "t.pt"), "--video", str(clip),
                 "--attack", str(spec), "--out", str(tmp_path / "t.csv")]) == EXIT_INVALID


def test_divergence_exit_3(workspace, monkeypatch, capsys):
    root, cfg = workspace

    def diverge(*args, **kw):
        raise TrackerTrainingError("loss became nan", [1.0, float("nan")])

    monkeypatch.setattr("fanbench.cli.fit_tracker", diverge)
    assert main(["train-tracker", "--config", str(cfg), "--out", str(root / "x.pt")]) == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_seed_environment_overrides_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "dataset": {"n_train": 1, "n_val": 0, "n_test": 0,
                                                      "frames": [5, 6], "max_distractors": 0}}))

    def run(env_seed, out):
        env = {"FANBENCH_SEED": str(env_seed)} if env_seed is not None else {}
        code = ("import sys, os; os.environ.update(%r); from fanbench.cli import main; "
                "sys.exit(main(sys.argv[1:]))" % env)
        subprocess.run([sys.executable, "-c", code, "make-data", "--config", str(cfg),
                        "--out", str(out)], check=True)
        return load_dataset(out / "train")[0].frames

    base = run(None, tmp_path / "a")
    np.testing.assert_array_equal(run(1, tmp_path / "b"), base)
    assert not np.array_equal(run(2, tmp_path / "c"), base)
