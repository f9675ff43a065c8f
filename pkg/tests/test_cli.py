import json
import subprocess
import sys

import numpy as np
import pytest

from pef.cli import build_parser, main
from pef.config import defaults
from pef.data import load_coco_keypoints, read_image

TINY = """\
model.variant = deit
model.width = 32
model.height = 32
model.patch_size = 8
model.d_model = 16
model.n_heads = 2
model.encoder_depth = 1
model.decoder_depth = 1
model.num_queries = 6
model.num_joints = 5
schedule.batch_size = 4
schedule.epochs = 3
schedule.drop_epoch = 2
schedule.encoder_lr = 0.001
schedule.decoder_lr = 0.001
schedule.checkpoint_every = 0
augment.enabled = true
data.synthetic_count = 4
eval.batch_size = 3
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture
def trained(tmp_path, cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--deterministic"]) == 0
    return out


def read_metrics(path):
    return dict(line.split(" = ", 1) for line in path.read_text().strip().splitlines())


def test_usage_errors_exit_one(capsys):
    for argv in ([], ["nope"], ["train", "--bogus"], ["eval"], ["bench", "--dim", "x"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 1


def test_help_lists_every_flag_with_defaults():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    for name, p in sub.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
        assert "(default: None)" not in text
    train_help = " ".join(sub["train"].format_help().split())
    for key, value in defaults().items():
        if key.startswith("run.") and key.split(".")[1] in ("seed", "deterministic", "jobs", "out_dir"):
            continue
        assert f"--{key}" in train_help
    assert "(default: 1e-05)" in train_help and "--model.variant V (default: xcit)" in train_help


def test_synth_empty_and_deterministic(tmp_path, cfg):
    assert main(["synth", "--config", str(cfg), "--count", "0", "--out", str(tmp_path / "e")]) == 0
    assert len(load_coco_keypoints(tmp_path / "e" / "annotations.json")) == 0
    for run in ("a", "b"):
        assert main(["synth", "--config", str(cfg), "--count", "3", "--seed", "4",
                     "--data.synthetic_seed", "4", "--out", str(tmp_path / run)]) == 0
    a = (tmp_path / "a" / "annotations.json").read_bytes()
    assert a == (tmp_path / "b" / "annotations.json").read_bytes()
    ds = load_coco_keypoints(tmp_path / "a" / "annotations.json")
    assert len(ds) == 3 and ds[0].instance.num_joints == 5
    img = read_image(tmp_path / "a" / ds[0].file_name)
    assert img.shape == (32, 32, 3)
    assert json.loads(a)["categories"][0]["keypoints"][0] == "nose"


def test_synth_rejects_negative_count(tmp_path, cfg):
    assert main(["synth", "--config", str(cfg), "--count", "-1", "--out", str(tmp_path)]) == 1


def test_oracle_eval_synthetic_and_from_disk(tmp_path, cfg):
    out = tmp_path / "o"
    assert main(["eval", "--oracle", "--config", str(cfg), "--out", str(out)]) == 0
    m = read_metrics(out / "metrics.txt")
    assert float(m["AP"]) == 1.0 and float(m["AR"]) == 1.0 and m["model"] == "oracle"
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    out = tmp_path / "o2"
    assert main(["eval", "--oracle", "--config", str(cfg), "--out", str(out),
                 "--data.annotations", str(tmp_path / "s" / "annotations.json")]) == 0
    m = read_metrics(out / "metrics.txt")
    assert float(m["AP"]) == 1.0 and float(m["AR"]) == 1.0 and m["num_samples"] == "4"


def test_train_outputs_and_reproducibility(tmp_path, cfg, trained):
    for name in ("config.cfg", "loss_log.csv", "checkpoint.pef"):
        assert (trained / name).exists()
    again = tmp_path / "again"
    assert main(["train", "--config", str(trained / "config.cfg"), "--out", str(again),
                 "--deterministic", "--jobs", "1"]) == 0
    assert (again / "loss_log.csv").read_bytes() == (trained / "loss_log.csv").read_bytes()
    assert (again / "checkpoint.pef").read_bytes() == (trained / "checkpoint.pef").read_bytes()
    other = tmp_path / "other"
    assert main(["train", "--config", str(cfg), "--out", str(other), "--seed", "1"]) == 0
    assert (other / "loss_log.csv").read_bytes() != (trained / "loss_log.csv").read_bytes()


def test_eval_inspect_predict(tmp_path, cfg, trained):
    ck = str(trained / "checkpoint.pef")
    assert main(["eval", "--checkpoint", ck, "--config", str(cfg), "--out", str(tmp_path / "ev")]) == 0
    m = read_metrics(tmp_path / "ev" / "metrics.txt")
    assert 0.0 <= float(m["AP"]) <= 1.0 and m["flip_test"] == "true"

    assert main(["inspect", "--checkpoint", ck, "--out", str(tmp_path / "in")]) == 0
    text = (tmp_path / "in" / "inspect.txt").read_text()
    assert "model.variant = deit" in text and "params.total = " in text and "optimizer.step = 3" in text

    img = np.random.default_rng(0).integers(0, 256, (40, 60, 3), dtype=np.uint8)
    from pef.data import write_ppm
    write_ppm(tmp_path / "in.ppm", img)
    out = tmp_path / "pr"
    assert main(["predict", "--checkpoint", ck, "--image", str(tmp_path / "in.ppm"),
                 "--bbox", "10,5,30,30", "--out", str(out)]) == 0
    rows = (out / "joints.tsv").read_text().strip().splitlines()
    assert rows[0] == "joint\tx\ty\tconfidence" and len(rows) == 6
    overlay = read_image(out / "overlay.ppm")
    assert overlay.shape == img.shape and not np.array_equal(overlay, img)
    assert main(["predict", "--checkpoint", ck, "--image", str(tmp_path / "in.ppm"),
                 "--bbox", "1,2,3", "--out", str(out)]) == 1


def test_data_and_config_errors(tmp_path, cfg):
    out = str(tmp_path / "x")
    assert main(["inspect", "--checkpoint", str(tmp_path / "absent.pef"), "--out", out]) == 2
    (tmp_path / "junk.pef").write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.pef"), "--config", str(cfg),
                 "--out", out]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.cfg"), "--out", out]) == 2
    assert main(["train", "--config", str(cfg), "--model.n_heads", "3", "--out", out]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.unknown = 1\n")
    assert main(["train", "--config", str(bad), "--out", out]) == 1
    (tmp_path / "ann.json").write_text("{}")
    assert main(["eval", "--oracle", "--config", str(cfg), "--out", out,
                 "--data.annotations", str(tmp_path / "ann.json")]) == 2


def test_divergent_training_exits_three(tmp_path, cfg):
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "d"),
                     "--schedule.encoder_lr", "1e300", "--schedule.decoder_lr", "1e300",
                     "--run.dtype", "float64"])
    assert code == 3


def test_out_env_and_flag_precedence(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("PEF_OUT", str(tmp_path / "env"))
    assert main(["eval", "--oracle", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "metrics.txt").exists()
    assert main(["eval", "--oracle", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "metrics.txt").exists()
    assert main(["gradcheck", "--scope", "primitives"]) == 0
    assert (tmp_path / "env" / "gradcheck.txt").exists()


def test_gradcheck_scope_report(tmp_path):
    assert main(["gradcheck", "--scope", "blocks", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "gradcheck.txt").read_text().strip().splitlines()
    assert lines[-1].endswith("checks passed")
    done, total = lines[-1].split()[0].split("/")
    assert done == total


def test_bench_command(tmp_path):
    assert main(["bench", "--sizes", "16,32", "--dim", "8", "--repetitions", "1",
                 "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "bench.tsv").read_text().strip().splitlines()) == 5
    assert "slope_gap" in (tmp_path / "bench_summary.txt").read_text()
    assert main(["bench", "--sizes", "32,16", "--out", str(tmp_path)]) == 1
    assert main(["bench", "--dim", "8", "--heads", "3", "--out", str(tmp_path)]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "pef", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("pef ")
    res = subprocess.run([sys.executable, "-m", "pef", "train", "--nope"], capture_output=True, text=True)
    assert res.returncode == 1 and "unrecognized arguments" in res.stderr
