import subprocess
import sys

import numpy as np
import pytest

from semadapt.cli import main
from semadapt.data import read_ppm

TINY = """\
image_size=16
width=4
seg_width=4
n_scales=1
n_train_s=4
n_train_t=4
n_val_t=2
trans_steps=3
seg_steps=4
source_steps=4
eval_every=2
rounds=2
lr_g=1e-3
"""


@pytest.fixture
def env(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY + f"runs_dir={tmp_path / 'runs'}\ndata_dir={tmp_path / 'data'}\n")
    assert main(["gen-data", "--config", str(cfg), "--seed", "0", "--name", "data"]) == 0
    return tmp_path, cfg


def run(cfg, sub, *extra, seed=0):
    return main([sub, "--config", str(cfg), "--seed", str(seed), *extra])


def test_layout_and_resolved_config(env):
    tmp, cfg = env
    assert run(cfg, "train-i2i", "--name", "i2i") == 0
    d = tmp / "runs" / "i2i"
    for sub in ("config.resolved", "checkpoints/bundle.sema", "metrics/translation.csv", "log.txt",
                "images"):
        assert (d / sub).exists(), sub
    header = (d / "metrics" / "translation.csv").read_text().splitlines()
    assert header[0].split(",")[0] == "step" and len(header[0].split(",")) == 13
    assert len(header) == 1 + 3
    assert "seed=0" in (d / "config.resolved").read_text()


def test_every_subcommand(env):
    tmp, cfg = env
    runs = tmp / "runs"
    assert run(cfg, "bdl", "--name", "bdl") == 0
    ckpt = runs / "bdl" / "checkpoints" / "final.sema"
    rows = (runs / "bdl" / "metrics" / "rounds.csv").read_text().splitlines()
    assert rows[0].startswith("round,miou") and len(rows) == 3

    assert run(cfg, "train-seg", "--name", "seg", "--checkpoint", str(ckpt)) == 0
    assert (runs / "seg" / "metrics" / "segmentation.csv").exists()

    assert run(cfg, "pseudo", "--name", "ps", "--checkpoint", str(ckpt)) == 0
    assert len(list((runs / "ps" / "pseudo").glob("*.pgm"))) == 4
    assert (runs / "ps" / "metrics" / "pseudo.csv").read_text().splitlines()[-1].startswith("all,")

    assert run(cfg, "translate", "--name", "tr", "--checkpoint", str(ckpt)) == 0
    outs = sorted((runs / "tr" / "images").glob("*.ppm"))
    assert len(outs) == 4 and read_ppm(outs[0]).shape == (3, 16, 16)

    assert run(cfg, "eval", "--name", "ev", "--checkpoint", str(ckpt)) == 0
    iou = (runs / "ev" / "metrics" / "eval_iou.csv").read_text().splitlines()
    assert iou[0] == "round,cell,class,iou" and iou[-1].split(",")[2] == "mean"
    summary = (runs / "ev" / "metrics" / "eval_summary.csv").read_text().splitlines()
    assert summary[0] == "split,miou,inception_score,frechet_distance"


def test_translate_guidance(env):
    tmp, cfg = env
    assert run(cfg, "train-i2i", "--name", "g") == 0
    ckpt = tmp / "runs" / "g" / "checkpoints" / "bundle.sema"
    src = tmp / "data" / "source" / "images"
    assert run(cfg, "translate", "--name", "plain", "--checkpoint", str(ckpt)) == 0
    assert run(cfg, "translate", "--name", "self", "--checkpoint", str(ckpt),
               "--guidance_dir", str(src)) == 0
    a = sorted((tmp / "runs" / "plain" / "images").glob("*.ppm"))
    b = sorted((tmp / "runs" / "self" / "images").glob("*.ppm"))
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))


def test_same_seed_same_outputs(env):
    tmp, cfg = env
    assert run(cfg, "train-i2i", "--name", "r1") == 0
    assert run(cfg, "train-i2i", "--name", "r2") == 0
    r = tmp / "runs"
    assert (r / "r1/metrics/translation.csv").read_bytes() == (r / "r2/metrics/translation.csv").read_bytes()
    assert (r / "r1/checkpoints/bundle.sema").read_bytes() == (r / "r2/checkpoints/bundle.sema").read_bytes()


def test_resolved_config_reproduces_run(env):
    tmp, cfg = env
    assert run(cfg, "train-i2i", "--name", "orig", seed=4) == 0
    d = tmp / "runs" / "orig"
    first = (d / "metrics/translation.csv").read_bytes()
    resolved = tmp / "resolved.cfg"
    resolved.write_text((d / "config.resolved").read_text())
    assert main(["train-i2i", "--config", str(resolved)]) == 0
    assert (d / "metrics/translation.csv").read_bytes() == first


@pytest.mark.parametrize("args,category", [
    (["eval", "--name", "x"], "checkpoint"),
    (["train-i2i", "--bogus", "1"], "config"),
    (["translate", "--checkpoint", "/nonexistent.sema"], "checkpoint"),
    (["bdl", "--data_dir", "/nonexistent"], "data"),
    (["train-i2i", "--width"], "usage"),
])
def test_errors_are_one_line(env, capsys, args, category):
    _, cfg = env
    capsys.readouterr()
    code = main([args[0], "--config", str(cfg), *args[1:]])
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0
    assert len(err) == 1 and err[0].startswith(f"semadapt: error[{category}]:")


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "semadapt.cli", "eval", "--runs_dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "error[checkpoint]" in out.stderr
