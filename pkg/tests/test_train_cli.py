import csv

import numpy as np
import pytest
from PIL import Image

from retseg.cli import EVAL_HEADER, main
from retseg.errors import ConfigError
from retseg.train import TrainConfig, learning_rate_at, parse_train_config

TINY = """\
image_size = 32
stages = 2
stage_channels = 4,8
d_model = 8
heads = 2
retention_blocks = 1
dropout_rate = 0.1
batch_size = 8
learning_rate = 0.003
seed = 0
"""


class TestConfigParsing:
    def test_values(self):
        cfg = parse_train_config(TINY + "alpha = 2.5\nlr_schedule = cosine\n")
        assert cfg.model.stage_channels == (4, 8)
        assert cfg.loss.alpha == 2.5 and cfg.lr_schedule == "cosine"
        assert cfg.batch_size == 8

    @pytest.mark.parametrize(
        "text, line",
        [
            ("epochs = 3\nwat = 1\n", 2),
            ("epochs = 3\n\nbatch_size = many\n", 3),
            ("heads\n", 1),
            ("seed = 1\nseed = 2\n", 2),
            ("# c\nstages = x\n", 2),
        ],
    )
    def test_errors_carry_line_numbers(self, text, line):
        with pytest.raises(ConfigError) as exc:
            parse_train_config(text)
        assert exc.value.line == line
        assert f"line {line}" in str(exc.value)

    def test_invalid_model_invariant(self):
        with pytest.raises(ConfigError, match="image_size mod"):
            parse_train_config("image_size = 30\n")

    def test_cosine_schedule(self):
        cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1.0, lr_schedule="cosine")
        assert learning_rate_at(cfg, 0, 8) == 1.0
        assert learning_rate_at(cfg, 2, 8) == pytest.approx(0.5)
        assert learning_rate_at(cfg, 4, 8) == pytest.approx(0.0, abs=1e-15)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "tiny.cfg"
    cfg.write_text(TINY)
    rc = main(["train", "--config", str(cfg), "--synthetic", "64", "--epochs", "5", "--out", str(d / "a.ckpt")])
    assert rc == 0
    return d


def test_train_writes_checkpoint_and_log(trained):
    assert (trained / "a.ckpt").is_file() and (trained / "a.best.ckpt").is_file()
    rows = list(csv.DictReader(open(trained / "a.csv")))
    assert len(rows) == 5
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4, 5]
    assert all(np.isfinite(float(r["train_loss"])) for r in rows)


def test_train_is_deterministic(trained):
    rc = main(["train", "--config", str(trained / "tiny.cfg"), "--synthetic", "64", "--epochs", "5",
               "--out", str(trained / "b.ckpt")])
    assert rc == 0
    assert (trained / "a.ckpt").read_bytes() == (trained / "b.ckpt").read_bytes()
    assert (trained / "a.csv").read_bytes() == (trained / "b.csv").read_bytes()


def test_eval_output_and_repeatability(trained, capsys):
    args = ["eval", "--checkpoint", str(trained / "a.ckpt"), "--synthetic", "16", "--fps-iters", "0"]
    assert main(args + ["--out", str(trained / "m1.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == ",".join(EVAL_HEADER)
    values = [float(v) for v in out[1].split(",")[1:-1]]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert main(args + ["--out", str(trained / "m2.csv")]) == 0
    assert (trained / "m1.csv").read_bytes() == (trained / "m2.csv").read_bytes()


def test_eval_size_mismatch(trained, capsys):
    rc = main(["eval", "--checkpoint", str(trained / "a.ckpt"), "--synthetic", "4", "--size", "64"])
    assert rc == 2
    assert "mismatch" in capsys.readouterr().err


def test_eval_on_dataset_directory(trained, capsys):
    from retseg.data import generate_synthetic_dataset, write_dataset

    write_dataset(generate_synthetic_dataset(6, 32, 9), trained / "ds")
    rc = main(["eval", "--checkpoint", str(trained / "a.ckpt"), "--data", str(trained / "ds"), "--fps-iters", "0",
               "--split", "val"])
    assert rc == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("ds,")


def test_infer_raw_threshold_equivalence(trained):
    img = (np.random.default_rng(0).random((40, 40, 3)) * 255).astype(np.uint8)
    Image.fromarray(img).save(trained / "in.png")
    ck = str(trained / "a.ckpt")
    assert main(["infer", "--checkpoint", ck, "--image", str(trained / "in.png"), "--out", str(trained / "t.png")]) == 0
    assert main(["infer", "--checkpoint", ck, "--image", str(trained / "in.png"), "--out", str(trained / "r.png"), "--raw"]) == 0
    assert main(["infer", "--checkpoint", ck, "--image", str(trained / "in.png"), "--out", str(trained / "t2.png")]) == 0
    t = np.asarray(Image.open(trained / "t.png"))
    r = np.asarray(Image.open(trained / "r.png"))
    assert t.shape == (32, 32)
    np.testing.assert_array_equal(np.where(r >= 128, 255, 0), t)
    assert (trained / "t.png").read_bytes() == (trained / "t2.png").read_bytes()


def test_infer_no_resize_rejects(trained):
    Image.fromarray(np.zeros((48, 48, 3), np.uint8)).save(trained / "big.png")
    rc = main(["infer", "--checkpoint", str(trained / "a.ckpt"), "--image", str(trained / "big.png"),
               "--out", str(trained / "x.png"), "--no-resize"])
    assert rc == 2


def test_bench_reports_hash(trained, capsys):
    assert main(["bench", "--checkpoint", str(trained / "a.ckpt"), "--size", "32", "16", "--iters", "10"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("size=")]
    assert len(lines) == 2
    for line in lines:
        fields = dict(kv.split("=") for kv in line.split())
        assert float(fields["fps"]) > 0 and len(fields["config"]) == 12
    assert main(["bench", "--iters", "5"]) == 2


def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--synthetic", "2"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = -1\n")
    assert main(["train", "--config", str(bad), "--synthetic", "4"]) == 2


@pytest.mark.slow
def test_fit_model_scores_high_on_its_train_split():
    from dataclasses import replace
    from pathlib import Path

    from retseg.data import generate_synthetic_dataset, split_samples
    from retseg.train import evaluate, load_train_config, train

    cfg = load_train_config(Path(__file__).resolve().parents[1] / "configs" / "synthetic_tiny.cfg")
    cfg = replace(cfg, epochs=63, max_steps=1000)
    tr, va = split_samples(generate_synthetic_dataset(160, cfg.model.image_size, 0), cfg.train_fraction, cfg.seed)
    result = train(tr, va, cfg)
    rec, _ = evaluate(result.params, cfg.model, tr)
    assert rec.iou > 0.9
