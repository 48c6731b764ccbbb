from io import StringIO

import numpy as np
import pytest
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import override_settings

from autograd.tensor import Tensor
from captioner.model import CaptioningModel

from .helpers import TINY_VALUES, write_config


def run(*args):
    out = StringIO()
    call_command(*args, stdout=out)
    return out.getvalue().splitlines()


@pytest.fixture
def synth(tmp_path):
    out = str(tmp_path / "synth")
    lines = run("synth", "--out", out, "--n-train", "4", "--n-test", "2", "--n-val", "2", "--seed", "3")
    assert lines[0] == f"train {tmp_path / 'synth' / 'train.jsonl'}"
    return tmp_path


@pytest.fixture
def run_config(synth):
    values = dict(TINY_VALUES)
    values.update(
        {
            "data.train": "synth/train.jsonl",
            "data.val": "synth/val.jsonl",
            "data.test": "synth/test.jsonl",
            "fusion.method": "concat",
            "fusion.position": "late",
            "fusion.inputs": "RGB+Depth",
            "train.out_dir": "run",
            "ablation.seeds": "0",
            "ablation.modality_features": "synth/features",
        }
    )
    return write_config(synth / "run.conf", values)


def test_synth_rejects_odd_counts(tmp_path):
    with pytest.raises(CommandError) as excinfo:
        run("synth", "--out", str(tmp_path), "--n-train", "3", "--n-test", "2")
    assert excinfo.value.returncode == 2


def test_train_then_eval_then_caption(run_config, tmp_path):
    lines = run("train", "--config", str(run_config))
    checkpoint = tmp_path / "run" / "checkpoint.npz"
    assert lines[0] == f"checkpoint {checkpoint}"
    assert lines[1].startswith("final_loss ")

    lines = run("eval", "--checkpoint", str(checkpoint), "--manifest", str(tmp_path / "synth" / "test.jsonl"))
    assert lines[0] == "b1,b4,r1,r2,rl,meteor,cider"
    assert len(lines[1].split(",")) == 7
    assert lines[2].startswith("discriminating_accuracy ")
    assert (tmp_path / "run" / "eval" / "report.csv").exists()

    lines = run(
        "caption",
        "--checkpoint", str(checkpoint),
        "--rgb", str(tmp_path / "synth" / "rgb" / "test0000n.ppm"),
        "--depth", str(tmp_path / "synth" / "depth" / "test0000n.pgm"),
    )
    assert len(lines) <= 1


def test_caption_missing_depth_is_a_usage_error(run_config, tmp_path):
    run("train", "--config", str(run_config))
    with pytest.raises(CommandError) as excinfo:
        run("caption", "--checkpoint", str(tmp_path / "run" / "checkpoint.npz"),
            "--rgb", str(tmp_path / "synth" / "rgb" / "test0000n.ppm"))
    assert excinfo.value.returncode == 2


def test_params_prints_group_table(run_config):
    lines = run("params", "--config", str(run_config), "--vocab-size", "12")
    assert lines[0] == "group,trainable,total"
    groups = [line.split(",")[0] for line in lines[1:]]
    assert groups[-1] == "total"
    assert "encoder" in groups and "fusion" in groups


def test_metrics_scores_files(tmp_path):
    (tmp_path / "hyp.txt").write_text("a red box\n", encoding="utf-8")
    (tmp_path / "refs.txt").write_text("a red box\n", encoding="utf-8")
    lines = run("metrics", "--hyp", str(tmp_path / "hyp.txt"), "--refs", str(tmp_path / "refs.txt"))
    assert lines[1].split(",")[:2] == ["100.0000", "0.0000"]


def test_gridsearch_prints_best_cell(run_config, tmp_path):
    text = run_config.read_text(encoding="utf-8")
    run_config.write_text(
        text + "grid.lr = 0.01, 0.001\ngrid.heads = 2\ngrid.encoder_dropout = 0.0\ngrid.decoder_dropout = 0.0\n",
        encoding="utf-8",
    )
    lines = run("gridsearch", "--config", str(run_config), "--out", str(tmp_path / "grid"))
    assert lines[0] == f"table {tmp_path / 'grid' / 'gridsearch.csv'}"
    assert lines[1].startswith("best cell=")
    assert (tmp_path / "grid" / "best.conf").exists()


def test_ablate_prints_mean_rows(run_config, tmp_path):
    text = run_config.read_text(encoding="utf-8").replace("train.steps = 2", "train.steps = 1")
    run_config.write_text(text, encoding="utf-8")
    lines = run("ablate", "--suite", "position", "--config", str(run_config), "--out", str(tmp_path / "abl"))
    assert lines[0] == f"table {tmp_path / 'abl' / 'position_ablation.csv'}"
    assert [line.split()[0] for line in lines[1:]] == ["early", "early_stacked", "late", "untrained"]


def test_unknown_config_key_exits_with_two(tmp_path):
    path = write_config(tmp_path / "bad.conf", {"train.momentum": "0.9"})
    with pytest.raises(CommandError) as excinfo:
        run("train", "--config", str(path))
    assert excinfo.value.returncode == 2
    assert "unknown key" in str(excinfo.value)


def test_non_finite_training_exits_with_three(run_config, monkeypatch):
    monkeypatch.setattr(CaptioningModel, "loss", lambda self, batch: Tensor(np.array(np.inf)))
    with pytest.raises(CommandError) as excinfo:
        run("train", "--config", str(run_config))
    assert excinfo.value.returncode == 3


def test_metrics_file_is_written(tmp_path):
    (tmp_path / "hyp.txt").write_text("a\n", encoding="utf-8")
    (tmp_path / "refs.txt").write_text("a\n", encoding="utf-8")
    target = tmp_path / "fusecap.prom"
    with override_settings(FUSECAP_METRICS_FILE=str(target)):
        run("metrics", "--hyp", str(tmp_path / "hyp.txt"), "--refs", str(tmp_path / "refs.txt"))
    assert "fusecap_training_steps" in target.read_text(encoding="utf-8")
