import csv

import numpy as np
import pytest
import structlog
from structlog.testing import capture_logs

from autograd.tensor import Tensor
from captioner import trainer as trainer_module
from captioner.caption_metrics import MetricReport
from captioner.data import Batch, load_manifest
from captioner.decoder import BOS_ID, EOS_ID, PAD_ID, build_vocabulary
from captioner.errors import ConfigError, DataError, NumericError
from captioner.feature_fusion import StreamInputs
from captioner.model import CaptioningModel, build_model
from captioner.runconfig import load_run_config
from captioner.synthetic import generate_synthetic_dataset
from captioner.trainer import (
    GridCell,
    caption,
    discriminating_accuracy,
    evaluate,
    gridsearch,
    load_checkpoint,
    param_count,
    save_checkpoint,
    select_best,
    train,
)

from .helpers import random_inputs, tiny_config


@pytest.fixture
def workspace(tmp_path):
    generate_synthetic_dataset(tmp_path / "synth", n_train=4, n_test=2, n_val=2, seed=1)
    return tmp_path


def config_for(base, **overrides):
    values = {
        "data.train": "synth/train.jsonl",
        "data.val": "synth/val.jsonl",
        "data.test": "synth/test.jsonl",
        "train.out_dir": "run",
    }
    values.update(overrides)
    return tiny_config(base, **values)


def two_stream(position):
    return {"fusion.method": "concat", "fusion.position": position, "fusion.inputs": "RGB+Depth"}


def _rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


class TestTrain:
    def test_same_seed_same_losses(self, workspace):
        config = config_for(workspace)
        first = train(config, save=False)
        second = train(config, save=False)
        assert len(first.losses) == 2
        assert first.losses == second.losses
        assert first.checkpoint is None

    def test_different_seed_different_losses(self, workspace):
        first = train(config_for(workspace), save=False)
        second = train(config_for(workspace, **{"train.seed": "1"}), save=False)
        assert first.losses != second.losses

    def test_writes_log_checkpoint_and_vocabulary(self, workspace):
        result = train(config_for(workspace))
        run = workspace / "run"
        assert result.checkpoint == run / "checkpoint.npz"
        assert [row[0] for row in _rows(run / "train_log.csv")] == ["step", "0", "1"]
        assert (run / "vocab.txt").exists()

    def test_frozen_backbone_is_not_updated(self, workspace):
        config = config_for(workspace, **{"train.steps": "100"})
        result = train(config, save=False)
        initial = build_model(config, len(result.trained.vocab), config.train.seed).state_dict()
        final = result.trained.model.state_dict()
        for name in initial:
            if name.startswith("graph.backbone."):
                np.testing.assert_array_equal(final[name], initial[name])
        assert not np.array_equal(final["decoder.output.weight"], initial["decoder.output.weight"])

    def test_unfrozen_stage_is_updated(self, workspace):
        config = config_for(workspace, **{"train.unfreeze_last_k": "1"})
        result = train(config, save=False)
        initial = build_model(config, len(result.trained.vocab), config.train.seed).state_dict()
        final = result.trained.model.state_dict()
        first, last = "graph.backbone.stages.0.weight", "graph.backbone.stages.2.weight"
        np.testing.assert_array_equal(final[first], initial[first])
        assert not np.array_equal(final[last], initial[last])

    def test_non_finite_loss_raises_numeric_error(self, workspace, monkeypatch):
        monkeypatch.setattr(CaptioningModel, "loss", lambda self, batch: Tensor(np.array(np.nan)))
        with pytest.raises(NumericError) as excinfo:
            train(config_for(workspace), save=False)
        assert excinfo.value.step == 0
        assert excinfo.value.exit_code == 3

    def test_missing_train_manifest(self, tmp_path):
        with pytest.raises(ConfigError, match="data.train"):
            train(tiny_config(tmp_path))


class TestCheckpoint:
    def test_round_trip(self, workspace):
        config = config_for(workspace, **two_stream("late"))
        result = train(config)
        loaded = load_checkpoint(result.checkpoint)
        assert loaded.step == 2
        assert loaded.vocab == result.trained.vocab
        assert loaded.config.values == config.values
        assert loaded.optimizer.state.step == 2
        assert not loaded.model.training
        original = result.trained.model.state_dict()
        for name, values in loaded.model.state_dict().items():
            np.testing.assert_array_equal(values, original[name])

    def test_reloaded_model_scores_like_the_saved_one(self, workspace):
        config = config_for(workspace, **two_stream("middle"), **{"train.steps": "5"})
        trained = train(config, save=False).trained
        before = evaluate(trained, config.data.test)
        loaded = load_checkpoint(save_checkpoint(workspace / "copy" / "checkpoint.npz", trained))
        after = evaluate(loaded, config.data.test)
        assert after.hypotheses == before.hypotheses
        assert after.accuracy == before.accuracy
        for column in MetricReport.columns():
            assert getattr(after.report, column) == getattr(before.report, column), column

    def test_unreadable_checkpoint(self, tmp_path):
        (tmp_path / "checkpoint.npz").write_bytes(b"not an archive")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "checkpoint.npz")


class TestEvaluate:
    def test_outputs_follow_manifest_order(self, workspace):
        config = config_for(workspace, **two_stream("early"))
        trained = train(config, save=False).trained
        result = evaluate(trained, config.data.test, workspace / "eval")
        assert result.ids == ["test0000n", "test0000f"]
        assert result.accuracy in (0.0, 0.5, 1.0)
        report = _rows(workspace / "eval" / "report.csv")
        assert report[0] == MetricReport.columns()
        assert report[1] == result.report.as_row()
        samples = _rows(workspace / "eval" / "samples.csv")
        assert [row[0] for row in samples] == ["id", "test0000n", "test0000f"]
        hypotheses = (workspace / "eval" / "hypotheses.txt").read_text(encoding="utf-8").splitlines()
        assert hypotheses == result.hypotheses

    def test_discriminating_accuracy(self):
        hypotheses = [["a", "nearer"], ["a", "nearer", "farther"], ["x"]]
        references = [[["b", "nearer"]], [["farther"]], [["no", "relation"]]]
        assert discriminating_accuracy(hypotheses, references) == 0.5
        assert discriminating_accuracy([["a"]], [[["a"]]]) is None


def _report(b4, rl):
    return MetricReport(b1=0.0, b4=b4, r1=0.0, r2=0.0, rl=rl, meteor=0.0, cider=0.0)


class TestGridSearch:
    def test_select_best_breaks_ties(self):
        cells = [
            GridCell(0, 0.01, 2, 0.1, 0.1, _report(10.0, 30.0)),
            GridCell(1, 0.001, 2, 0.1, 0.1, _report(10.0, 30.0)),
            GridCell(2, 0.01, 4, 0.0, 0.0, _report(10.0, 20.0)),
        ]
        assert select_best(cells).index == 1
        cells.append(GridCell(3, 0.1, 4, 0.0, 0.0, _report(12.0, 0.0)))
        assert select_best(cells).index == 3

    def test_two_by_two_grid(self, workspace):
        config = config_for(
            workspace,
            **{
                "grid.lr": "0.01, 0.001",
                "grid.heads": "2",
                "grid.encoder_dropout": "0.0",
                "grid.decoder_dropout": "0.0, 0.1",
            },
        )
        result = gridsearch(config, workspace / "grid")
        assert len(result.cells) == 4
        rows = _rows(result.table)
        assert len(rows) == 5
        assert rows[0][:5] == ["cell", "lr", "heads", "encoder_dropout", "decoder_dropout"]
        best = load_run_config(workspace / "grid" / "best.conf")
        assert best.train.lr == result.best.lr
        assert best.data.train == (workspace / "synth" / "train.jsonl").resolve()
        assert (workspace / "grid" / "cell000" / "checkpoint.npz").exists()

    def test_needs_every_axis(self, workspace):
        with pytest.raises(ConfigError):
            gridsearch(config_for(workspace, **{"grid.lr": "0.01"}))

    def test_needs_validation_split(self, tmp_path):
        axes = {"grid.lr": "0.01", "grid.heads": "2", "grid.encoder_dropout": "0", "grid.decoder_dropout": "0"}
        config = tiny_config(tmp_path, **axes)
        with pytest.raises(ConfigError, match="data.val"):
            gridsearch(config)


class TestParamCountAndCaption:
    def test_param_count_with_explicit_vocabulary(self, tmp_path):
        rows = param_count(tiny_config(tmp_path), vocab_size=10)
        assert rows[-1].group == "total"
        assert {r.group for r in rows} >= {"backbone", "projection", "encoder", "decoder"}

    def test_param_count_sizes_vocabulary_from_manifest(self, workspace):
        config = config_for(workspace)
        vocab = build_vocabulary(load_manifest(config.data.train).captions())
        assert param_count(config)[-1].total == param_count(config, vocab_size=len(vocab))[-1].total

    def test_param_count_needs_a_vocabulary_source(self, tmp_path):
        with pytest.raises(ConfigError):
            param_count(tiny_config(tmp_path))

    def test_caption_single_image(self, workspace):
        result = train(config_for(workspace))
        trained = load_checkpoint(result.checkpoint)
        text = caption(trained, rgb=workspace / "synth" / "rgb" / "test0000n.ppm")
        assert isinstance(text, str)
        with pytest.raises(ConfigError, match="rgb"):
            caption(trained, depth=workspace / "synth" / "depth" / "test0000n.pgm")

    def test_unused_depth_input_is_logged_and_ignored(self, workspace, monkeypatch):
        trained = load_checkpoint(train(config_for(workspace)).checkpoint)
        rgb = workspace / "synth" / "rgb" / "test0000n.ppm"
        with capture_logs() as logs:
            monkeypatch.setattr(trainer_module, "logger", structlog.get_logger("captioner.trainer"))
            text = caption(trained, rgb=rgb, depth=workspace / "synth" / "depth" / "test0000n.pgm")
        warnings = [entry for entry in logs if entry["log_level"] == "warning"]
        assert [(w["event"], w["input"]) for w in warnings] == [("input ignored by this checkpoint", "depth")]
        assert warnings[0]["fusion"] == trained.config.fusion.label
        assert text == caption(trained, rgb=rgb)


class TestLoss:
    def test_batch_loss_weights_samples_by_their_token_count(self):
        """The batch mean runs over non-pad targets, so each sample counts by its length."""
        config = tiny_config(**two_stream("late"), **{"model.encoder_dropout": "0", "model.decoder_dropout": "0"})
        model = build_model(config, 12, seed=0).eval()
        inputs = random_inputs(seed=3)
        tokens = np.array([[BOS_ID, 4, 5, 6], [BOS_ID, 7, PAD_ID, PAD_ID]])
        targets = np.array([[4, 5, 6, EOS_ID], [7, EOS_ID, PAD_ID, PAD_ID]])
        batch = Batch(ids=["x", "y"], inputs=inputs, tokens=tokens, targets=targets)
        per_sample = []
        for i in range(2):
            row = slice(i, i + 1)
            single = StreamInputs(rgb=inputs.rgb[row], depth=inputs.depth[row], features=inputs.features[row])
            one = Batch(ids=[batch.ids[i]], inputs=single, tokens=tokens[row], targets=targets[row])
            per_sample.append(model.loss(one).item())
        counts = (targets != PAD_ID).sum(axis=1)
        expected = float(np.dot(counts, per_sample) / counts.sum())
        assert model.loss(batch).item() == pytest.approx(expected, rel=1e-5)
