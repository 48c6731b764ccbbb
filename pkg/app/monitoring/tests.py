import math

import structlog
from django.test import SimpleTestCase, override_settings

from monitoring.context import bind_run_context
from monitoring.metrics import TrainingTracker, registry


class TrainingTrackerTests(SimpleTestCase):
    def test_run_counts_steps_and_keeps_last_loss(self):
        """Test step counting across a run."""
        tracker = TrainingTracker()
        tracker.start_run("feature/none/n/a/RGB")
        tracker.record_step("feature/none/n/a/RGB", 2.5, 0.01)
        tracker.record_step("feature/none/n/a/RGB", 2.25, 0.01)
        tracker.finish_run("feature/none/n/a/RGB")

        self.assertEqual(tracker.get_steps(), 2)
        self.assertEqual(tracker.get_last_loss(), 2.25)

    def test_start_run_resets(self):
        """Test that a new run starts from zero."""
        tracker = TrainingTracker()
        tracker.start_run("a")
        tracker.record_step("a", 1.0, 0.0)
        tracker.start_run("a")

        self.assertEqual(tracker.get_steps(), 0)
        self.assertIsNone(tracker.get_last_loss())

    def test_start_run_is_labelled_by_fusion(self):
        """Test the run counter and loss gauge of the started fusion."""
        tracker = TrainingTracker()
        labels = {"fusion": "start-test"}
        before = registry.get_sample_value("fusecap_training_runs_total", labels) or 0.0
        tracker.record_step("start-test", 3.0, 0.0)
        tracker.start_run("start-test")

        self.assertEqual(registry.get_sample_value("fusecap_training_runs_total", labels), before + 1)
        self.assertTrue(math.isnan(registry.get_sample_value("fusecap_training_loss", labels)))
        self.assertEqual(tracker.get_fusion(), "start-test")
        tracker.finish_run("start-test")
        self.assertIsNone(tracker.get_fusion())
        self.assertIsNotNone(registry.get_sample_value("fusecap_run_duration_seconds", labels))

    def test_evaluation_scores_are_labelled(self):
        """Test per-metric gauges."""
        TrainingTracker().record_evaluation("late-test", {"b4": 12.5, "cider": 80.0})
        value = registry.get_sample_value("fusecap_evaluation_score", {"fusion": "late-test", "metric": "b4"})
        self.assertEqual(value, 12.5)

    def test_captions_counter(self):
        """Test decoded caption counting."""
        before = registry.get_sample_value("fusecap_captions_decoded_total")
        TrainingTracker().record_captions(3)
        self.assertEqual(registry.get_sample_value("fusecap_captions_decoded_total"), before + 3)


def test_flush_without_target_is_a_no_op():
    with override_settings(FUSECAP_METRICS_FILE=""):
        assert TrainingTracker().flush() is None


def test_flush_writes_textfile(tmp_path):
    target = tmp_path / "fusecap.prom"
    TrainingTracker().flush(target)
    text = target.read_text(encoding="utf-8")
    assert "# TYPE fusecap_training_loss gauge" in text


def test_bind_run_context_binds_and_resets():
    with bind_run_context("train", config="run.conf") as run_id:
        bound = structlog.contextvars.get_contextvars()
        assert bound["run_id"] == run_id
        assert bound["command"] == "train"
        assert bound["config"] == "run.conf"
    assert "run_id" not in structlog.contextvars.get_contextvars()
