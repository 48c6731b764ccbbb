import threading
import time

import structlog
from django.conf import settings
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

logger = structlog.get_logger(__name__)

registry = CollectorRegistry()

# Metrics
training_steps_total = Counter(
    'fusecap_training_steps_total',
    'Total number of optimizer steps taken',
    ['fusion'],
    registry=registry,
)

training_runs_total = Counter(
    'fusecap_training_runs_total',
    'Training runs started',
    ['fusion'],
    registry=registry,
)

training_loss = Gauge(
    'fusecap_training_loss',
    'Teacher-forced cross-entropy of the latest training step',
    ['fusion'],
    registry=registry,
)

training_step_duration = Histogram(
    'fusecap_training_step_duration_seconds',
    'Time spent on one forward, backward and optimizer step',
    registry=registry,
)

evaluation_score = Gauge(
    'fusecap_evaluation_score',
    'Latest corpus score per caption metric',
    ['fusion', 'metric'],
    registry=registry,
)

numeric_failures_total = Counter(
    'fusecap_numeric_failures_total',
    'Training runs aborted on a non-finite loss or gradient',
    registry=registry,
)

captions_decoded_total = Counter(
    'fusecap_captions_decoded_total',
    'Total number of captions produced by greedy decoding',
    registry=registry,
)

run_duration = Gauge(
    'fusecap_run_duration_seconds',
    'Wall time of the latest training run',
    ['fusion'],
    registry=registry,
)


# Thread-safe run tracking
class TrainingTracker:
    def __init__(self):
        self._lock = threading.Lock()
        self._steps = 0
        self._last_loss = None
        self._started = None
        self._fusion = None

    def start_run(self, fusion):
        with self._lock:
            self._steps = 0
            self._last_loss = None
            self._started = time.time()
            self._fusion = fusion
            training_runs_total.labels(fusion=fusion).inc()
            training_loss.labels(fusion=fusion).set(float('nan'))

    def record_step(self, fusion, loss, duration):
        with self._lock:
            self._steps += 1
            self._last_loss = loss
            training_steps_total.labels(fusion=fusion).inc()
            training_loss.labels(fusion=fusion).set(loss)
            training_step_duration.observe(duration)

    def finish_run(self, fusion):
        with self._lock:
            if self._started is not None:
                run_duration.labels(fusion=fusion).set(time.time() - self._started)
            self._started = None
            self._fusion = None

    def record_failure(self):
        with self._lock:
            numeric_failures_total.inc()

    def record_evaluation(self, fusion, scores):
        with self._lock:
            for metric, value in scores.items():
                evaluation_score.labels(fusion=fusion, metric=metric).set(value)

    def record_captions(self, count):
        with self._lock:
            captions_decoded_total.inc(count)

    def get_steps(self):
        with self._lock:
            return self._steps

    def get_last_loss(self):
        with self._lock:
            return self._last_loss

    def get_fusion(self):
        with self._lock:
            return self._fusion

    def flush(self, path=None):
        """Write the registry in node-exporter textfile format when a target is configured."""
        path = path or getattr(settings, 'FUSECAP_METRICS_FILE', '')
        if not path:
            return None
        with self._lock:
            write_to_textfile(str(path), registry)
        logger.debug("metrics flushed", path=str(path))
        return path


# Global training tracker
training_tracker = TrainingTracker()
