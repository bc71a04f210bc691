"""
Prometheus metrics for training and estimation runs.

Metrics live in a private registry so repeated imports (tests, several
commands in one interpreter) never collide with the default registry.
"""
from pathlib import Path
from typing import Union

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

REGISTRY = CollectorRegistry()

TRAIN_STEPS = Counter(
    "ctc_lab_train_steps_total", "Optimizer steps taken", ["stage"], registry=REGISTRY
)
EPOCH_DURATION = Histogram(
    "ctc_lab_epoch_duration_seconds", "Training epoch duration", ["stage"], registry=REGISTRY
)
EVAL_DURATION = Histogram(
    "ctc_lab_eval_duration_seconds", "Per-epoch evaluation duration", registry=REGISTRY
)
MINE_DURATION = Histogram(
    "ctc_lab_mine_duration_seconds", "MINE estimation duration", ["quantity"], registry=REGISTRY
)
MINE_RETRIES = Counter(
    "ctc_lab_mine_retries_total", "MINE restarts after divergence", registry=REGISTRY
)
DIVERGENCES = Counter(
    "ctc_lab_divergence_aborts_total", "Training runs aborted on a non-finite loss", registry=REGISTRY
)


def write_metrics(path: Union[str, Path]) -> None:
    """Write the registry in node-exporter textfile format."""
    write_to_textfile(str(path), REGISTRY)
