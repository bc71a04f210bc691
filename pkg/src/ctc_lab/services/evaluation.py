"""
Discriminability metrics (Recall@1, k-means NMI) and the linear-probe
transferability protocol. Everything here reads representations and never
touches a backbone.
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import structlog
from sklearn.cluster import KMeans
from sklearn.metrics import normalized_mutual_info_score

from ..core.errors import DataError, DimensionError, RangeError
from ..models.config import ProbeConfig
from .contrastive import cross_entropy
from .numerics import SgdState, as_matrix, init_head, sgd_step

logger = structlog.get_logger(__name__)

TIE_TOLERANCE = 1e-12
# query rows per similarity block
RECALL_BLOCK = 1024


def _labels(labels: Sequence[int], n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    return labels


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def recall_at_1(reps: np.ndarray, labels: Sequence[int]) -> float:
    """Share of samples whose cosine nearest neighbour (self excluded) has their label.

    When several gallery items tie for the nearest neighbour the query
    counts as a hit only if all of them share its label, so constant
    representations score 0 on multi-class data. A class with a single
    sample always misses.
    """
    x = as_matrix(reps, "reps")
    n = x.shape[0]
    if n < 2:
        raise DataError("Recall@1 needs at least 2 samples")
    labels = _labels(labels, n)
    unit = _unit_rows(x)
    hits = np.empty(n, dtype=bool)
    for start in range(0, n, RECALL_BLOCK):
        stop = min(start + RECALL_BLOCK, n)
        rows = np.arange(start, stop)
        similarity = unit[start:stop] @ unit.T
        similarity[rows - start, rows] = -np.inf
        best = similarity.max(axis=1, keepdims=True)
        nearest = similarity >= best - TIE_TOLERANCE
        same = labels[None, :] == labels[start:stop, None]
        hits[start:stop] = np.all(same | ~nearest, axis=1)
    return float(hits.mean())


@dataclass
class ClusteringResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float


def kmeans(reps: np.ndarray, k: int, seed: int = 0) -> ClusteringResult:
    """Lloyd's algorithm with k-means++ seeding.

    Runs a single initialization for at most 300 iterations; empty clusters
    are re-seeded from the points farthest from their centroids.
    """
    x = as_matrix(reps, "reps")
    if not 1 <= k <= x.shape[0]:
        raise RangeError(f"k={k} must lie in [1, {x.shape[0]}]")
    model = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=1,
        max_iter=300,
        tol=1e-6,
        random_state=seed,
        algorithm="lloyd",
    )
    assignments = model.fit_predict(x)
    return ClusteringResult(
        assignments=assignments.astype(np.int64),
        centroids=model.cluster_centers_,
        inertia=float(model.inertia_),
    )


def nmi(assignments: Sequence[int], labels: Sequence[int], average: str = "geometric") -> float:
    """MI(assignments; labels) normalized by the geometric (or arithmetic) mean entropy.

    0/0 is 0: a constant labeling on either side gives 0.
    """
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape:
        raise DimensionError("assignments and labels differ in length")
    if average not in ("geometric", "arithmetic"):
        raise RangeError(f"unknown NMI average {average!r}")
    if np.unique(assignments).size < 2 or np.unique(labels).size < 2:
        return 0.0
    score = normalized_mutual_info_score(labels, assignments, average_method=average)
    return float(min(max(score, 0.0), 1.0))


def accuracy(logits: np.ndarray, labels: Sequence[int]) -> float:
    logits = as_matrix(logits, "logits")
    labels = _labels(labels, logits.shape[0])
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _scale_features(train: np.ndarray, test: np.ndarray, mode: str):
    if mode == "none":
        return train, test
    if mode == "rms":
        scale = float(np.sqrt(np.mean(train ** 2)))
        if scale == 0.0:
            return train, test
        return train / scale, test / scale
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std == 0.0] = 1.0
    return (train - mean) / std, (test - mean) / std


def linear_probe(
    frozen_reps_train: np.ndarray,
    labels_train: Sequence[int],
    frozen_reps_test: np.ndarray,
    labels_test: Sequence[int],
    config: ProbeConfig,
) -> float:
    """Train a fresh linear head on frozen representations; return test top-1 accuracy.

    Classes seen only in the test split keep their randomly initialized
    logits and so sit at chance level.
    """
    train = as_matrix(frozen_reps_train, "train reps")
    test = as_matrix(frozen_reps_test, "test reps")
    if train.shape[1] != test.shape[1]:
        raise DimensionError(f"train reps are {train.shape[1]}-d, test reps {test.shape[1]}-d")
    y_train = _labels(labels_train, train.shape[0])
    y_test = _labels(labels_test, test.shape[0])
    if train.shape[0] == 0:
        raise DataError("linear probe needs training samples")
    class_count = int(max(y_train.max(), y_test.max() if y_test.size else 0)) + 1
    train, test = _scale_features(train, test, config.feature_scaling)

    head = init_head(train.shape[1], class_count, config.seed)
    params = {"weight": head.weight.copy(), "bias": head.bias.copy()}
    state = SgdState.for_params(params, config.lr_init, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    batch = min(config.batch_size, train.shape[0])
    order = rng.permutation(train.shape[0])
    cursor = 0
    for step in range(config.steps):
        if cursor + batch > order.shape[0]:
            order = rng.permutation(train.shape[0])
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        xb = train[idx]
        logits = xb @ params["weight"] + params["bias"]
        _, grad_logits = cross_entropy(logits, y_train[idx])
        grads = {"weight": xb.T @ grad_logits, "bias": grad_logits.sum(axis=0)}
        state.learning_rate = config.lr_at(step)
        params = sgd_step(params, grads, state)

    score = accuracy(test @ params["weight"] + params["bias"], y_test)
    logger.debug("Linear probe finished", steps=config.steps, accuracy=score)
    return score
