"""
Loss functions of both training stages and the two representation banks.

Contrastive losses take L2-normalized representations and return gradients
wrt those normalized anchors only; bank rows are constants. Stage objectives
wrap the losses, normalize raw representations and push the gradient back
through the normalization.
"""
import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.special import log_softmax, softmax

from ..core.errors import (
    ContractError,
    DimensionError,
    NumericError,
    RangeError,
    SampleIndexError,
    StateError,
)
from ..models.config import LossConfig
from .numerics import Backbone, as_matrix, l2_normalize, l2_normalize_backward, mlp_forward

logger = structlog.get_logger(__name__)

UNIT_NORM_TOLERANCE = 1e-6

Negatives = Union[str, int]


def _as_indices(values: Sequence[int], name: str) -> np.ndarray:
    indices = np.asarray(values)
    if indices.ndim != 1:
        raise DimensionError(f"{name} must be 1-D")
    if indices.size and not np.issubdtype(indices.dtype, np.integer):
        if not np.all(np.equal(np.mod(indices, 1), 0)):
            raise SampleIndexError(f"{name} must be integers")
    return indices.astype(np.int64)


def _check_unit_rows(x: np.ndarray, name: str) -> None:
    deviation = np.abs(np.linalg.norm(x, axis=1) - 1.0)
    if deviation.size and deviation.max() > UNIT_NORM_TOLERANCE:
        row = int(np.argmax(deviation))
        raise ContractError(f"{name} row {row} is not unit norm (deviation {deviation[row]:.3g})")


def cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Mean -log softmax(logits)[label] and its gradient wrt the logits."""
    logits = as_matrix(logits, "logits")
    labels = _as_indices(labels, "labels")
    n, classes = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise SampleIndexError(f"labels must lie in [0, {classes})")
    rows = np.arange(n)
    log_probs = log_softmax(logits, axis=1)
    loss = float(-log_probs[rows, labels].mean())
    grad = softmax(logits, axis=1)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def info_nce(
    anchors: np.ndarray,
    keys: np.ndarray,
    positive_index: Sequence[int],
    tau: float,
    candidates: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """InfoNCE over unit-norm anchors and keys.

    Each anchor i scores every key (or the key ids in ``candidates[i]``) by
    a.k/tau; the loss is the mean cross-entropy of picking
    ``keys[positive_index[i]]``. With ``candidates`` the positive must be
    listed in its row. Returns the loss and its gradient wrt the anchors.
    """
    if tau <= 0:
        raise RangeError("temperature must be positive")
    anchors = as_matrix(anchors, "anchors")
    keys = as_matrix(keys, "keys")
    if anchors.shape[1] != keys.shape[1]:
        raise DimensionError(f"anchors are {anchors.shape[1]}-d, keys {keys.shape[1]}-d")
    _check_unit_rows(anchors, "anchors")
    _check_unit_rows(keys, "keys")
    positives = _as_indices(positive_index, "positive_index")
    n = anchors.shape[0]
    if positives.shape[0] != n:
        raise DimensionError(f"{positives.shape[0]} positives for {n} anchors")
    if positives.size and (positives.min() < 0 or positives.max() >= keys.shape[0]):
        raise SampleIndexError(f"positive key index outside [0, {keys.shape[0]})")
    rows = np.arange(n)

    if candidates is None:
        logits = anchors @ keys.T / tau
        target = positives
    else:
        candidates = np.asarray(candidates, dtype=np.int64)
        if candidates.ndim != 2 or candidates.shape[0] != n:
            raise DimensionError(f"candidates must be ({n}, m), got {candidates.shape}")
        if candidates.min() < 0 or candidates.max() >= keys.shape[0]:
            raise SampleIndexError("candidate key index out of range")
        hits = candidates == positives[:, None]
        if not np.all(hits.any(axis=1)):
            raise ContractError("every candidate row must contain its positive key")
        target = np.argmax(hits, axis=1)
        gathered = keys[candidates]
        logits = np.einsum("nd,nmd->nm", anchors, gathered) / tau

    log_probs = log_softmax(logits, axis=1)
    loss = float(-log_probs[rows, target].mean())
    grad_logits = softmax(logits, axis=1)
    grad_logits[rows, target] -= 1.0
    grad_logits /= n
    if candidates is None:
        grad = grad_logits @ keys / tau
    else:
        grad = np.einsum("nm,nmd->nd", grad_logits, gathered) / tau
    return loss, grad


def sample_negatives(
    rng: np.random.Generator, bank_size: int, sample_ids: np.ndarray, count: int
) -> np.ndarray:
    """Candidate key ids per anchor: own id first, then `count` distinct others."""
    if count > bank_size - 1:
        raise RangeError(f"cannot draw {count} negatives from a bank of {bank_size}")
    rows = []
    for sid in sample_ids:
        draws = rng.choice(bank_size - 1, size=count, replace=False)
        draws = draws + (draws >= sid)
        rows.append(np.concatenate(([sid], draws)))
    return np.asarray(rows, dtype=np.int64)


def key_count(bank_size: int, negatives: Negatives) -> int:
    """Keys in each softmax denominator: the N of ln(N) - loss."""
    return bank_size if negatives == "all" else int(negatives) + 1


def _bank_contrast(
    batch_reps: np.ndarray,
    sample_ids: Sequence[int],
    keys: np.ndarray,
    tau: float,
    negatives: Negatives,
    rng: Optional[np.random.Generator],
) -> Tuple[float, np.ndarray]:
    ids = _as_indices(sample_ids, "sample ids")
    if ids.size and (ids.min() < 0 or ids.max() >= keys.shape[0]):
        raise SampleIndexError(f"sample id outside the bank of {keys.shape[0]} rows")
    if negatives == "all":
        return info_nce(batch_reps, keys, ids, tau)
    if rng is None:
        raise StateError("sampled negatives need a seeded generator")
    candidates = sample_negatives(rng, keys.shape[0], ids, int(negatives))
    return info_nce(batch_reps, keys, ids, tau, candidates=candidates)


@dataclass
class MemoryBank:
    """Per-training-sample unit-norm representations (stage-1 keys)."""

    entries: np.ndarray
    momentum: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise RangeError("bank momentum must lie in [0, 1]")
        self.entries = as_matrix(self.entries, "bank entries")
        _check_unit_rows(self.entries, "bank entries")

    @classmethod
    def from_representations(cls, reps: np.ndarray, momentum: float = 0.5) -> "MemoryBank":
        normalized, _ = l2_normalize(as_matrix(reps, "reps"))
        return cls(entries=normalized, momentum=momentum)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def bank_update(bank: MemoryBank, sample_ids: Sequence[int], new_reps: np.ndarray) -> MemoryBank:
    """row_i <- normalize(m * row_i + (1 - m) * new_i), in place."""
    ids = _as_indices(sample_ids, "sample ids")
    new_reps = as_matrix(new_reps, "new reps")
    if new_reps.shape != (ids.shape[0], bank.entries.shape[1]):
        raise DimensionError(f"new reps {new_reps.shape} do not match {ids.shape[0]} ids")
    if ids.size and (ids.min() < 0 or ids.max() >= bank.size):
        raise SampleIndexError(f"sample id outside the bank of {bank.size} rows")
    _check_unit_rows(new_reps, "new reps")
    if bank.momentum == 1.0:
        return bank
    if bank.momentum == 0.0:
        blended = new_reps
    else:
        blended = bank.momentum * bank.entries[ids] + (1.0 - bank.momentum) * new_reps
    norms = np.linalg.norm(blended, axis=1)
    if np.any(norms < 1e-12):
        bad = int(ids[np.argmax(norms < 1e-12)])
        raise NumericError(f"memory bank blend for sample {bad} cancelled to zero")
    bank.entries[ids] = blended / norms[:, None]
    return bank


def ias_loss(
    batch_reps: np.ndarray,
    batch_sample_ids: Sequence[int],
    bank: MemoryBank,
    tau: float,
    negatives: Negatives = "all",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, np.ndarray]:
    """Stage-1 contrast: positive key is the bank row of the same sample."""
    return _bank_contrast(batch_reps, batch_sample_ids, bank.entries, tau, negatives, rng)


def _digest(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()


@dataclass
class InformationBank:
    """Frozen end-of-stage-1 backbone and its cached unit-norm representations."""

    backbone: Backbone
    cached_reps: np.ndarray
    digest: str

    def extract(self, x: np.ndarray) -> np.ndarray:
        reps, _ = mlp_forward(self.backbone, x)
        normalized, _ = l2_normalize(reps)
        return normalized

    def verify(self) -> None:
        """Raise StateError if the cached reps changed since the snapshot."""
        if _digest(self.cached_reps) != self.digest:
            raise StateError("information bank cache changed after the snapshot")


def snapshot_information_bank(backbone: Backbone, features: np.ndarray) -> InformationBank:
    """Deep-copy and freeze `backbone`, cache normalized reps of every training sample."""
    frozen = backbone.copy()
    frozen.freeze()
    reps, _ = mlp_forward(frozen, features)
    cached, _ = l2_normalize(reps)
    cached.setflags(write=False)
    bank = InformationBank(backbone=frozen, cached_reps=cached, digest=_digest(cached))
    logger.info("Information bank snapshot taken", samples=cached.shape[0], digest=bank.digest[:12])
    return bank


def irs_loss(
    batch_reps: np.ndarray,
    batch_sample_ids: Sequence[int],
    info_bank: Optional[InformationBank],
    tau: float,
    negatives: Negatives = "all",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, np.ndarray]:
    """Stage-2 contrast against the frozen information bank."""
    if info_bank is None or info_bank.cached_reps is None:
        raise StateError("information bank snapshot missing")
    return _bank_contrast(batch_reps, batch_sample_ids, info_bank.cached_reps, tau, negatives, rng)


@dataclass
class StageLoss:
    """One stage objective evaluated on a batch."""

    total: float
    cross_entropy: float
    contrastive: Optional[float]
    key_count: Optional[int]
    grad_reps: Optional[np.ndarray]
    grad_logits: np.ndarray
    normalized_reps: Optional[np.ndarray] = None

    @property
    def entropy_bound(self) -> Optional[float]:
        """ln(N_keys) - contrastive loss, when a contrastive term was computed."""
        if self.contrastive is None:
            return None
        return float(np.log(self.key_count)) - self.contrastive


def _stage_objective(
    reps: np.ndarray,
    logits: np.ndarray,
    labels: Sequence[int],
    weight: float,
    contrast,
    keys_total: int,
    negatives: Negatives,
) -> StageLoss:
    ce, grad_logits = cross_entropy(logits, labels)
    if weight == 0:
        return StageLoss(total=ce, cross_entropy=ce, contrastive=None, key_count=None,
                         grad_reps=None, grad_logits=grad_logits)
    normalized, norms = l2_normalize(as_matrix(reps, "reps"))
    loss, grad_normalized = contrast(normalized)
    grad_reps = weight * l2_normalize_backward(normalized, norms, grad_normalized)
    return StageLoss(
        total=weight * loss + ce,
        cross_entropy=ce,
        contrastive=loss,
        key_count=key_count(keys_total, negatives),
        grad_reps=grad_reps,
        grad_logits=grad_logits,
        normalized_reps=normalized,
    )


def stage1_objective(
    reps: np.ndarray,
    logits: np.ndarray,
    labels: Sequence[int],
    sample_ids: Sequence[int],
    bank: Optional[MemoryBank],
    config: LossConfig,
    rng: Optional[np.random.Generator] = None,
) -> StageLoss:
    """alpha * L_IAS + L_CE."""
    if config.alpha != 0 and bank is None:
        raise StateError("stage 1 with alpha > 0 needs a memory bank")
    size = bank.size if bank is not None else 0
    return _stage_objective(
        reps, logits, labels, config.alpha,
        lambda normalized: ias_loss(normalized, sample_ids, bank, config.tau_stage1,
                                    config.negatives_per_anchor, rng),
        size, config.negatives_per_anchor,
    )


def stage2_objective(
    reps: np.ndarray,
    logits: np.ndarray,
    labels: Sequence[int],
    sample_ids: Sequence[int],
    info_bank: Optional[InformationBank],
    config: LossConfig,
    rng: Optional[np.random.Generator] = None,
) -> StageLoss:
    """beta * L_IRS + L_CE."""
    if config.beta != 0 and info_bank is None:
        raise StateError("information bank snapshot missing")
    size = info_bank.cached_reps.shape[0] if info_bank is not None else 0
    return _stage_objective(
        reps, logits, labels, config.beta,
        lambda normalized: irs_loss(normalized, sample_ids, info_bank, config.tau_stage2,
                                    config.negatives_per_anchor, rng),
        size, config.negatives_per_anchor,
    )
