"""
Mutual-information machinery: the MINE estimator, exact discrete and Gaussian
oracles, the max-variance direction search and the InfoNCE entropy bound.

All values are in nats.
"""
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.special import logsumexp, rel_entr
from scipy.stats import entropy
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from ..core.config import get_settings
from ..core.errors import (
    ContractError,
    DataError,
    DegenerateError,
    DimensionError,
    MineDivergenceError,
    RangeError,
)
from ..core.metrics import MINE_DURATION, MINE_RETRIES
from ..models.config import MineConfig
from ..models.records import MiEstimate
from .numerics import AdamState, Mlp, adam_step, as_matrix, init_mlp, mlp_backward, mlp_forward

logger = structlog.get_logger(__name__)

NORMALIZATION_TOLERANCE = 1e-12
TIE_TOLERANCE = 1e-9


# MINE

def _standardize(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0.0] = 1.0
    return centered / scale


def _critic_params(critic: Mlp):
    return critic.named_parameters("critic")


def _run_mine(a: np.ndarray, b: np.ndarray, config: MineConfig, seed: int) -> MiEstimate:
    n = a.shape[0]
    rng = np.random.default_rng(seed)
    dims = [a.shape[1] + b.shape[1]] + [config.hidden_dim] * (config.layer_count - 1) + [1]
    critic = init_mlp(dims, seed=seed, activate_output=False)
    params = _critic_params(critic)
    optimizer = AdamState(learning_rate=config.learning_rate)
    batch = config.batch_size
    log_batch = math.log(batch)
    ema: Optional[float] = None
    history = np.empty(config.train_steps)

    for step in range(config.train_steps):
        joint_idx = rng.choice(n, size=batch, replace=False)
        marginal_idx = rng.choice(n, size=batch, replace=False)
        joint = np.hstack([a[joint_idx], b[joint_idx]])
        marginal = np.hstack([a[joint_idx], b[marginal_idx]])
        stacked = np.vstack([joint, marginal])

        scores, cache = mlp_forward(critic, stacked)
        t_joint = scores[:batch, 0]
        t_marginal = scores[batch:, 0]
        log_mean_exp = float(logsumexp(t_marginal) - log_batch)
        value = float(t_joint.mean()) - log_mean_exp
        if not math.isfinite(value):
            raise MineDivergenceError(f"MINE statistics network diverged at step {step}")
        history[step] = value

        # maximize value: gradient of -value
        if config.bias_correction:
            mean_exp = math.exp(log_mean_exp)
            ema = mean_exp if ema is None else config.ema_decay * ema + (1.0 - config.ema_decay) * mean_exp
            grad_marginal = np.exp(t_marginal) / (batch * ema)
        else:
            grad_marginal = np.exp(t_marginal - logsumexp(t_marginal))
        grad_scores = np.concatenate([np.full(batch, -1.0 / batch), grad_marginal])[:, None]
        if not np.all(np.isfinite(grad_scores)):
            raise MineDivergenceError(f"MINE gradient overflowed at step {step}")

        grad_w, grad_b, _ = mlp_backward(critic, cache, grad_scores)
        grads = {}
        for i, (gw, gb) in enumerate(zip(grad_w, grad_b)):
            grads[f"critic.{i}.weight"] = gw
            grads[f"critic.{i}.bias"] = gb
        params = adam_step(params, grads, optimizer)
        critic = critic.with_parameters(params, "critic")

    tail = max(1, int(math.ceil(config.tail_fraction * config.train_steps)))
    window = history[-tail:]
    stderr = float(window.std(ddof=1) / math.sqrt(tail)) if tail > 1 else 0.0
    return MiEstimate(value=float(window.mean()), stderr=stderr, steps_used=config.train_steps)


def mine_estimate(
    samples_a: np.ndarray,
    samples_b: np.ndarray,
    config: Optional[MineConfig] = None,
    seed: int = 0,
    quantity: str = "generic",
) -> MiEstimate:
    """Donsker-Varadhan estimate of I(A;B) from paired rows.

    Args:
        samples_a: (n, da) matrix
        samples_b: (n, db) matrix paired row by row with samples_a
        config: statistics network and optimizer settings
        seed: base seed; restart k after a divergence runs with seed (seed, k)
        quantity: label for metrics and logs, e.g. "ixt" or "ity"

    Returns:
        MiEstimate with the mean and standard error over the tail window.

    Raises:
        DataError: fewer than 2 * batch_size paired samples
        MineDivergenceError: every restart diverged
    """
    config = config or MineConfig()
    a = as_matrix(samples_a, "samples_a")
    b = as_matrix(samples_b, "samples_b")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"{a.shape[0]} rows of a paired with {b.shape[0]} rows of b")
    if a.shape[0] < 2 * config.batch_size:
        raise DataError(
            f"MINE needs at least {2 * config.batch_size} samples, got {a.shape[0]}"
        )
    if config.standardize_inputs:
        a, b = _standardize(a), _standardize(b)

    started = time.perf_counter()
    retrying = Retrying(
        stop=stop_after_attempt(get_settings().mine_retry_count),
        retry=retry_if_exception_type(MineDivergenceError),
        reraise=True,
    )
    for attempt in retrying:
        with attempt:
            number = attempt.retry_state.attempt_number
            if number > 1:
                MINE_RETRIES.inc()
                logger.warning("Restarting MINE after divergence", attempt=number, quantity=quantity)
            run_seed = seed if number == 1 else int(np.random.SeedSequence([seed, number]).generate_state(1)[0])
            estimate = _run_mine(a, b, config, run_seed)
    MINE_DURATION.labels(quantity=quantity).observe(time.perf_counter() - started)
    logger.debug("MINE estimate", quantity=quantity, value=estimate.value, stderr=estimate.stderr)
    return estimate


def _subsample(rng: np.random.Generator, n: int, max_samples: Optional[int]) -> np.ndarray:
    if max_samples is None or n <= max_samples:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_samples, replace=False))


def estimate_ixt(
    features: np.ndarray,
    reps: np.ndarray,
    config: MineConfig,
    seed: int,
    max_samples: Optional[int] = None,
) -> MiEstimate:
    """I(X;T) with the statistics network fed input (+) representation."""
    rows = _subsample(np.random.default_rng(seed), features.shape[0], max_samples)
    return mine_estimate(features[rows], reps[rows], config, seed=seed, quantity="ixt")


def estimate_ity(
    reps: np.ndarray,
    labels: Sequence[int],
    class_count: int,
    config: MineConfig,
    seed: int,
    max_samples: Optional[int] = None,
) -> MiEstimate:
    """I(T;Y) with the statistics network fed representation (+) one-hot label."""
    labels = np.asarray(labels)
    rows = _subsample(np.random.default_rng(seed), reps.shape[0], max_samples)
    return mine_estimate(reps[rows], one_hot(labels[rows], class_count), config, seed=seed,
                         quantity="ity")


# Exact oracles

def one_hot(indices: Sequence[int], count: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= count):
        raise RangeError(f"category index outside [0, {count})")
    encoded = np.zeros((indices.shape[0], count))
    encoded[np.arange(indices.shape[0]), indices] = 1.0
    return encoded


@dataclass
class DiscreteJoint:
    """Probability table p(x, y)."""

    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != 2:
            raise DimensionError("joint table must be 2-D")
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise ContractError("joint probabilities must be finite and nonnegative")
        total = table.sum()
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise ContractError(f"joint probabilities sum to {total!r}, not 1")
        self.table = table

    @property
    def marginal_x(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def marginal_y(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def sample(self, n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """Draw n (x, y) index pairs."""
        rng = np.random.default_rng(seed)
        rows, cols = self.table.shape
        flat = rng.choice(rows * cols, size=n, p=self.table.ravel())
        return flat // cols, flat % cols

    def sample_one_hot(self, n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        x, y = self.sample(n, seed)
        return one_hot(x, self.table.shape[0]), one_hot(y, self.table.shape[1])

    @classmethod
    def random(cls, rows: int, cols: int, seed: int) -> "DiscreteJoint":
        table = np.random.default_rng(seed).dirichlet(np.ones(rows * cols)).reshape(rows, cols)
        return cls(table / table.sum())


def discrete_mi_exact(joint: DiscreteJoint) -> float:
    """Sum of p(x,y) ln[p(x,y) / (p(x) p(y))] with 0 ln 0 = 0."""
    product = np.outer(joint.marginal_x, joint.marginal_y)
    return float(max(rel_entr(joint.table, product).sum(), 0.0))


def discrete_entropy(probabilities: Sequence[float]) -> float:
    return float(entropy(np.asarray(probabilities, dtype=np.float64)))


def gaussian_entropy(covariance: np.ndarray) -> float:
    """Differential entropy 0.5 ln|S| + D/2 (1 + ln 2pi) of N(mu, S)."""
    cov = np.atleast_2d(np.asarray(covariance, dtype=np.float64))
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise ContractError("covariance is not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ContractError("covariance is not positive definite") from exc
    log_det = 2.0 * float(np.log(np.diag(chol)).sum())
    dim = cov.shape[0]
    return 0.5 * log_det + 0.5 * dim * (1.0 + math.log(2.0 * math.pi))


def gaussian_mi(rho: float) -> float:
    """I(X;Y) of a standard bivariate Gaussian with correlation rho."""
    if not -1.0 < rho < 1.0:
        raise RangeError("rho must lie in (-1, 1)")
    return -0.5 * math.log(1.0 - rho * rho)


def gaussian_pair(n: int, rho: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """n draws of a standard bivariate Gaussian, returned as two (n, 1) columns."""
    if not -1.0 < rho < 1.0:
        raise RangeError("rho must lie in (-1, 1)")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    return x[:, None], y[:, None]


# Max-MI linear projection

@dataclass
class LinearDirection:
    direction: np.ndarray
    variance: float
    tie: bool
    iterations: int


def _ascend(matrix: np.ndarray, rng: np.random.Generator, step: float, tol: float,
            max_iter: int) -> Tuple[np.ndarray, int]:
    w = rng.standard_normal(matrix.shape[0])
    w /= np.linalg.norm(w)
    for iteration in range(1, max_iter + 1):
        ascended = w + step * (matrix @ w)
        norm = np.linalg.norm(ascended)
        if norm == 0.0:
            return w, iteration
        updated = ascended / norm
        if np.linalg.norm(updated - w) < tol:
            return updated, iteration
        w = updated
    return w, max_iter


def top_direction(
    covariance: np.ndarray,
    seed: int = 0,
    step: float = 100.0,
    tol: float = 1e-13,
    max_iter: int = 100000,
) -> LinearDirection:
    """Projected gradient ascent on w' S w over the unit sphere.

    The ascent runs on S / trace(S) so the step is scale free; a second
    ascent on the deflated matrix detects ties between the top two
    eigenvalues.
    """
    cov = np.asarray(covariance, dtype=np.float64)
    trace = float(np.trace(cov))
    if trace <= 0.0:
        raise DegenerateError("data has no variance to project")
    rng = np.random.default_rng(seed)
    scaled = cov / trace
    w, iterations = _ascend(scaled, rng, step, tol, max_iter)
    top = float(w @ cov @ w)
    tie = False
    if cov.shape[0] > 1:
        deflated = scaled - (top / trace) * np.outer(w, w)
        w2, _ = _ascend(deflated, rng, step, tol, max_iter)
        second = float(w2 @ cov @ w2)
        tie = abs(top - second) <= TIE_TOLERANCE * max(1.0, top)
    if tie:
        logger.info("Top eigenvalues tied; direction is not unique", variance=top)
    return LinearDirection(direction=w, variance=top, tie=tie, iterations=iterations)


def max_mi_linear_direction(data: np.ndarray, seed: int = 0) -> LinearDirection:
    """Unit direction whose projection of `data` has maximal variance."""
    x = as_matrix(data, "data")
    if x.shape[0] < 2:
        raise DataError("need at least 2 samples")
    return top_direction(np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1]), seed=seed)


def infonce_entropy_bound(loss: float, key_count: int) -> float:
    """ln(N) - InfoNCE loss: lower bound on min(H(T1), H(T2))."""
    if loss < 0:
        raise RangeError("InfoNCE loss is nonnegative")
    if key_count < 1:
        raise RangeError("key count must be at least 1")
    return math.log(key_count) - loss
