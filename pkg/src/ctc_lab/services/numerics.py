"""
Dense numerics: rectifier MLPs with exact analytic gradients, the optimizers
every training loop uses, the cosine schedule and a finite-difference checker.

All arrays are float64. Parameters travel between modules as an ordered
``Dict[str, np.ndarray]`` so optimizers and the gradient checker can name the
parameter they fail on.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..core.errors import DimensionError, NumericError, RangeError

logger = structlog.get_logger(__name__)

Params = Dict[str, np.ndarray]


def as_matrix(x: np.ndarray, name: str = "x") -> np.ndarray:
    """Return `x` as a finite 2-D float64 array."""
    array = np.asarray(x, dtype=np.float64)
    if array.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name} contains non-finite entries")
    return array


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class Mlp:
    """Fully-connected rectifier network: x @ W + b per layer."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activate_output: bool = True

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise DimensionError("an MLP needs one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i} expects {w.shape[0]} inputs, previous layer gives "
                    f"{self.weights[i - 1].shape[1]}"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def named_parameters(self, prefix: str) -> Params:
        params: Params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.{i}.weight"] = w
            params[f"{prefix}.{i}.bias"] = b
        return params

    def with_parameters(self, params: Params, prefix: str):
        """New network of the same class holding `params`."""
        count = len(self.weights)
        weights = [params[f"{prefix}.{i}.weight"] for i in range(count)]
        biases = [params[f"{prefix}.{i}.bias"] for i in range(count)]
        return type(self)(weights=weights, biases=biases, activate_output=self.activate_output)

    def copy(self):
        return type(self)(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activate_output=self.activate_output,
        )

    def freeze(self) -> None:
        for array in self.weights + self.biases:
            array.setflags(write=False)


@dataclass
class Backbone(Mlp):
    """Deterministic feature extractor producing the representation T.

    Hidden layers are rectified; the representation layer is linear unless
    `activate_output` is set.
    """

    activate_output: bool = False

    @property
    def rep_dim(self) -> int:
        return self.output_dim


@dataclass
class LinearHead:
    """Classifier on top of the representation."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"head weight {self.weight.shape} and bias {self.bias.shape} do not match")

    @property
    def class_count(self) -> int:
        return self.weight.shape[1]

    @property
    def rep_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LinearHead":
        return LinearHead(weight=self.weight.copy(), bias=self.bias.copy())


@dataclass
class MlpCache:
    """Layer inputs and pre-activations kept for the backward pass."""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    bias = rng.uniform(-bound, bound, size=fan_out)
    return weight, bias


def init_mlp(dims: Sequence[int], seed: int, activate_output: bool = True, cls=Mlp):
    """Uniform fan-in initialization from a seeded generator."""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise DimensionError(f"invalid layer dims {list(dims)}")
    rng = np.random.default_rng(seed)
    layers = [_uniform_layer(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    return cls(
        weights=[w for w, _ in layers],
        biases=[b for _, b in layers],
        activate_output=activate_output,
    )


def init_backbone(
    input_dim: int, hidden_dims: Sequence[int], rep_dim: int, seed: int, rectify_reps: bool = False
) -> Backbone:
    return init_mlp([input_dim, *hidden_dims, rep_dim], seed, activate_output=rectify_reps, cls=Backbone)


def init_head(rep_dim: int, class_count: int, seed: int) -> LinearHead:
    weight, bias = _uniform_layer(np.random.default_rng(seed), rep_dim, class_count)
    return LinearHead(weight=weight, bias=bias)


def mlp_forward(mlp: Mlp, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    x = as_matrix(x)
    if x.shape[1] != mlp.input_dim:
        raise DimensionError(f"input has {x.shape[1]} columns, network expects {mlp.input_dim}")
    cache = MlpCache(inputs=[], pre_activations=[])
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre_activations.append(z)
        h = _relu(z) if (i < last or mlp.activate_output) else z
    return h, cache


def mlp_backward(
    mlp: Mlp, cache: MlpCache, grad_out: np.ndarray
) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
    """Gradients wrt weights, biases and the network input."""
    last = len(mlp.weights) - 1
    expected = cache.pre_activations[-1].shape
    if grad_out.shape != expected:
        raise DimensionError(f"upstream gradient {grad_out.shape} does not match output {expected}")
    grad_w: List[np.ndarray] = [None] * len(mlp.weights)
    grad_b: List[np.ndarray] = [None] * len(mlp.weights)
    g = grad_out
    for i in range(last, -1, -1):
        if i < last or mlp.activate_output:
            g = g * (cache.pre_activations[i] > 0.0)
        grad_w[i] = cache.inputs[i].T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ mlp.weights[i].T
    return grad_w, grad_b, g


def forward(backbone: Backbone, head: LinearHead, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Representations T and class logits for a batch."""
    if head.rep_dim != backbone.rep_dim:
        raise DimensionError(f"head expects {head.rep_dim}-d reps, backbone gives {backbone.rep_dim}")
    reps, _ = mlp_forward(backbone, x)
    return reps, reps @ head.weight + head.bias


def network_parameters(backbone: Backbone, head: LinearHead) -> Params:
    params = backbone.named_parameters("backbone")
    params["head.weight"] = head.weight
    params["head.bias"] = head.bias
    return params


def load_network_parameters(
    backbone: Backbone, head: LinearHead, params: Params
) -> Tuple[Backbone, LinearHead]:
    return (
        backbone.with_parameters(params, "backbone"),
        LinearHead(weight=params["head.weight"], bias=params["head.bias"]),
    )


def backward(
    backbone: Backbone,
    head: LinearHead,
    x: np.ndarray,
    upstream_grads: Tuple[Optional[np.ndarray], Optional[np.ndarray]],
) -> Params:
    """Parameter gradients given dL/dreps and dL/dlogits (either may be None)."""
    grad_reps, grad_logits = upstream_grads
    reps, cache = mlp_forward(backbone, x)
    n = reps.shape[0]
    total = np.zeros_like(reps)
    if grad_reps is not None:
        if grad_reps.shape != reps.shape:
            raise DimensionError(f"rep gradient {grad_reps.shape} does not match reps {reps.shape}")
        total = total + grad_reps
    if grad_logits is not None:
        if grad_logits.shape != (n, head.class_count):
            raise DimensionError(
                f"logit gradient {grad_logits.shape} does not match logits {(n, head.class_count)}"
            )
        head_w = reps.T @ grad_logits
        head_b = grad_logits.sum(axis=0)
        total = total + grad_logits @ head.weight.T
    else:
        head_w = np.zeros_like(head.weight)
        head_b = np.zeros_like(head.bias)
    grad_w, grad_b, _ = mlp_backward(backbone, cache, total)
    grads: Params = {}
    for i, (gw, gb) in enumerate(zip(grad_w, grad_b)):
        grads[f"backbone.{i}.weight"] = gw
        grads[f"backbone.{i}.bias"] = gb
    grads["head.weight"] = head_w
    grads["head.bias"] = head_b
    return grads


def l2_normalize(x: np.ndarray, min_norm: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    """Row-normalize; a (near) zero row cannot be normalized."""
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < min_norm):
        bad = int(np.argmax(norms < min_norm))
        raise NumericError(f"cannot normalize zero-norm row {bad}")
    return x / norms[:, None], norms


def l2_normalize_backward(normalized: np.ndarray, norms: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient through y = x / ||x|| given y, ||x|| and dL/dy."""
    radial = np.sum(normalized * grad, axis=1, keepdims=True)
    return (grad - normalized * radial) / norms[:, None]


def _check_step_inputs(params: Params, grads: Params, buffers: Sequence[Params]) -> None:
    if params.keys() != grads.keys():
        missing = sorted(set(params) ^ set(grads))
        raise DimensionError(f"parameter and gradient names differ: {missing}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        for buffer in buffers:
            if buffer[name].shape != p.shape:
                raise DimensionError(f"optimizer buffer for {name} has shape {buffer[name].shape}")


@dataclass
class SgdState:
    """Momentum SGD with weight decay folded into the gradient."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: Params = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise RangeError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise RangeError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise RangeError("weight decay must be non-negative")

    @classmethod
    def for_params(cls, params: Params, learning_rate: float, momentum: float = 0.0,
                   weight_decay: float = 0.0) -> "SgdState":
        velocity = {name: np.zeros_like(p) for name, p in params.items()}
        return cls(learning_rate=learning_rate, momentum=momentum, weight_decay=weight_decay,
                   velocity=velocity)


def sgd_step(params: Params, grads: Params, state: SgdState) -> Params:
    """One step: g += wd*p; v = mu*v + g; p -= lr*v."""
    if not state.velocity:
        state.velocity = {name: np.zeros_like(p) for name, p in params.items()}
    _check_step_inputs(params, grads, [state.velocity])
    updated: Params = {}
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.momentum * state.velocity[name] + g if state.momentum else g
        state.velocity[name] = v
        updated[name] = p - state.learning_rate * v
    return updated


@dataclass
class AdamState:
    """Bias-corrected Adam."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise RangeError("learning rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise RangeError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise RangeError("epsilon must be positive")


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    if not state.first_moment:
        state.first_moment = {name: np.zeros_like(p) for name, p in params.items()}
        state.second_moment = {name: np.zeros_like(p) for name, p in params.items()}
    _check_step_inputs(params, grads, [state.first_moment, state.second_moment])
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated: Params = {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated


@dataclass(frozen=True)
class CosineSchedule:
    lr_init: float
    lr_min: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.lr_init <= 0:
            raise RangeError("lr_init must be positive")
        if not 0.0 <= self.lr_min <= self.lr_init:
            raise RangeError("lr_min must lie in [0, lr_init]")
        if self.total_steps < 0:
            raise RangeError("total_steps must be non-negative")


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    """lr_min + (lr_init - lr_min) * (1 + cos(pi * step / total)) / 2."""
    if not 0 <= step <= schedule.total_steps:
        raise RangeError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.total_steps == 0:
        return schedule.lr_init
    cosine = 1.0 + math.cos(math.pi * step / schedule.total_steps)
    return schedule.lr_min + 0.5 * (schedule.lr_init - schedule.lr_min) * cosine


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and numeric gradients."""

    max_rel_error: Dict[str, float]
    tolerance: float
    entries_checked: int

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.max_rel_error.items() if not err <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_diff_check(
    loss_fn: Callable[[Params], Tuple[float, Params]],
    params: Params,
    tolerance: float,
    step: float = 1e-5,
    abs_floor: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    Args:
        loss_fn: pure function returning (loss, gradients) for a parameter dict
        params: point to check at; never modified
        tolerance: relative error a parameter may reach and still pass
        step: central-difference half width
        abs_floor: denominator floor so vanishing gradients compare absolutely
        max_entries: check at most this many seeded entries per parameter

    Returns:
        GradCheckReport; failures are reported, not raised.
    """
    if tolerance <= 0:
        raise RangeError("tolerance must be positive")
    base = {name: np.array(p, dtype=np.float64, copy=True) for name, p in params.items()}
    _, analytic = loss_fn(base)
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    checked = 0
    for name, value in base.items():
        indices = list(np.ndindex(value.shape))
        if max_entries is not None and len(indices) > max_entries:
            picks = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(picks)]
        worst = 0.0
        for index in indices:
            original = value[index]
            value[index] = original + step
            plus, _ = loss_fn(base)
            value[index] = original - step
            minus, _ = loss_fn(base)
            value[index] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = analytic[name][index]
            denom = max(abs(exact), abs(numeric), abs_floor)
            worst = max(worst, abs(exact - numeric) / denom)
            checked += 1
        report[name] = worst
    result = GradCheckReport(max_rel_error=report, tolerance=tolerance, entries_checked=checked)
    if not result.passed:
        logger.warning("Gradient check failed", failures=result.failures, worst=result.worst)
    return result
