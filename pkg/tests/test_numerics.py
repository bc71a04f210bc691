import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ctc_lab.core.errors import DimensionError, NumericError, RangeError
from ctc_lab.services.numerics import (
    AdamState,
    Backbone,
    CosineSchedule,
    LinearHead,
    SgdState,
    adam_step,
    backward,
    cosine_lr,
    finite_diff_check,
    forward,
    init_backbone,
    init_head,
    init_mlp,
    l2_normalize,
    l2_normalize_backward,
    load_network_parameters,
    mlp_backward,
    mlp_forward,
    network_parameters,
    sgd_step,
)


def _network(seed=0, input_dim=5, hidden=(7,), rep_dim=4, classes=3):
    backbone = init_backbone(input_dim, hidden, rep_dim, seed)
    head = init_head(rep_dim, classes, seed + 1)
    return backbone, head


def test_init_is_deterministic():
    a, _ = _network(seed=3)
    b, _ = _network(seed=3)
    for wa, wb in zip(a.weights, b.weights):
        assert_array_equal(wa, wb)
    c, _ = _network(seed=4)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_forward_shapes(rng):
    backbone, head = _network()
    reps, logits = forward(backbone, head, rng.standard_normal((6, 5)))
    assert reps.shape == (6, 4)
    assert logits.shape == (6, 3)


def test_forward_rejects_wrong_width(rng):
    backbone, head = _network()
    with pytest.raises(DimensionError):
        forward(backbone, head, rng.standard_normal((6, 4)))


def test_forward_rejects_non_finite_input():
    backbone, head = _network()
    x = np.zeros((2, 5))
    x[1, 2] = np.nan
    with pytest.raises(NumericError):
        forward(backbone, head, x)


@pytest.mark.parametrize("seed", range(5))
def test_network_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    backbone, head = _network(seed=seed)
    x = rng.standard_normal((6, 5))
    target_reps = rng.standard_normal((6, 4))
    target_logits = rng.standard_normal((6, 3))

    def loss_fn(params):
        bb, hd = load_network_parameters(backbone, head, params)
        reps, logits = forward(bb, hd, x)
        loss = 0.5 * np.sum((reps - target_reps) ** 2) + 0.5 * np.sum((logits - target_logits) ** 2)
        grads = backward(bb, hd, x, (reps - target_reps, logits - target_logits))
        return loss, grads

    report = finite_diff_check(loss_fn, network_parameters(backbone, head), tolerance=1e-4)
    assert report.passed, report.max_rel_error


def test_mlp_backward_input_gradient(rng):
    mlp = init_mlp([3, 5, 1], seed=2, activate_output=False)
    x = rng.standard_normal((4, 3))
    out, cache = mlp_forward(mlp, x)
    _, _, grad_x = mlp_backward(mlp, cache, np.ones_like(out))

    eps = 1e-6
    numeric = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric[index] = (mlp_forward(mlp, plus)[0].sum() - mlp_forward(mlp, minus)[0].sum()) / (2 * eps)
    assert_allclose(grad_x, numeric, rtol=1e-5, atol=1e-8)


def test_backward_accepts_missing_branch(rng):
    backbone, head = _network()
    x = rng.standard_normal((3, 5))
    grads = backward(backbone, head, x, (None, np.ones((3, 3))))
    assert set(grads) == set(network_parameters(backbone, head))
    only_reps = backward(backbone, head, x, (np.ones((3, 4)), None))
    assert_array_equal(only_reps["head.weight"], np.zeros_like(head.weight))


def test_l2_normalize_rows(rng):
    x = rng.standard_normal((5, 3))
    y, norms = l2_normalize(x)
    assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
    assert_allclose(norms, np.linalg.norm(x, axis=1))


def test_l2_normalize_zero_row():
    with pytest.raises(NumericError):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_l2_normalize_backward_matches_finite_differences(rng):
    weights = rng.standard_normal((4, 3))

    def loss_fn(params):
        y, norms = l2_normalize(params["x"])
        return float(np.sum(weights * y)), {"x": l2_normalize_backward(y, norms, weights)}

    report = finite_diff_check(loss_fn, {"x": rng.standard_normal((4, 3))}, tolerance=1e-6)
    assert report.passed


def test_sgd_momentum_steps():
    params = {"p": np.array([1.0])}
    state = SgdState(learning_rate=0.1, momentum=0.9)
    params = sgd_step(params, {"p": np.array([0.5])}, state)
    assert_allclose(params["p"], [0.95])
    params = sgd_step(params, {"p": np.array([0.5])}, state)
    assert_allclose(params["p"], [0.855])


def test_sgd_weight_decay():
    params = sgd_step({"p": np.array([1.0])}, {"p": np.array([0.0])},
                      SgdState(learning_rate=1.0, weight_decay=0.1))
    assert_allclose(params["p"], [0.9])


def test_sgd_does_not_mutate_inputs():
    original = {"p": np.array([1.0, 2.0])}
    snapshot = original["p"].copy()
    sgd_step(original, {"p": np.array([1.0, 1.0])}, SgdState(learning_rate=0.5))
    assert_array_equal(original["p"], snapshot)


def test_sgd_names_non_finite_parameter():
    params = {"layer.weight": np.ones(2), "layer.bias": np.ones(1)}
    grads = {"layer.weight": np.array([1.0, np.inf]), "layer.bias": np.zeros(1)}
    with pytest.raises(NumericError, match="layer.weight"):
        sgd_step(params, grads, SgdState(learning_rate=0.1))


def test_sgd_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step({"p": np.ones(2)}, {"p": np.ones(3)}, SgdState(learning_rate=0.1))


def test_adam_first_step_moves_by_learning_rate():
    params = adam_step({"p": np.array([1.0, -1.0])}, {"p": np.array([3.0, -0.01])},
                       AdamState(learning_rate=0.01))
    assert_allclose(params["p"], [0.99, -0.99], rtol=1e-6)


def test_cosine_schedule_endpoints():
    schedule = CosineSchedule(lr_init=0.1, lr_min=0.0, total_steps=10)
    assert cosine_lr(schedule, 0) == pytest.approx(0.1)
    assert cosine_lr(schedule, 5) == pytest.approx(0.05)
    assert cosine_lr(schedule, 10) == pytest.approx(0.0)


def test_cosine_schedule_floor():
    schedule = CosineSchedule(lr_init=0.05, lr_min=0.01, total_steps=4)
    assert cosine_lr(schedule, 4) == pytest.approx(0.01)


def test_cosine_schedule_out_of_range():
    with pytest.raises(RangeError):
        cosine_lr(CosineSchedule(lr_init=0.1, total_steps=3), 4)
    with pytest.raises(RangeError):
        CosineSchedule(lr_init=0.1, lr_min=0.2)


def test_finite_diff_check_flags_wrong_gradient():
    def loss_fn(params):
        x = params["x"]
        return float(np.sum(x ** 2)), {"x": 3.0 * x}

    report = finite_diff_check(loss_fn, {"x": np.array([1.0, 2.0])}, tolerance=1e-4)
    assert not report.passed
    assert report.failures == ["x"]
    assert report.worst == pytest.approx(1.0 / 3.0, rel=1e-4)


def test_representation_layer_is_linear(rng):
    backbone, head = _network()
    reps, _ = forward(backbone, head, rng.standard_normal((200, 5)))
    assert not backbone.activate_output
    assert (reps < 0).any()


def test_frozen_copy_is_read_only():
    backbone, _ = _network()
    frozen = backbone.copy()
    frozen.freeze()
    with pytest.raises(ValueError):
        frozen.weights[0][0, 0] = 1.0
    backbone.weights[0][0, 0] = 1.0


def test_zero_parameters_give_zero_outputs():
    backbone = Backbone(weights=[np.zeros((2, 3)), np.zeros((3, 2))], biases=[np.zeros(3), np.zeros(2)])
    head = LinearHead(weight=np.zeros((2, 4)), bias=np.zeros(4))
    reps, logits = forward(backbone, head, np.array([[1.0, -2.0], [3.0, 0.5]]))
    assert_array_equal(reps, np.zeros((2, 2)))
    assert_array_equal(logits, np.zeros((2, 4)))


def test_rectified_representation_layer():
    backbone = Backbone(weights=[np.eye(2)], biases=[np.zeros(2)], activate_output=True)
    head = LinearHead(weight=np.eye(2), bias=np.zeros(2))
    reps, _ = forward(backbone, head, np.array([[-1.0, 2.0]]))
    assert_array_equal(reps, [[0.0, 2.0]])

    rectified = init_backbone(5, [7], 4, seed=0, rectify_reps=True)
    assert rectified.activate_output
    assert (forward(rectified, init_head(4, 3, 1), np.ones((3, 5)))[0] >= 0).all()


def _scalar_forward(backbone, head, x):
    rows = [[float(v) for v in row] for row in x]
    last = len(backbone.weights) - 1
    for layer, (w, b) in enumerate(zip(backbone.weights, backbone.biases)):
        rectify = layer < last or backbone.activate_output
        next_rows = []
        for row in rows:
            out = []
            for j in range(w.shape[1]):
                total = 0.0
                for i, value in enumerate(row):
                    total += value * float(w[i, j])
                total += float(b[j])
                out.append(max(total, 0.0) if rectify else total)
            next_rows.append(out)
        rows = next_rows
    logits = [[sum(r * float(head.weight[i, j]) for i, r in enumerate(row)) + float(head.bias[j])
               for j in range(head.class_count)] for row in rows]
    return np.array(rows), np.array(logits)


def test_forward_matches_scalar_arithmetic(rng):
    backbone, head = _network(seed=0, hidden=(6,))
    x = rng.standard_normal((4, 5))
    reps, logits = forward(backbone, head, x)
    expected_reps, expected_logits = _scalar_forward(backbone, head, x)
    assert_allclose(reps, expected_reps, rtol=1e-12, atol=1e-12)
    assert_allclose(logits, expected_logits, rtol=1e-12, atol=1e-12)


def test_forward_is_pure(rng):
    backbone, head = _network(seed=2)
    x = rng.standard_normal((8, 5))
    before = x.copy()
    first = forward(backbone, head, x)
    second = forward(backbone, head, x)
    assert_array_equal(first[0], second[0])
    assert_array_equal(first[1], second[1])
    assert_array_equal(x, before)


def test_backward_zero_upstream_gives_zero_gradients(rng):
    backbone, head = _network(seed=1)
    x = rng.standard_normal((5, 5))
    grads = backward(backbone, head, x, (np.zeros((5, 4)), np.zeros((5, 3))))
    for name, grad in grads.items():
        assert_array_equal(grad, np.zeros_like(grad), err_msg=name)


def test_linear_layer_gradient_closed_form(rng):
    backbone = init_backbone(3, [], 2, seed=0)
    head = init_head(2, 2, seed=1)
    x = rng.standard_normal((10, 3))
    y = rng.standard_normal((10, 2))
    reps, _ = forward(backbone, head, x)
    err = reps - y
    grads = backward(backbone, head, x, (err / len(x), None))
    assert_allclose(grads["backbone.0.weight"], x.T @ err / len(x), rtol=1e-12, atol=1e-15)
    assert_allclose(grads["backbone.0.bias"], err.mean(axis=0), rtol=1e-12, atol=1e-15)


def test_sgd_zero_learning_rate_or_gradient_keeps_parameters(rng):
    params = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
    grads = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
    frozen = sgd_step(params, grads, SgdState(learning_rate=0.0, momentum=0.9, weight_decay=5e-4))
    zero = {name: np.zeros_like(g) for name, g in grads.items()}
    still = sgd_step(params, zero, SgdState(learning_rate=0.1, momentum=0.9))
    for name in params:
        assert_array_equal(frozen[name], params[name])
        assert_array_equal(still[name], params[name])


def test_adam_zero_gradient_keeps_parameters():
    state = AdamState(learning_rate=0.1)
    params = {"p": np.array([1.5, -2.0])}
    updated = adam_step(params, {"p": np.zeros(2)}, state)
    assert_array_equal(updated["p"], params["p"])
    assert state.step == 1


def test_adam_matches_scalar_recurrence():
    state = AdamState(learning_rate=0.05)
    params = {"p": np.array([0.0])}
    p, m, v = 0.0, 0.0, 0.0
    for step in range(1, 101):
        g = 2.0 * (p - 3.0)
        params = adam_step(params, {"p": np.array([g])}, state)
        m = 0.9 * m + (1.0 - 0.9) * g
        v = 0.999 * v + (1.0 - 0.999) * g * g
        m_hat = m / (1.0 - 0.9 ** step)
        v_hat = v / (1.0 - 0.999 ** step)
        p = p - 0.05 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert params["p"][0] == pytest.approx(p, abs=1e-12)
    assert state.step == 100


def test_cosine_schedule_never_increases():
    schedule = CosineSchedule(lr_init=0.05, lr_min=1e-3, total_steps=1000)
    rates = np.array([cosine_lr(schedule, step) for step in range(1001)])
    assert np.all(np.diff(rates) <= 0.0)
    assert rates[0] == pytest.approx(0.05) and rates[-1] == pytest.approx(1e-3)


def test_finite_diff_check_on_least_squares(rng):
    a = rng.standard_normal((12, 4))
    y = rng.standard_normal(12)

    def loss_fn(params):
        residual = a @ params["w"] - y
        return 0.5 * float(residual @ residual), {"w": a.T @ residual}

    report = finite_diff_check(loss_fn, {"w": rng.standard_normal(4)}, tolerance=1e-8)
    assert report.passed, report.max_rel_error
