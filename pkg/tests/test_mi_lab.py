import numpy as np
import pytest
from numpy.testing import assert_allclose

from ctc_lab.core.errors import ContractError, DataError, DegenerateError, MineDivergenceError, RangeError
from ctc_lab.models.config import MineConfig
from ctc_lab.models.records import MiEstimate
from ctc_lab.services import mi_lab
from ctc_lab.services.contrastive import info_nce
from ctc_lab.services.mi_lab import (
    DiscreteJoint,
    discrete_entropy,
    discrete_mi_exact,
    gaussian_entropy,
    gaussian_mi,
    gaussian_pair,
    infonce_entropy_bound,
    max_mi_linear_direction,
    mine_estimate,
    one_hot,
    top_direction,
)

QUICK_MINE = MineConfig(hidden_dim=16, layer_count=3, batch_size=64, train_steps=60)


# exact oracles

def test_discrete_mi_independent():
    joint = DiscreteJoint(np.outer([0.3, 0.7], [0.5, 0.25, 0.25]))
    assert discrete_mi_exact(joint) == pytest.approx(0.0, abs=1e-12)


def test_discrete_mi_copy():
    joint = DiscreteJoint(np.array([[0.5, 0.0], [0.0, 0.5]]))
    assert discrete_mi_exact(joint) == pytest.approx(np.log(2))


def test_discrete_mi_noisy_copy():
    joint = DiscreteJoint(np.array([[0.4, 0.1], [0.1, 0.4]]))
    assert discrete_mi_exact(joint) == pytest.approx(0.1927, abs=1e-4)


def test_discrete_joint_must_normalize():
    with pytest.raises(ContractError):
        DiscreteJoint(np.array([[0.5, 0.4]]))
    with pytest.raises(ContractError):
        DiscreteJoint(np.array([[1.5, -0.5]]))


def test_discrete_joint_sampling_matches_table():
    joint = DiscreteJoint(np.array([[0.1, 0.2], [0.3, 0.4]]))
    x, y = joint.sample(20000, seed=1)
    counts = np.zeros((2, 2))
    np.add.at(counts, (x, y), 1)
    assert_allclose(counts / 20000, joint.table, atol=0.02)
    a, b = joint.sample_one_hot(5, seed=1)
    assert a.shape == (5, 2) and b.shape == (5, 2)
    assert_allclose(a.sum(axis=1), 1.0)


def test_random_joint_is_reproducible():
    assert_allclose(DiscreteJoint.random(3, 4, seed=7).table, DiscreteJoint.random(3, 4, seed=7).table)


def test_discrete_entropy():
    assert discrete_entropy([0.5, 0.5]) == pytest.approx(np.log(2))
    assert discrete_entropy([1.0, 0.0]) == 0.0


def test_gaussian_entropy():
    assert gaussian_entropy(np.array([[1.0]])) == pytest.approx(1.4189, abs=1e-4)
    assert gaussian_entropy(np.eye(2)) == pytest.approx(2.8379, abs=1e-4)


def test_gaussian_entropy_contract():
    with pytest.raises(ContractError):
        gaussian_entropy(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        gaussian_entropy(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_gaussian_mi():
    assert gaussian_mi(0.0) == 0.0
    assert gaussian_mi(0.9) == pytest.approx(-0.5 * np.log(1 - 0.81))
    with pytest.raises(RangeError):
        gaussian_mi(1.0)


def test_gaussian_pair_correlation():
    x, y = gaussian_pair(50000, 0.6, seed=3)
    assert np.corrcoef(x[:, 0], y[:, 0])[0, 1] == pytest.approx(0.6, abs=0.02)


def test_one_hot_range():
    assert_allclose(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(RangeError):
        one_hot([3], 3)


# max-variance direction

def test_top_direction_matches_eigendecomposition():
    rng = np.random.default_rng(0)
    mixing = rng.standard_normal((4, 4))
    cov = mixing @ mixing.T
    result = top_direction(cov, seed=1)
    values, vectors = np.linalg.eigh(cov)
    assert result.variance == pytest.approx(values[-1], rel=1e-8)
    assert abs(result.direction @ vectors[:, -1]) == pytest.approx(1.0, abs=1e-6)
    assert not result.tie


def test_top_direction_reports_tie():
    result = top_direction(np.diag([2.0, 2.0, 1.0]), seed=0)
    assert result.tie
    assert result.variance == pytest.approx(2.0)


def test_top_direction_degenerate():
    with pytest.raises(DegenerateError):
        top_direction(np.zeros((3, 3)))


def test_max_mi_linear_direction_follows_the_long_axis():
    rng = np.random.default_rng(5)
    data = rng.standard_normal((4000, 2)) * np.array([3.0, 1.0])
    result = max_mi_linear_direction(data, seed=0)
    assert abs(result.direction[0]) == pytest.approx(1.0, abs=1e-2)
    assert result.variance == pytest.approx(9.0, rel=0.1)


def test_max_mi_linear_direction_needs_two_samples():
    with pytest.raises(DataError):
        max_mi_linear_direction(np.ones((1, 3)))


# InfoNCE entropy bound

def test_infonce_entropy_bound():
    assert infonce_entropy_bound(0.0, 8) == pytest.approx(np.log(8))
    assert infonce_entropy_bound(np.log(8), 8) == pytest.approx(0.0)
    with pytest.raises(RangeError):
        infonce_entropy_bound(-0.1, 8)
    with pytest.raises(RangeError):
        infonce_entropy_bound(0.1, 0)


@pytest.mark.parametrize("tau", [1.0, 0.1, 0.01])
def test_infonce_bound_never_exceeds_empirical_entropy(tau):
    joint = DiscreteJoint.random(4, 1, seed=11)
    x, _ = joint.sample(256, seed=2)
    views = one_hot(x, 4)
    loss, _ = info_nce(views, views, np.arange(256), tau=tau)
    frequencies = np.bincount(x, minlength=4) / 256
    bound = infonce_entropy_bound(loss, 256)
    assert bound <= discrete_entropy(frequencies) + 1e-9
    if tau == 0.01:
        assert bound == pytest.approx(discrete_entropy(frequencies), abs=1e-9)


# MINE

def test_mine_needs_two_batches():
    a = np.zeros((100, 1))
    with pytest.raises(DataError):
        mine_estimate(a, a, MineConfig(batch_size=64))


def test_mine_is_deterministic():
    x, y = gaussian_pair(400, 0.8, seed=0)
    first = mine_estimate(x, y, QUICK_MINE, seed=4)
    second = mine_estimate(x, y, QUICK_MINE, seed=4)
    assert first.value == second.value
    assert first.stderr >= 0
    assert first.steps_used == QUICK_MINE.train_steps


def test_mine_restarts_after_divergence(monkeypatch):
    seeds = []
    real_run = mi_lab._run_mine

    def flaky(a, b, config, seed):
        seeds.append(seed)
        if len(seeds) == 1:
            raise MineDivergenceError("diverged")
        return real_run(a, b, config, seed)

    monkeypatch.setattr(mi_lab, "_run_mine", flaky)
    x, y = gaussian_pair(400, 0.5, seed=0)
    estimate = mine_estimate(x, y, QUICK_MINE, seed=9)
    assert isinstance(estimate, MiEstimate)
    assert len(seeds) == 2
    assert seeds[0] == 9 and seeds[1] != 9


def test_mine_gives_up_after_retry_budget(monkeypatch):
    calls = []

    def always(a, b, config, seed):
        calls.append(seed)
        raise MineDivergenceError("diverged")

    monkeypatch.setattr(mi_lab, "_run_mine", always)
    monkeypatch.setattr(mi_lab.get_settings(), "mine_retry_count", 2)
    x, y = gaussian_pair(400, 0.5, seed=0)
    with pytest.raises(MineDivergenceError):
        mine_estimate(x, y, QUICK_MINE, seed=0)
    assert len(calls) == 2


def test_estimate_ity_subsamples(monkeypatch):
    seen = {}

    def record(a, b, config, seed):
        seen["shape"] = (a.shape, b.shape)
        return MiEstimate(value=0.0)

    monkeypatch.setattr(mi_lab, "_run_mine", record)
    reps = np.random.default_rng(0).standard_normal((500, 3))
    labels = np.arange(500) % 4
    mi_lab.estimate_ity(reps, labels, 4, QUICK_MINE, seed=1, max_samples=200)
    assert seen["shape"] == ((200, 3), (200, 4))


@pytest.mark.slow
def test_mine_recovers_gaussian_mi():
    x, y = gaussian_pair(4000, 0.9, seed=0)
    config = MineConfig(hidden_dim=64, batch_size=256, learning_rate=1e-3, train_steps=3000)
    estimate = mine_estimate(x, y, config, seed=0)
    assert estimate.value == pytest.approx(gaussian_mi(0.9), abs=0.15)


@pytest.mark.slow
def test_mine_near_zero_for_independent_samples():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((4000, 1)), rng.standard_normal((4000, 1))
    config = MineConfig(hidden_dim=64, batch_size=256, train_steps=1500)
    assert abs(mine_estimate(x, y, config, seed=0).value) < 0.1
