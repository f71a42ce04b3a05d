"""Tests for losses, correlations, and ranking algebra."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsan import autodiff as ad
from tsan.autodiff import Tensor, backward, finite_difference_gradient, record
from tsan.losses import (LossWeights, age_difference_loss, fractional_rank, mae_loss,
                         mse_loss, pcc, rank_loss_exact, srcc, srcc_tie_free, total_loss)

from .gradcheck import check_gradients, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# ---------------------------------------------------------------------------
# mae / mse

def test_mae_zero_on_equal():
    y = np.array([1.0, 2.0, 3.0])
    assert mae_loss(Tensor(y), y).item() == 0.0


def test_mae_value():
    assert mae_loss(Tensor(np.array([1.0, 3.0])), np.array([0.0, 1.0])).item() == 1.5


def test_mae_gradcheck_away_from_ties(rng):
    y = rng.uniform(-1, 1, 6)
    y_hat = Tensor(y + rng.uniform(0.1, 0.5, 6) * rng.choice([-1, 1], 6), requires_grad=True)
    check_gradients(lambda: mae_loss(y_hat, y), {"y_hat": y_hat}, tol=1e-8)


def test_mse_zero_on_equal():
    y = np.array([4.0, 5.0])
    assert mse_loss(Tensor(y), y).item() == 0.0


def test_mse_value():
    assert mse_loss(Tensor(np.array([1.0, 3.0])), np.array([0.0, 1.0])).item() == 2.5


def test_mse_analytic_gradient(rng):
    y = rng.uniform(0, 1, 5)
    y_hat = Tensor(rng.uniform(0, 1, 5), requires_grad=True)
    with record():
        backward(mse_loss(y_hat, y))
    assert np.max(np.abs(y_hat.grad - 2.0 * (y_hat.data - y) / 5)) < 1e-10
    numeric = finite_difference_gradient(lambda t: mse_loss(t, y), y_hat)
    assert relative_error(y_hat.grad, numeric) < 1e-9


def test_length_mismatch():
    with pytest.raises(ValueError):
        mae_loss(Tensor(np.zeros(3)), np.zeros(4))
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros(2)), np.zeros(3))


# ---------------------------------------------------------------------------
# age difference loss

def test_age_difference_shift_invariance_exact():
    y = np.array([20.0, 35.0, 50.0, 71.0])
    y_hat = y + 3.0  # integer data keeps the fp arithmetic exact
    assert age_difference_loss(Tensor(y_hat), y).item() == 0.0


def test_age_difference_two_sample_value():
    loss = age_difference_loss(Tensor(np.array([0.0, 2.0])), np.array([0.0, 1.0]))
    assert abs(loss.item() - 1.0) < 1e-15


def test_age_difference_needs_two():
    with pytest.raises(ValueError):
        age_difference_loss(Tensor(np.array([1.0])), np.array([1.0]))


def test_age_difference_matches_brute_force(rng):
    n = 7
    y = rng.uniform(20, 90, n)
    y_hat = y + rng.normal(0, 3, n)
    # independent oracle: explicit double loop over unordered pairs
    acc = 0.0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            acc += ((y_hat[i] - y_hat[j]) - (y[i] - y[j])) ** 2
            pairs += 1
    expected = acc / pairs
    got = age_difference_loss(Tensor(y_hat), y).item()
    assert abs(got - expected) < 1e-12


def test_age_difference_gradcheck(rng):
    y = rng.uniform(-1, 1, 5)
    y_hat = Tensor(rng.uniform(-1, 1, 5), requires_grad=True)
    check_gradients(lambda: age_difference_loss(y_hat, y), {"y_hat": y_hat}, tol=1e-7)


# ---------------------------------------------------------------------------
# fractional ranks

def test_fractional_rank_simple():
    assert np.array_equal(fractional_rank([10.0, 20.0, 30.0]), [1.0, 2.0, 3.0])


def test_fractional_rank_ties():
    assert np.array_equal(fractional_rank([1.0, 2.0, 2.0, 4.0]), [1.0, 2.5, 2.5, 4.0])


def test_fractional_rank_permutation_property(rng):
    for _ in range(20):
        v = rng.uniform(-5, 5, 12)
        if len(np.unique(v)) < 12:
            continue
        r = fractional_rank(v)
        assert sorted(r) == list(range(1, 13))


# ---------------------------------------------------------------------------
# correlations

def test_srcc_identity_and_reversal():
    a = np.array([3.0, 9.0, 1.0, 4.0])
    assert abs(srcc(a, a) - 1.0) < 1e-15
    assert abs(srcc(a, -a) + 1.0) < 1e-15


def test_srcc_two_formulas_agree_tie_free(rng):
    for _ in range(1000):
        n = int(rng.integers(3, 20))
        a = rng.permutation(n) + rng.uniform(0, 0.4, n)
        b = rng.permutation(n) + rng.uniform(0, 0.4, n)
        assert abs(srcc(a, b) - srcc_tie_free(a, b)) < 1e-12


def test_srcc_zero_variance_rejected():
    with pytest.raises(ValueError):
        srcc(np.array([1.0, 1.0, 1.0]), np.array([1.0, 2.0, 3.0]))


def test_srcc_monotone_transform_invariance(rng):
    a = rng.uniform(0, 1, 15)
    b = rng.uniform(0, 1, 15)
    transformed = np.exp(2.0 * a) + 1.0  # strictly increasing map
    assert abs(srcc(a, b) - srcc(transformed, b)) < 1e-12


def test_pcc_affine():
    a = np.array([1.0, 2.0, 5.0, 7.0])
    assert abs(pcc(a, 2.0 * a + 3.0) - 1.0) < 1e-12
    assert abs(pcc(a, -a) + 1.0) < 1e-12


def test_pcc_matches_direct_formula(rng):
    a = rng.uniform(-3, 3, 40)
    b = 0.3 * a + rng.normal(0, 1, 40)
    da, db = a - a.mean(), b - b.mean()
    expected = (da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum())
    assert abs(pcc(a, b) - expected) < 1e-12


def test_pcc_zero_variance_rejected():
    with pytest.raises(ValueError):
        pcc(np.array([2.0, 2.0]), np.array([1.0, 3.0]))


# ---------------------------------------------------------------------------
# exact rank loss

def test_rank_loss_exact_identical():
    y = np.array([5.0, 1.0, 9.0])
    assert rank_loss_exact(y, y) == 0.0


def test_rank_loss_exact_swap():
    assert rank_loss_exact(np.array([2.0, 1.0]), np.array([1.0, 2.0])) == 2.0


def test_rank_loss_exact_srcc_identity(rng):
    for _ in range(1000):
        n = int(rng.integers(3, 16))
        a = rng.permutation(n).astype(float)
        b = rng.permutation(n).astype(float)
        lhs = 1.0 - 6.0 * rank_loss_exact(a, b) / (n * (n * n - 1))
        assert abs(lhs - srcc(a, b)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-100, max_value=100, allow_nan=False),
                min_size=2, max_size=12, unique=True))
def test_rank_loss_exact_nonnegative(values):
    v = np.array(values)
    assert rank_loss_exact(v, np.sort(v)) >= 0.0


# ---------------------------------------------------------------------------
# total loss (without the sorter; sorter-coupled cases live in test_sorter)

def test_total_loss_reduces_to_mse_when_weights_zero(rng):
    y = rng.uniform(20, 90, 8)
    y_hat = Tensor(y + rng.normal(0, 2, 8))
    w = LossWeights(0.0, 0.0)
    assert total_loss(y_hat, y, None, w).item() == mse_loss(y_hat, y).item()


def test_total_loss_zero_at_perfect_estimate_no_rank(rng):
    y = rng.uniform(20, 90, 6)
    w = LossWeights(10.0, 0.0)
    assert total_loss(Tensor(y.copy()), y, None, w).item() == 0.0


def test_total_loss_requires_sorter_for_rank_term():
    with pytest.raises(ValueError):
        total_loss(Tensor(np.zeros(4)), np.zeros(4), None, LossWeights(10.0, 10.0))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)
