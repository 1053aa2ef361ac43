import numpy as np
import pytest
import scipy.special
from hypothesis import given, settings
from hypothesis import strategies as st

from hemf.errors import NotPositiveDefiniteError
from hemf.special import (digamma, multivariate_digamma, pd_inverse_logdet,
                          pd_logdet_stack)

# high-precision reference values
EULER_MASCHERONI = 0.5772156649015329


def test_digamma_at_one():
    assert abs(digamma(1.0) - (-EULER_MASCHERONI)) < 1e-12


def test_digamma_at_half():
    # psi(1/2) = -gamma - 2 ln 2
    expected = -EULER_MASCHERONI - 2.0 * np.log(2.0)
    assert abs(digamma(0.5) - expected) < 1e-12
    assert abs(digamma(0.5) - (-1.9635100260214235)) < 1e-12


@pytest.mark.parametrize("x", [0.5, 1.0, 7.3])
def test_digamma_recurrence_points(x):
    assert abs(digamma(x + 1.0) - digamma(x) - 1.0 / x) < 1e-12


def test_digamma_recurrence_random_sweep():
    rng = np.random.Generator(np.random.Philox(123))
    x = rng.uniform(1e-3, 1e3, size=10_000)
    gap = digamma(x + 1.0) - digamma(x) - 1.0 / x
    assert np.max(np.abs(gap)) < 1e-11


def test_digamma_matches_scipy_down_to_tiny_arguments():
    rng = np.random.Generator(np.random.Philox(7))
    x = np.concatenate([rng.uniform(1e-6, 1.0, 2000),
                        rng.uniform(1.0, 50.0, 2000),
                        rng.uniform(50.0, 1e4, 2000)])
    assert np.max(np.abs(digamma(x) - scipy.special.digamma(x))) < 1e-12


def test_digamma_domain_error():
    with pytest.raises(ValueError):
        digamma(0.0)
    with pytest.raises(ValueError):
        digamma(-3.2)
    with pytest.raises(ValueError):
        digamma(np.array([1.0, -1.0]))


@given(st.floats(min_value=1e-3, max_value=1e3))
@settings(max_examples=200, deadline=None)
def test_digamma_recurrence_property(x):
    assert digamma(x + 1.0) == pytest.approx(digamma(x) + 1.0 / x, abs=1e-11)


def test_multivariate_digamma_reduces_to_digamma():
    for x in (0.7, 3.0, 41.5):
        assert multivariate_digamma(x, 1) == digamma(x)


def test_multivariate_digamma_values():
    assert multivariate_digamma(3.0, 2) == pytest.approx(
        digamma(3.0) + digamma(2.5), abs=1e-14)
    assert multivariate_digamma(2.0, 3) == pytest.approx(
        digamma(2.0) + digamma(1.5) + digamma(1.0), abs=1e-14)


def test_multivariate_digamma_domain():
    with pytest.raises(ValueError):
        multivariate_digamma(1.0, 3)  # needs x > 1
    with pytest.raises(ValueError):
        multivariate_digamma(2.0, 0)


def test_pd_inverse_logdet_identity():
    for L in (1, 2, 5):
        inv, logdet = pd_inverse_logdet(np.eye(L))
        np.testing.assert_allclose(inv, np.eye(L), atol=1e-14)
        assert logdet == pytest.approx(0.0, abs=1e-14)


def test_pd_inverse_logdet_diagonal():
    inv, logdet = pd_inverse_logdet(np.diag([2.0, 8.0]))
    np.testing.assert_allclose(inv, np.diag([0.5, 0.125]), atol=1e-14)
    assert logdet == pytest.approx(np.log(16.0), abs=1e-12)


def test_pd_inverse_reconstruction():
    rng = np.random.Generator(np.random.Philox(3))
    a = rng.normal(size=(4, 4))
    m = a.T @ a + np.eye(4)
    inv, logdet = pd_inverse_logdet(m)
    np.testing.assert_allclose(m @ inv, np.eye(4), atol=1e-9)
    np.testing.assert_allclose(inv, inv.T, atol=0)


def test_pd_logdet_matches_eigenvalues_up_to_dim_20():
    rng = np.random.Generator(np.random.Philox(11))
    for dim in range(1, 21):
        a = rng.normal(size=(dim, dim))
        m = a @ a.T + dim * np.eye(dim)
        _, logdet = pd_inverse_logdet(m)
        expected = float(np.sum(np.log(np.linalg.eigvalsh(m))))
        assert logdet == pytest.approx(expected, abs=1e-8)


def test_pd_failure_is_typed():
    with pytest.raises(NotPositiveDefiniteError):
        pd_inverse_logdet(np.array([[1.0, 2.0], [2.0, 1.0]]))  # indefinite
    with pytest.raises(ValueError):
        pd_inverse_logdet(np.array([[1.0, 0.5], [0.0, 1.0]]))  # asymmetric


def test_pd_logdet_stack_agrees_with_single():
    rng = np.random.Generator(np.random.Philox(5))
    mats = []
    for _ in range(6):
        a = rng.normal(size=(3, 3))
        mats.append(a @ a.T + np.eye(3))
    stack = np.stack(mats)
    lds = pd_logdet_stack(stack)
    for m, ld in zip(mats, lds):
        assert pd_inverse_logdet(m)[1] == pytest.approx(ld, abs=1e-12)
