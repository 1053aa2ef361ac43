import numpy as np
import pytest

from hemf.errors import NonFiniteError
from hemf.model import (Hyperparameters, SparseRatings, expected_logdet,
                        init_state, predict_entry, predict_pairs,
                        sample_from_model)
from hemf.special import digamma


def small_ratings():
    return SparseRatings(4, 3, [0, 0, 1, 2], [0, 1, 2, 1], [5.0, 3.0, 1.0, 4.0])


def test_hyperparameters_validation():
    with pytest.raises(ValueError):
        Hyperparameters.default(3, sigma2=0.0)
    with pytest.raises(ValueError):
        Hyperparameters.default(3, iota0=1.5)  # needs > L - 1
    with pytest.raises(ValueError):
        Hyperparameters(mu0=np.zeros(3), nu0=np.zeros(2), w0=np.eye(3), iota0=5.0)


def test_sparse_ratings_rejects_duplicates_and_bad_indices():
    with pytest.raises(ValueError):
        SparseRatings(2, 2, [0, 0], [1, 1], [1.0, 2.0])
    with pytest.raises(ValueError):
        SparseRatings(2, 2, [0, 2], [0, 1], [1.0, 2.0])


def test_adjacency_round_trip():
    r = small_ratings()
    items, vals = r.items_of(0)
    assert sorted(items.tolist()) == [0, 1]
    assert sorted(vals.tolist()) == [3.0, 5.0]
    users, vals = r.users_of(1)
    assert sorted(users.tolist()) == [0, 2]
    items, vals = r.items_of(3)  # user with no ratings
    assert len(items) == 0


def test_init_single_component_membership():
    state = init_state(small_ratings(), Hyperparameters.default(2), 1, 1, seed=0)
    np.testing.assert_array_equal(state.users.memberships,
                                  np.ones((4, 1)))
    np.testing.assert_array_equal(state.items.memberships,
                                  np.ones((3, 1)))


def test_init_determinism_bit_identical():
    hyper = Hyperparameters.default(3)
    a = init_state(small_ratings(), hyper, 2, 2, seed=99)
    b = init_state(small_ratings(), hyper, 2, 2, seed=99)
    for side in ("users", "items"):
        sa, sb = a.side(side), b.side(side)
        for field in vars(sa):
            np.testing.assert_array_equal(getattr(sa, field), getattr(sb, field))
    c = init_state(small_ratings(), hyper, 2, 2, seed=100)
    assert np.any(c.users.means != a.users.means)


def test_init_membership_normalization():
    state = init_state(small_ratings(), Hyperparameters.default(2), 3, 3, seed=1)
    np.testing.assert_allclose(state.users.memberships.sum(axis=1), 1.0,
                               atol=1e-12)
    assert state.users.memberships.shape == (4, 3)


def test_init_sticks_and_communities_at_prior():
    hyper = Hyperparameters.default(2, alpha=2.5, beta=0.5)
    state = init_state(small_ratings(), hyper, 2, 2, seed=1)
    np.testing.assert_array_equal(state.users.eta1, [1.0, 1.0])
    np.testing.assert_array_equal(state.users.eta2, [2.5, 2.5])
    np.testing.assert_array_equal(state.items.eta2, [0.5, 0.5])
    np.testing.assert_array_equal(state.users.comm_W[0], hyper.w0)
    assert state.users.comm_iota[0] == hyper.iota0


def test_cache_consistency_recomputable():
    state = init_state(small_ratings(), Hyperparameters.default(3), 2, 2, seed=4)
    side = state.users
    L = side.latent_dim
    for d in range(side.n_components):
        prec = side.comm_iota[d] * np.linalg.inv(side.comm_W[d])
        np.testing.assert_allclose(side.exp_prec[d], prec, atol=1e-9)
        i = np.arange(1, L + 1)
        ld = (np.linalg.slogdet(side.comm_W[d])[1]
              - np.sum(digamma((side.comm_iota[d] + 1 - i) / 2.0))
              - L * np.log(2.0))
        assert side.exp_logdet[d] == pytest.approx(ld, abs=1e-9)


def test_expected_logdet_monte_carlo():
    import scipy.stats
    rng = np.random.default_rng(0)
    W = np.array([[2.0, 0.3], [0.3, 1.0]])
    iota = 7.0
    draws = scipy.stats.invwishart.rvs(df=iota, scale=W, size=40_000,
                                       random_state=rng)
    mc = np.mean([np.linalg.slogdet(s)[1] for s in draws])
    assert expected_logdet(W[None], np.array([iota]))[0] == pytest.approx(
        mc, abs=0.02)


def test_predict_entry_cases():
    state = init_state(small_ratings(), Hyperparameters.default(2), 1, 1, seed=0)
    state.users.means[0] = 0.0
    assert predict_entry(state, 0, 1) == 0.0
    state.users.means[1] = [1.0, 2.0]
    state.items.means[2] = [3.0, 0.5]
    assert predict_entry(state, 1, 2) == pytest.approx(4.0, abs=1e-15)
    state.users.means[2] = [2.0, 1.0]
    state.items.means[0] = [3.0, 1.2]
    raw = predict_entry(state, 2, 0)
    assert raw == pytest.approx(7.2, abs=1e-12)
    assert predict_entry(state, 2, 0, clamp=(1.0, 5.0)) == 5.0
    with pytest.raises(IndexError):
        predict_entry(state, 99, 0)


def test_predict_is_bilinear():
    state = init_state(small_ratings(), Hyperparameters.default(3), 2, 2, seed=8)
    base = predict_entry(state, 1, 1)
    state.users.means[1] *= 3.0
    assert predict_entry(state, 1, 1) == pytest.approx(3.0 * base, rel=1e-12)


def test_predict_pairs_matches_entry():
    state = init_state(small_ratings(), Hyperparameters.default(3), 2, 2, seed=8)
    r = small_ratings()
    vec = predict_pairs(state, r.users, r.items)
    for k in range(len(r)):
        assert vec[k] == pytest.approx(
            predict_entry(state, r.users[k], r.items[k]), abs=1e-14)


def test_sampler_full_density_and_determinism():
    hyper = Hyperparameters.default(3)
    ratings, truth = sample_from_model(hyper, 2, 2, 8, 6, 1.0, seed=5)
    assert len(ratings) == 48
    again, truth2 = sample_from_model(hyper, 2, 2, 8, 6, 1.0, seed=5)
    np.testing.assert_array_equal(ratings.values, again.values)
    np.testing.assert_array_equal(truth.user_labels, truth2.user_labels)


def test_sampler_noiseless_limit():
    hyper = Hyperparameters.default(3, sigma2=1e-12)
    ratings, truth = sample_from_model(hyper, 2, 2, 10, 8, 1.0, seed=9)
    clean = np.einsum("el,el->e", truth.user_factors[ratings.users],
                      truth.item_factors[ratings.items])
    assert np.max(np.abs(ratings.values - clean)) < 1e-5


def test_sampler_community_sizes_track_stick_weights():
    hyper = Hyperparameters.default(2, alpha=1.0)
    n = 300
    violations = 0
    checks = 0
    for seed in range(100):
        _, truth = sample_from_model(hyper, 3, 1, n, 2, 0.05, seed=seed)
        counts = np.bincount(truth.user_labels, minlength=3)
        for d in range(3):
            p = truth.user_weights[d]
            sd = np.sqrt(n * p * (1.0 - p))
            checks += 1
            if abs(counts[d] - n * p) > 3.0 * max(sd, 1e-9):
                violations += 1
    # 3-sigma outliers should be rare across 300 checks
    assert checks == 300
    assert violations <= 4


def test_sampler_density_validation():
    with pytest.raises(ValueError):
        sample_from_model(Hyperparameters.default(2), 1, 1, 4, 4, 0.0, seed=0)
