import numpy as np
import pytest

from lanoboed.laplace import (
    LaplacePosterior,
    MapConvergenceError,
    compute_map,
    information_gain,
    pointwise_variance,
    posterior_sample,
    prior_variance,
    randomized_gevp,
)
from lanoboed.verify import check_eig_monotone, check_linear_gaussian

NOISE = 0.05


@pytest.fixture(scope="module")
def lin_data(linear8):
    fwd, prior, lg = linear8
    rng = np.random.default_rng(5)
    y = lg.forward(prior.sample(rng)) + NOISE * rng.standard_normal(lg.offset.shape)
    return fwd, prior, lg, y


def test_empty_design_map_is_prior_mean(lin_data):
    fwd, prior, _, y = lin_data
    res = compute_map(fwd, prior, y, np.zeros(4, int), 1 / NOISE**2)
    assert np.allclose(res.m, prior.m_prior)
    lam, _ = randomized_gevp(res.lin, prior, np.zeros(4, int), 10, 5, 1 / NOISE**2, seed=0)
    assert np.all(lam == 0)


def test_map_matches_closed_form(lin_data):
    fwd, prior, lg, y = lin_data
    xi = np.array([1, 1, 0, 1])
    mean, _ = lg.posterior(xi, y)
    res = compute_map(fwd, prior, y, xi, 1 / NOISE**2)
    assert res.converged
    assert np.linalg.norm(res.m - mean) / np.linalg.norm(mean) < 1e-6


def test_linear_gaussian_oracle_check():
    r = check_linear_gaussian()
    assert r.passed, r.line()


def test_map_independent_of_initial_guess(grid8):
    _, _, prior, fwd = grid8
    rng = np.random.default_rng(3)
    y = fwd.pto(prior.sample(rng)) + 0.02 * rng.standard_normal((fwd.K, fwd.d_y))
    xi = np.array([1, 0, 1, 1])
    a = compute_map(fwd, prior, y, xi, 2500.0, rtol=1e-8)
    b = compute_map(fwd, prior, y, xi, 2500.0, m0=prior.sample(rng), rtol=1e-8)
    assert prior.mass_norm(a.m - b.m) / prior.mass_norm(a.m) < 1e-6


def test_map_convergence_error(grid8):
    _, _, prior, fwd = grid8
    y = fwd.pto(prior.sample(np.random.default_rng(0)))
    with pytest.raises(MapConvergenceError) as info:
        compute_map(fwd, prior, y, np.ones(4, int), 2500.0, max_iter=0)
    assert info.value.grad_norm > 0
    res = compute_map(fwd, prior, y, np.ones(4, int), 2500.0, max_iter=0, raise_on_fail=False)
    assert not res.converged


def test_eigenvalues_seed_invariant_for_exact_low_rank(lin_data):
    fwd, prior, lg, y = lin_data
    xi = np.array([1, 0, 1, 1])
    res = compute_map(fwd, prior, y, xi, 1 / NOISE**2)
    a, _ = randomized_gevp(res.lin, prior, xi, 12, 10, 1 / NOISE**2, seed=1)
    b, _ = randomized_gevp(res.lin, prior, xi, 12, 10, 1 / NOISE**2, seed=99)
    assert np.allclose(a, b, rtol=1e-8, atol=1e-10 * a[0])
    assert np.all(np.diff(a) <= 1e-12 * a[0])


def test_eigenvectors_prior_precision_orthonormal(lin_data):
    fwd, prior, _, y = lin_data
    xi = np.ones(4, int)
    res = compute_map(fwd, prior, y, xi, 1 / NOISE**2)
    _, W = randomized_gevp(res.lin, prior, xi, 8, 10, 1 / NOISE**2, seed=0)
    G = W.T @ np.column_stack([prior.apply_precision(W[:, j]) for j in range(W.shape[1])])
    assert np.allclose(G, np.eye(8), atol=1e-8)


def test_rank_plus_oversampling_too_large(lin_data):
    fwd, prior, _, y = lin_data
    res = compute_map(fwd, prior, y, np.ones(4, int), 1 / NOISE**2)
    with pytest.raises(ValueError):
        randomized_gevp(res.lin, prior, np.ones(4, int), 60, 10, 1 / NOISE**2)


def test_shrinkage_factors():
    post = LaplacePosterior(np.zeros(2), np.array([3.0, 0.0]), np.eye(2), np.ones(1, int))
    assert np.allclose(post.d(), [0.75, 0.0])
    assert np.allclose(post.s(), [0.5, 0.0])


def test_posterior_samples_match_closed_form_covariance(lin_data):
    fwd, prior, lg, y = lin_data
    xi = np.array([1, 0, 1, 1])
    res = compute_map(fwd, prior, y, xi, 1 / NOISE**2)
    lam, W = randomized_gevp(res.lin, prior, xi, 20, 10, 1 / NOISE**2, seed=0)
    post = LaplacePosterior(res.m, lam, W, xi)
    mean, cov = lg.posterior(xi, y)
    rng = np.random.default_rng(42)
    n = 10_000
    S = np.array([posterior_sample(post, prior, rng) for _ in range(n)])
    dirs = np.random.default_rng(0).standard_normal((5, fwd.dim))
    for v in dirs:
        proj = S @ v
        var = float(v @ cov @ v)
        assert abs(proj.mean() - v @ mean) <= 5 * np.sqrt(var / n)
        assert abs(proj.var(ddof=1) - var) <= 5 * var * np.sqrt(2 / n)


def test_posterior_variance_below_prior(lin_data):
    fwd, prior, _, y = lin_data
    xi = np.ones(4, int)
    res = compute_map(fwd, prior, y, xi, 1 / NOISE**2)
    lam, W = randomized_gevp(res.lin, prior, xi, 20, 10, 1 / NOISE**2, seed=0)
    pv = prior_variance(prior)
    post_v = pointwise_variance(LaplacePosterior(res.m, lam, W, xi), prior, pv)
    assert np.all(post_v <= pv + 1e-14)
    assert np.all(post_v > 0)
    assert np.array_equal(pointwise_variance(None, prior, pv), pv)


def test_information_gain_zero_without_data(lin_data):
    _, prior, _, _ = lin_data
    post = LaplacePosterior(prior.m_prior.copy(), np.zeros(5), np.zeros((prior.dim, 5)), np.zeros(4, int))
    assert information_gain(post, prior) == 0.0


def test_information_gain_vs_exact_kl(lin_data):
    fwd, prior, lg, y = lin_data
    for xi in (np.array([1, 0, 0, 0]), np.array([0, 1, 1, 0]), np.ones(4, int)):
        res = compute_map(fwd, prior, y, xi, 1 / NOISE**2)
        lam, W = randomized_gevp(res.lin, prior, xi, 20, 10, 1 / NOISE**2, seed=0)
        ig = information_gain(LaplacePosterior(res.m, lam, W, xi), prior)
        kl = lg.posterior_kl(xi, y)[2]
        assert abs(ig - kl) / kl < 1e-5


def test_expected_information_gain_monotone():
    r = check_eig_monotone()
    assert r.passed, r.line()
