import numpy as np
import pytest
import scipy.linalg as sla

from lanoboed.adjoints import LinearizationPoint
from lanoboed.reduction import (
    ReducedBases,
    TrainingSet,
    build_bases,
    compute_dis,
    compute_pca,
    generate_training_set,
    reduced_jacobian,
)
from lanoboed.verify import linear_problem


@pytest.fixture(scope="module")
def bases8(grid8):
    _, _, prior, fwd = grid8
    return build_bases(fwd, prior, r_m=6, r_f=5, n_dis=4, n_pca=12, seed=3, p=6)


def test_dis_single_time_linear_matches_dense_gevp():
    fwd, prior, lg = linear_problem(obs_indices=(10,))
    psi, lam = compute_dis(fwd, prior, 3, r=3, p=10, seed=0)
    H = lg.J[0].T @ lg.J[0]
    ev, W = sla.eigh(H, prior.dense_precision())
    order = np.argsort(ev)[::-1][:3]
    assert np.allclose(lam, ev[order], rtol=1e-8)
    assert np.max(sla.subspace_angles(psi, W[:, order])) < 1e-6


def test_dis_basis_prior_orthonormal_and_sorted(grid8):
    _, _, prior, fwd = grid8
    psi, lam = compute_dis(fwd, prior, 3, r=6, p=6, seed=1)
    G = psi.T @ np.column_stack([prior.apply_precision(c) for c in psi.T])
    assert np.allclose(G, np.eye(6), atol=1e-9)
    assert np.all(lam >= 0) and np.all(np.diff(lam) <= 0)


def test_dis_needs_samples(grid8):
    _, _, prior, fwd = grid8
    with pytest.raises(ValueError):
        compute_dis(fwd, prior, 0, r=2)


def test_pca_exact_at_snapshot_rank(rng):
    base = rng.standard_normal((3, 40))
    X = rng.standard_normal((25, 3)) @ base + rng.standard_normal(40)
    psi, mean, _ = compute_pca(X, 3)
    rec = mean + (X - mean) @ psi @ psi.T
    assert np.linalg.norm(rec - X) / np.linalg.norm(X) < 1e-10


def test_pca_eckart_young(rng):
    X = rng.standard_normal((30, 20))
    psi, mean, s = compute_pca(X, 6)
    resid = (X - mean) - (X - mean) @ psi @ psi.T
    assert np.sum(resid**2) == pytest.approx(np.sum(s[6:] ** 2), rel=1e-8)
    assert np.allclose(psi.T @ psi, np.eye(6), atol=1e-12)


def test_pca_needs_enough_snapshots(rng):
    with pytest.raises(ValueError):
        compute_pca(rng.standard_normal((3, 10)), 4)


def test_pca_warns_on_degenerate_snapshots():
    with pytest.warns(RuntimeWarning):
        compute_pca(np.tile(np.arange(5.0), (6, 1)), 2)


def test_encode_prior_mean_is_zero(bases8, grid8):
    prior = grid8[2]
    assert np.allclose(bases8.encode_m(prior.m_prior, prior), 0)


def test_encode_decode_idempotent(bases8, grid8, rng):
    prior = grid8[2]
    beta = rng.standard_normal(bases8.r_m)
    assert np.allclose(bases8.encode_m(bases8.decode_m(beta, prior), prior), beta, atol=1e-10)
    m = prior.sample(rng)
    once = bases8.decode_m(bases8.encode_m(m, prior), prior)
    twice = bases8.decode_m(bases8.encode_m(once, prior), prior)
    assert np.allclose(once, twice, atol=1e-10)
    bf = rng.standard_normal(bases8.r_f)
    assert np.allclose(bases8.encode_f(bases8.decode_f(bf)), bf, atol=1e-12)


def test_full_rank_basis_roundtrip(prior16, rng):
    prior = prior16
    psi = prior.unwhiten(np.eye(prior.dim))
    b = ReducedBases(psi, np.ones(prior.dim), np.eye(3), np.ones(3), np.zeros(3))
    m = prior.sample(rng)
    assert np.allclose(b.decode_m(b.encode_m(m, prior), prior), m, rtol=1e-9, atol=1e-9)


def test_encode_rejects_wrong_shapes(bases8, grid8):
    prior = grid8[2]
    with pytest.raises(ValueError):
        bases8.encode_m(np.zeros(3), prior)
    with pytest.raises(ValueError):
        bases8.decode_m(np.zeros(bases8.r_m + 1), prior)
    with pytest.raises(ValueError):
        bases8.decode_f(np.zeros(bases8.r_f + 1))


@pytest.mark.parametrize("r_m,r_f", [(4, 6), (6, 3)])
def test_reduced_jacobian_matches_dense(grid8, rng, r_m, r_f):
    _, _, prior, fwd = grid8
    b = build_bases(fwd, prior, r_m=r_m, r_f=r_f, n_dis=2, n_pca=10, seed=0, p=4)
    lin = LinearizationPoint(fwd, prior.sample(rng))
    J = lin.tangent(np.eye(fwd.dim))
    dense = np.einsum("yf,kyn,nm->kfm", b.psi_f, J, b.psi_m)
    assert np.allclose(reduced_jacobian(lin, b), dense, rtol=1e-9, atol=1e-10 * np.abs(dense).max())


def test_bases_bit_identical_for_same_seed(grid8):
    _, _, prior, fwd = grid8
    a = build_bases(fwd, prior, 4, 4, 3, 8, seed=11, p=4)
    b = build_bases(fwd, prior, 4, 4, 3, 8, seed=11, p=4, threads=3)
    for name in ("psi_m", "dis_eigenvalues", "psi_f", "singular_values", "f_mean"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_training_set_layout_and_persistence(grid8, bases8, tmp_path):
    _, _, prior, fwd = grid8
    ts = generate_training_set(fwd, prior, bases8, 5, seed=2)
    assert ts.beta_m.shape == (5, bases8.r_m)
    assert ts.beta_f.shape == (5, fwd.K + 1, bases8.r_f)
    assert ts.beta_j.shape == (5, fwd.K, bases8.r_f, bases8.r_m)
    assert np.allclose(ts.beta_f[:, 1:], bases8.encode_f(ts.observables))
    assert np.all(ts.beta_f[:, 0] == ts.beta_f[0, 0])
    ts.save(tmp_path / "d")
    back = TrainingSet.load(tmp_path / "d")
    for name in ("beta_m", "beta_f", "beta_j", "m", "observables"):
        assert np.array_equal(getattr(back, name), getattr(ts, name))
    again = generate_training_set(fwd, prior, bases8, 5, seed=2, threads=2)
    assert np.array_equal(again.beta_j, ts.beta_j)
    assert len(ts.subset([0, 2])) == 2


def test_bases_persistence(bases8, tmp_path):
    bases8.save(tmp_path / "b")
    back = ReducedBases.load(tmp_path / "b")
    assert np.array_equal(back.psi_m, bases8.psi_m) and np.array_equal(back.f_mean, bases8.f_mean)


def _heldout_reconstruction(n, r_f, n_pca, n_test=20):
    from lanoboed.config import RunConfig
    from lanoboed.metrics import pto_errors
    from lanoboed.pipeline import Problem

    p = Problem(RunConfig(nx=n, ny=n))
    rng = np.random.default_rng(0)
    snaps = np.concatenate([p.forward.pto(p.prior.sample(rng)) for _ in range(n_pca)])
    psi, mean, _ = compute_pca(snaps, r_f)
    F = np.array([p.forward.pto(p.prior.sample(rng)) for _ in range(n_test)])
    return float(pto_errors(F, mean + (F - mean) @ psi @ psi.T, p.forward.M).mean())


def test_reconstruction_budget_with_wide_output_basis():
    assert _heldout_reconstruction(16, r_f=128, n_pca=256) <= 0.02


def test_reconstruction_budget_at_desk_defaults():
    err = _heldout_reconstruction(32, r_f=16, n_pca=64)
    assert err <= 0.02, f"held-out reconstruction error {100 * err:.2f}% exceeds the 2% budget"
