import numpy as np
import pytest

from lanoboed import io
from lanoboed.geometry import (
    GRAY,
    MATERIAL_DEFAULTS,
    WHITE,
    GaussianPrior,
    assemble_operators,
    build_geometry,
    matern_delta,
    matern_gamma,
    prior_norms,
    prior_sample,
)


def test_matern_coefficients_from_gray_matter_values():
    sigma, rho = np.sqrt(0.0682), 6.0
    # the reference values are rounded; the exact formula gives 2.29144 and 0.50921
    assert matern_gamma(sigma, rho) == pytest.approx(2.2911, abs=5e-4)
    assert matern_delta(sigma, rho) == pytest.approx(0.5091, abs=5e-4)
    assert matern_gamma(sigma, rho) == pytest.approx(rho / (4 * np.sqrt(2 * np.pi) * sigma), rel=1e-15)


def test_coefficients_hold_nodewise():
    _, mat = build_geometry(12, 9, overrides={"rho_wm": 3.0, "log_g_var_wm": 0.2})
    assert np.allclose(mat.gamma, mat.rho / (4 * np.sqrt(2 * np.pi) * mat.sigma))
    assert np.allclose(mat.delta, np.sqrt(2) / (mat.sigma * mat.rho * np.sqrt(np.pi)))


def test_half_split_labels():
    _, mat = build_geometry(4, 4, region_spec="half-split")
    assert np.sum(mat.labels == GRAY) == 8
    assert np.sum(mat.labels == WHITE) == 8


def test_diffusion_from_log_values():
    _, mat = build_geometry(16, 16)
    assert np.allclose(mat.diffusion[mat.labels == GRAY], np.exp(-0.9937))
    assert np.allclose(mat.diffusion[mat.labels == WHITE], np.exp(-0.3006))
    assert np.any(mat.labels == WHITE) and np.any(mat.labels == GRAY)


def test_bad_inputs():
    with pytest.raises(ValueError):
        build_geometry(2, 8)
    with pytest.raises(ValueError):
        build_geometry(8, 8, domain_size_mm=-1.0)
    with pytest.raises(KeyError):
        build_geometry(8, 8, overrides={"nope": 1.0})


def test_mask_file(tmp_path):
    img = np.zeros((6, 5))
    img[:, 3:] = 255
    io.write_pgm(tmp_path / "m.pgm", img)
    _, mat = build_geometry(5, 6, region_spec=("mask-file", tmp_path / "m.pgm"))
    assert mat.labels.reshape(6, 5)[:, 3:].min() == WHITE
    assert mat.labels.reshape(6, 5)[:, :3].max() == GRAY
    with pytest.raises(ValueError, match="mask"):
        build_geometry(6, 6, region_spec=("mask-file", tmp_path / "m.pgm"))


def test_row_major_node_order():
    mesh, _ = build_geometry(5, 3, domain_size_mm=(4.0, 2.0))
    xy = mesh.coordinates()
    j, i = 2, 3
    assert np.allclose(xy[j * 5 + i], [i * 1.0, j * 1.0])


def test_mass_sums_to_area_and_operators_symmetric(prior16):
    mesh = prior16.mesh
    assert prior16.M.sum() == pytest.approx(mesh.area, rel=1e-12)
    assert abs(prior16.M - prior16.M.T).max() < 1e-14
    assert abs(prior16.A - prior16.A.T).max() < 1e-12


def test_gamma_part_annihilates_constants():
    mesh, mat = build_geometry(10, 10)
    prior = assemble_operators(mesh, mat)
    one = np.ones(prior.dim)
    from lanoboed.geometry import assemble_weighted

    delta_mass = assemble_weighted(mesh, mass_coef=mat.delta)
    assert np.allclose(prior.A @ one, delta_mass @ one, atol=1e-12)


def test_dense_covariance_spd(prior16):
    C = prior16.dense_covariance()
    assert np.allclose(C, C.T, atol=1e-14 * np.abs(C).max())
    assert np.linalg.eigvalsh(C).min() > 0


def test_sampling_deterministic(prior16):
    a = prior_sample(prior16, 7)
    b = prior_sample(prior16, 7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, prior_sample(prior16, 8))


def test_sample_moments_match_dense_covariance(prior16):
    n = 10_000
    X = prior16.sample(np.random.default_rng(0), n)
    var = np.diag(prior16.dense_covariance())
    emp_var = X.var(axis=1, ddof=1)
    # standard error of a Gaussian sample variance is var * sqrt(2 / (n - 1))
    z = np.abs(emp_var - var) / (var * np.sqrt(2 / (n - 1)))
    assert z.max() < 5
    zm = np.abs(X.mean(axis=1) - prior16.m_prior) / np.sqrt(var / n)
    assert zm.max() < 5


def test_norms(prior16, rng):
    z = prior_norms(prior16, np.zeros(prior16.dim))
    assert z.precision_sq == 0 and z.mass_norm == 0 and not z.whitened.any()
    v = rng.standard_normal(prior16.dim)
    assert np.linalg.norm(prior16.unwhiten(prior16.whiten(v)) - v) <= 1e-10 * np.linalg.norm(v)
    ref = v @ np.linalg.solve(prior16.dense_covariance(), v)
    pn = prior_norms(prior16, v)
    assert pn.precision_sq == pytest.approx(ref, rel=1e-8)
    assert pn.whitened @ pn.whitened == pytest.approx(pn.precision_sq, rel=1e-12)


def test_unwhitened_normals_reproduce_covariance():
    mesh, mat = build_geometry(6, 6)
    prior = GaussianPrior(mesh, mat)
    C = prior.dense_covariance()
    n = 20_000
    X = prior.unwhiten(np.random.default_rng(3).standard_normal((prior.dim, n)))
    # chi-square style check on the whitened empirical covariance
    L = np.linalg.cholesky(C)
    Z = np.linalg.solve(L, X)
    S = Z @ Z.T / n
    off = (S - np.eye(prior.dim)) * np.sqrt(n)
    assert np.abs(off).max() < 6


def test_table_defaults_present():
    assert MATERIAL_DEFAULTS["log_d_gm"] == -0.9937 and MATERIAL_DEFAULTS["log_g_var_gm"] == 0.0682
