import numpy as np
import pytest

from lanoboed.forward import ForwardModel, NewtonDivergence, SimulationConfig, observe, solve_forward, synthesize_data
from lanoboed.geometry import build_geometry


def no_diffusion_problem(n=6, **sim):
    mesh, mat = build_geometry(n, n, overrides={"log_d_gm": -60.0, "log_d_wm": -60.0})
    return mesh, mat, ForwardModel(mesh, mat, SimulationConfig(**sim))


def test_zero_dynamics_keeps_initial_state():
    _, _, fwd = no_diffusion_problem()
    traj = solve_forward(fwd, np.full(fwd.dim, -60.0))
    assert np.allclose(traj.states, fwd.u0[None, :], atol=1e-14)


def test_backward_euler_logistic_recursion_and_first_order_convergence():
    G = 0.8
    T = 2.0
    errs = []
    for dt in (0.1, 0.05, 0.025, 0.0125):
        _, _, fwd = no_diffusion_problem(T=T, dt=dt, n_obs=1)
        traj = fwd.solve(np.full(fwd.dim, np.log(G)))
        u0 = fwd.u0
        # one backward-Euler step: u1 solves u1 - u0 = dt G (1 - u1) u1
        a = dt * G
        u1 = ((a - 1) + np.sqrt((1 - a) ** 2 + 4 * a * u0)) / (2 * a)
        assert np.allclose(traj.states[1], u1, atol=1e-9)
        exact = u0 / (u0 + (1 - u0) * np.exp(-G * T))
        errs.append(np.max(np.abs(traj.states[-1] - exact)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 1.8) & (ratios < 2.2)), ratios


def test_state_stays_in_unit_interval(grid16):
    _, _, prior, fwd = grid16
    for seed in range(3):
        traj = fwd.solve(prior.sample(np.random.default_rng(seed)))
        assert traj.states.max() <= 1 + 1e-6 and traj.states.min() >= -1e-6


def test_accepted_steps_meet_newton_tolerance(grid16):
    _, _, prior, fwd = grid16
    m = prior.sample(np.random.default_rng(9))
    S = fwd.solve(m).states

    def residual(u, prev):
        return np.linalg.norm(fwd.base_operator @ u - fwd.Mt @ prev - fwd.ml * fwd.reaction(u, m))

    for k in range(1, S.shape[0]):
        r = residual(S[k], S[k - 1])
        r0 = residual(S[k - 1], S[k - 1])
        assert r <= 1e-10 or r <= 1e-5 * r0


def test_observation_modes(grid8):
    mesh, mat, prior, fwd = grid8
    m = prior.sample(np.random.default_rng(0))
    traj = fwd.solve(m)
    F = fwd.observe(traj)
    idx = fwd.config.candidate_indices
    assert np.array_equal(F, traj.states[idx])
    one = observe(traj, fwd.config, nodes=[5])
    assert one.shape == (fwd.K, 1)
    assert np.array_equal(one[:, 0], traj.states[idx, 5])


def test_default_candidate_indices():
    assert SimulationConfig().candidate_indices.tolist() == list(range(10, 101, 10))
    with pytest.raises(ValueError):
        SimulationConfig(T=1.0, dt=0.3)
    with pytest.raises(ValueError):
        SimulationConfig(obs_indices=(3, 2))


def test_noise_statistics():
    F = np.zeros((10, 10_000))
    y = synthesize_data(F, 0.02, 0)
    assert np.std(y) == pytest.approx(0.02, rel=0.01)
    assert np.array_equal(y, synthesize_data(F, 0.02, 0))
    assert np.allclose(synthesize_data(F, 1e-300, 0), F)


def test_misfit_expectation_matches_chi_square(grid8):
    _, _, prior, fwd = grid8
    m = prior.sample(np.random.default_rng(1))
    F = fwd.pto(m)
    s = fwd.config.noise_std
    xi = np.array([1, 0, 1, 0])
    vals = []
    for seed in range(2000):
        y = synthesize_data(F, s, seed)
        vals.append(0.5 * np.sum(xi[:, None] * (y - F) ** 2) / s**2)
    expected = xi.sum() * fwd.d_y / 2
    se = np.std(vals) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - expected) < 5 * se


def test_time_refinement_rate(grid16):
    mesh, mat, prior, _ = grid16
    m = prior.m_prior + 0.3 * (prior.sample(np.random.default_rng(2)) - prior.m_prior)
    finals = []
    for dt in (0.1, 0.05, 0.025, 0.0125):
        fwd = ForwardModel(mesh, mat, SimulationConfig(T=2.0, dt=dt, n_obs=1))
        finals.append(fwd.pto(m)[-1])
    diffs = [np.linalg.norm(finals[i] - finals[i + 1]) for i in range(3)]
    ratios = [diffs[i] / diffs[i + 1] for i in range(2)]
    assert all(1.5 <= r <= 2.5 for r in ratios), ratios


def test_deterministic_and_input_checks(grid8):
    _, _, prior, fwd = grid8
    m = prior.sample(np.random.default_rng(4))
    assert np.array_equal(fwd.pto(m), fwd.pto(m))
    with pytest.raises(ValueError):
        fwd.pto(np.full(fwd.dim, np.nan))


def test_newton_failure_reports_step():
    mesh, mat = build_geometry(6, 6)
    fwd = ForwardModel(mesh, mat, SimulationConfig(T=1.0, newton_maxiter=1, newton_atol=1e-300, newton_rtol=1e-300))
    with pytest.raises(NewtonDivergence) as e:
        fwd.solve(np.full(fwd.dim, 1.0))
    assert e.value.step == 1
