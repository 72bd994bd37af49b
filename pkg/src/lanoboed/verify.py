"""Self-contained numerical checks: oracles for the solvers, estimators and surrogate.

Each check returns a :class:`CheckResult`; ``run_all`` is what ``lanoboed verify``
executes. Every check builds its own small problem, so they can run in any order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adjoints import LinearizationPoint, misfit_cost, misfit_gradient
from .forward import ForwardModel, SimulationConfig
from .gaussian import LinearGaussianProblem
from .geometry import GaussianPrior, build_geometry
from .laplace import LaplacePosterior, compute_map, information_gain, randomized_gevp
from .sboed import Design, LinearGaussianModel, SboedState, optimize_design, prefix_shift_oracle


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}, {self.seconds:.1f}s) {self.detail}".rstrip()


def _timed(fn):
    def wrapper(*args, **kwargs):
        t = time.perf_counter()
        out = fn(*args, **kwargs)
        out.seconds = time.perf_counter() - t
        return out

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def linear_problem(nx=8, K=4, nodes=(9, 27, 45, 54), noise_std=0.05, obs_indices=None):
    """Frozen-reaction model observed at a few nodes, so the GN Hessian has low rank."""
    mesh, mat = build_geometry(nx, nx)
    prior = GaussianPrior(mesh, mat)
    idx = obs_indices or {4: (2, 5, 7, 10), 5: (2, 4, 6, 8, 10)}[K]
    cfg = SimulationConfig(reaction="linear", T=1.0, dt=0.1, obs_indices=tuple(idx), observe_nodes=tuple(nodes), noise_std=noise_std)
    fwd = ForwardModel(mesh, mat, cfg)
    return fwd, prior, LinearGaussianProblem.from_forward(fwd, prior)


# -- criterion-level checks -----------------------------------------------------------


@_timed
def check_adjoint_dot(nx=16, seed=0) -> CheckResult:
    """Tangent/adjoint transpose consistency on the nonlinear model, every nonempty design."""
    mesh, mat = build_geometry(nx, nx)
    prior = GaussianPrior(mesh, mat)
    fwd = ForwardModel(mesh, mat, SimulationConfig())
    rng = np.random.default_rng(seed)
    lin = LinearizationPoint(fwd, prior.sample(rng))
    mhat = rng.standard_normal(fwd.dim)
    v = rng.standard_normal((fwd.K, fwd.d_y))
    Jm = lin.tangent(mhat)
    worst = 0.0
    for xi in (np.ones(fwd.K, int), (rng.random(fwd.K) < 0.5).astype(int), np.eye(fwd.K, dtype=int)[-1]):
        lhs = float(np.sum(xi[:, None] * v * Jm))
        rhs = float(mhat @ lin.adjoint(v, xi))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    return CheckResult("adjoint dot test (16x16)", worst <= 1e-10, worst, 1e-10, 0.0)


@_timed
def check_tangent_fd(nx=16, seed=1, eps=1e-5) -> CheckResult:
    """Central finite differences of the PtO map against the tangent sweep, per candidate time."""
    mesh, mat = build_geometry(nx, nx)
    prior = GaussianPrior(mesh, mat)
    fwd = ForwardModel(mesh, mat, SimulationConfig())
    rng = np.random.default_rng(seed)
    m = prior.sample(rng)
    mhat = prior.sample(rng) - prior.m_prior
    Jm = LinearizationPoint(fwd, m).tangent(mhat)
    fd = (fwd.pto(m + eps * mhat) - fwd.pto(m - eps * mhat)) / (2 * eps)
    err = float(np.max(np.linalg.norm(fd - Jm, axis=1) / np.linalg.norm(Jm, axis=1)))
    return CheckResult("Jacobian action vs central FD (16x16)", err <= 1e-4, err, 1e-4, 0.0)


@_timed
def check_linear_gaussian(r=30, p=10) -> CheckResult:
    """MAP, GEVP spectrum and IG against dense closed forms on an 8x8 frozen-reaction model."""
    fwd, prior, lg = linear_problem(nodes=tuple(range(3, 64, 7)), noise_std=0.02)
    rng = np.random.default_rng(2)
    y = lg.forward(prior.sample(rng)) + 0.02 * rng.standard_normal(lg.offset.shape)
    xi = np.array([1, 0, 1, 0])
    mean, cov = lg.posterior(xi, y)
    res = compute_map(fwd, prior, y, xi, 1 / 0.02**2)
    e_map = np.linalg.norm(res.m - mean) / np.linalg.norm(mean)
    lam, W = randomized_gevp(res.lin, prior, xi, r, p, 1 / 0.02**2, seed=0)
    ev = np.sort(np.linalg.eigvalsh(lg.whitened_hessian(xi)))[::-1][:r]
    nz = ev > 1e-8 * ev[0]
    e_eig = float(np.max(np.abs(lam[nz] - ev[nz]) / ev[nz]))
    e_tail = float(np.max(np.abs(lam[~nz] - ev[~nz]))) / ev[0] if np.any(~nz) else 0.0
    ig = information_gain(LaplacePosterior(res.m, lam, W, xi), prior)
    kl = lg.kl_to_prior(mean, cov)
    e_ig = abs(ig - kl) / kl
    ok = e_map <= 1e-6 and e_eig <= 1e-6 and e_tail <= 1e-6 and e_ig <= 1e-5
    worst = max(e_map, e_eig, e_ig)
    return CheckResult("linear-Gaussian MAP/eigen/IG oracle (8x8)", ok, worst, 1e-6, 0.0, f"map {e_map:.1e} eig {e_eig:.1e} ig {e_ig:.1e}")


@_timed
def check_prefix_shift() -> CheckResult:
    """Terminal vs prefix-conditioned objectives differ by the prefix KL for every candidate."""
    fwd, prior, lg = linear_problem()
    rng = np.random.default_rng(0)
    y = lg.forward(prior.sample(rng)) + 0.05 * rng.standard_normal(lg.offset.shape)
    prefix = np.array([1, 0, 0, 0])
    dev, term, cond, const = prefix_shift_oracle(lg, prefix, y, 2)
    same = int(np.argmax(term)) == int(np.argmax(cond))
    return CheckResult("terminal vs conditioned objective shift", dev <= 1e-8 and same and const > 0, dev, 1e-8, 0.0, f"constant {const:.4f}")


@_timed
def check_conditional_eig(n_samples=10_000, seed=11) -> CheckResult:
    """Monte Carlo cEIG within 3 standard errors of the closed form; exhaustive argmax matches."""
    fwd, prior, lg = linear_problem()
    model = LinearGaussianModel(lg)
    rng = np.random.default_rng(3)
    y = lg.forward(prior.sample(rng)) + 0.05 * rng.standard_normal(lg.offset.shape)
    worst = 0.0
    agree = True
    for prefix in (np.zeros(4, int), np.array([1, 0, 0, 0])):
        step = 0 if not prefix.any() else 1
        post = model.posterior(y, prefix) if prefix.any() else model.prior_state()
        state = SboedState(4, 2, step=step, xi_star=prefix.copy(), y_star=y.copy(), posterior=post)
        res = optimize_design(model, state, n_samples, seed, "exhaustive")
        oracle = []
        for xi, val, se, _ in res.table:
            exact = lg.conditional_eig(xi, prefix, y) if prefix.any() else lg.eig(xi)
            oracle.append(exact)
            worst = max(worst, abs(val - exact) / se)
        cands = [t[0] for t in res.table]
        agree &= bool(np.array_equal(cands[int(np.argmax(oracle))], res.best))
    return CheckResult("conditional EIG vs closed form (z-score)", worst <= 3.0 and agree, worst, 3.0, 0.0, "argmax agrees" if agree else "argmax differs")


@_timed
def check_eig_monotone(K=5) -> CheckResult:
    """Exact EIG never decreases when a time is added, over all designs for K = 5."""
    _, _, lg = linear_problem(K=K)
    vals = {}
    for bits in range(2**K):
        xi = np.array([(bits >> (K - 1 - k)) & 1 for k in range(K)])
        vals[bits] = lg.eig(xi)
    worst = 0.0
    for bits, v in vals.items():
        for k in range(K):
            sup = bits | (1 << k)
            if sup != bits:
                worst = max(worst, v - vals[sup])
    return CheckResult("EIG monotone under supersets (K=5)", worst <= 1e-12, max(worst, 0.0), 1e-12, 0.0, f"{len(vals)} designs")


@_timed
def check_lano_fd(n_inputs=20, seed=0, eps=1e-6) -> CheckResult:
    """Exact rollout Jacobians of both heads against central differences."""
    from .surrogate.core import lano_rollout
    from .surrogate.params import init_lano

    K, r_m, r_f = 6, 8, 6
    P = init_lano(K, r_m, r_f, 24, 16, seed=seed, head_gain=1.0).arrays
    rng = np.random.default_rng(seed + 1)
    bm = rng.standard_normal((n_inputs, r_m))
    f0 = rng.standard_normal(r_f)
    out = lano_rollout(P, bm, f0)
    worst = 0.0
    for key, dkey in (("bF", "dF"), ("bJ", "dJ")):
        fd = np.zeros_like(out[dkey])
        for j in range(r_m):
            e = np.zeros(r_m)
            e[j] = eps
            hi = lano_rollout(P, bm + e, f0, tangents=False)[key][:, 1:]
            lo = lano_rollout(P, bm - e, f0, tangents=False)[key][:, 1:]
            fd[..., j] = (hi - lo) / (2 * eps)
        err = np.linalg.norm(fd - out[dkey], axis=(2, 3)) / np.linalg.norm(out[dkey], axis=(2, 3))
        worst = max(worst, float(err.max()))
    return CheckResult("LANO Jacobians vs central FD", worst <= 1e-6, worst, 1e-6, 0.0, f"{n_inputs} inputs")


@_timed
def check_lano_causal(seed=0) -> CheckResult:
    """Perturbing parameters used only from step j on leaves earlier outputs bit-identical."""
    from .surrogate.core import lano_rollout
    from .surrogate.params import init_lano

    K, r_m, r_f = 6, 5, 4
    P = init_lano(K, r_m, r_f, 16, 12, seed=seed, head_gain=1.0).arrays
    rng = np.random.default_rng(seed)
    bm = rng.standard_normal((3, r_m))
    f0 = rng.standard_normal(r_f)
    base = lano_rollout(P, bm, f0)
    per_step = ("Ws", "bs", "Wz", "bz", "W1F", "b1F", "W2F", "b2F", "W1J", "b1J", "W2J", "b2J")
    worst = 0.0
    changed_later = True
    for j in range(1, K):
        Q = {k: v.copy() for k, v in P.items()}
        for name in per_step:
            Q[name][j] += rng.standard_normal(Q[name][j].shape)
        Q["P"][:, j] += rng.standard_normal(Q["P"].shape[0])
        out = lano_rollout(Q, bm, f0)
        # outputs 0..j come from steps before j
        for key in ("bF", "bJ"):
            worst = max(worst, float(np.max(np.abs(out[key][:, : j + 1] - base[key][:, : j + 1]))))
        for key in ("dF", "dJ"):
            worst = max(worst, float(np.max(np.abs(out[key][:, :j] - base[key][:, :j]))))
        changed_later &= bool(np.max(np.abs(out["bF"][:, j + 1] - base["bF"][:, j + 1])) > 0)
    return CheckResult("LANO causal-mask zero sensitivity", worst == 0.0 and changed_later, worst, 0.0, 0.0)


# -- invariants -----------------------------------------------------------------------


@_timed
def check_prior_invariants(nx=16, seed=0) -> CheckResult:
    """Operator symmetry, whiten/unwhiten inverse pair and the precision norm against dense algebra."""
    mesh, mat = build_geometry(nx, nx)
    prior = GaussianPrior(mesh, mat)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(prior.dim)
    asym = max(abs(prior.M - prior.M.T).max(), abs(prior.A - prior.A.T).max())
    rt = np.linalg.norm(prior.unwhiten(prior.whiten(v)) - v) / np.linalg.norm(v)
    nrm = prior.precision_norm_sq(v)
    ref = float(v @ np.linalg.solve(prior.dense_covariance(), v))
    e = abs(nrm - ref) / ref
    area = abs(prior.M.sum() - mesh.area) / mesh.area
    worst = max(rt / 1e-10, e / 1e-8, asym / 1e-12, area / 1e-12)
    return CheckResult("prior operator invariants", worst <= 1.0, worst, 1.0, 0.0, f"roundtrip {rt:.1e} norm {e:.1e}")


@_timed
def check_gradient_fd(nx=8, seed=4) -> CheckResult:
    """Directional derivative of the MAP objective against central differences."""
    mesh, mat = build_geometry(nx, nx)
    prior = GaussianPrior(mesh, mat)
    fwd = ForwardModel(mesh, mat, SimulationConfig(T=2.0, n_obs=4))
    rng = np.random.default_rng(seed)
    m = prior.sample(rng)
    y = fwd.pto(prior.sample(rng))
    xi = np.array([0, 1, 0, 1])
    prec = 1 / fwd.config.noise_std**2
    g = misfit_gradient(LinearizationPoint(fwd, m), y, xi, prior, prec)
    d = prior.sample(rng) - prior.m_prior
    cost = lambda x: sum(misfit_cost(LinearizationPoint(fwd, x), y, xi, prior, prec))
    best = np.inf
    for eps in (1e-3, 1e-4, 1e-5):
        fd = (cost(m + eps * d) - cost(m - eps * d)) / (2 * eps)
        best = min(best, abs(fd - g @ d) / abs(g @ d))
    return CheckResult("MAP objective gradient vs FD", best <= 1e-5, best, 1e-5, 0.0)


@_timed
def check_design_counts() -> CheckResult:
    """Candidate enumeration sizes and the adaptive evaluation bound."""
    from math import comb

    ok = Design(4, 2, np.zeros(4, int), 0).n_completions() == 6
    ok &= Design(6, 2, np.array([0, 1, 0, 0, 0, 0]), 2).n_completions() == 4
    fwd, prior, lg = linear_problem()
    from .sboed import adaptive_run

    model = LinearGaussianModel(lg)
    rng = np.random.default_rng(5)
    y = lg.forward(prior.sample(rng)) + 0.05 * rng.standard_normal(lg.offset.shape)
    res = adaptive_run(model, lambda k: y[k], 2, 64, seed=1)
    ok &= res.n_evaluations <= comb(5, 2) and int(res.adaptive.sum()) == 2
    return CheckResult("design enumeration counts", bool(ok), float(res.n_evaluations), float(comb(5, 2)), 0.0)


@_timed
def check_kernel_backends(seed=0) -> CheckResult:
    """Compiled and numpy rollouts agree (skipped when the extension is not built)."""
    from .surrogate.kernel import available_backends, lano_eval
    from .surrogate.params import init_lano

    if "cython" not in available_backends():
        return CheckResult("compiled kernel matches numpy", True, 0.0, 1e-12, 0.0, "extension not built; skipped")
    P = init_lano(10, 16, 16, seed=seed, head_gain=1.0).arrays
    rng = np.random.default_rng(seed)
    bm = rng.standard_normal((4, 16))
    f0 = rng.standard_normal(16)
    a = lano_eval(P, bm, f0, backend="cython")
    b = lano_eval(P, bm, f0, backend="numpy")
    err = max(float(np.max(np.abs(a[k] - b[k])) / max(1.0, np.max(np.abs(b[k])))) for k in b)
    return CheckResult("compiled kernel matches numpy", err <= 1e-12, err, 1e-12, 0.0)


CRITERIA = {
    "adjoints": (check_adjoint_dot, check_tangent_fd),
    "linear-gaussian": (check_linear_gaussian,),
    "prefix-shift": (check_prefix_shift,),
    "ceig": (check_conditional_eig,),
    "monotone": (check_eig_monotone,),
    "lano": (check_lano_fd, check_lano_causal),
}
INVARIANTS = (check_prior_invariants, check_gradient_fd, check_design_counts, check_kernel_backends)


def run_all(log=print):
    results = []
    for fns in list(CRITERIA.values()) + [INVARIANTS]:
        for fn in fns:
            try:
                r = fn()
            except Exception as exc:  # a crash is a failed check, not an aborted suite
                r = CheckResult(fn.__name__, False, float("nan"), 0.0, 0.0, f"{type(exc).__name__}: {exc}")
            results.append(r)
            if log:
                log(r.line())
    return results
