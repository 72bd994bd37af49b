"""Full-space MAP estimation and low-rank Laplace posteriors."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .adjoints import LinearizationPoint, misfit_cost, misfit_gradient
from .forward import ForwardModel
from .geometry import GaussianPrior

log = logging.getLogger(__name__)


class MapConvergenceError(RuntimeError):
    def __init__(self, message, best, grad_norm):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


@dataclass
class MapResult:
    m: np.ndarray
    grad_norm: float
    grad_norm0: float
    iterations: int
    cg_iterations: int
    cost: float
    converged: bool
    lin: LinearizationPoint


def pcg(apply_op, b, apply_prec, rtol, maxiter, x0=None):
    """Preconditioned CG; stops when the preconditioned residual norm drops below ``rtol`` times its start."""
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_op(x) if x0 is not None else b.copy()
    z = apply_prec(r)
    rz = float(r @ z)
    target = rtol * np.sqrt(max(rz, 0.0))
    p = z.copy()
    it = 0
    while it < maxiter and np.sqrt(max(rz, 0.0)) > target:
        Ap = apply_op(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = apply_prec(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return x, it


def compute_map(
    forward: ForwardModel,
    prior: GaussianPrior,
    y,
    xi,
    noise_precision,
    m0=None,
    rtol=1e-6,
    atol=1e-8,
    max_iter=100,
    max_cg=200,
    max_backtrack=20,
    raise_on_fail=True,
) -> MapResult:
    """Gauss-Newton-CG with Armijo backtracking for the MAP point.

    The gradient norm is measured in the prior-covariance metric, which is
    also the CG preconditioner.
    """
    xi = np.asarray(xi)
    y = np.asarray(y, dtype=float)
    m = prior.m_prior.copy() if m0 is None else np.array(m0, dtype=float)
    lin = LinearizationPoint(forward, m)
    cost = sum(misfit_cost(lin, y, xi, prior, noise_precision))
    g = misfit_gradient(lin, y, xi, prior, noise_precision)
    gnorm0 = gnorm = np.sqrt(max(float(g @ prior.apply_covariance(g)), 0.0))
    total_cg = 0
    it = 0
    while gnorm > max(rtol * gnorm0, atol):
        if it >= max_iter:
            err = MapConvergenceError(f"MAP did not converge in {max_iter} iterations (|g|={gnorm:.3e})", m, gnorm)
            if raise_on_fail:
                raise err
            return MapResult(m, gnorm, gnorm0, it, total_cg, cost, False, lin)
        eta = min(0.5, np.sqrt(gnorm / gnorm0))

        def hess(v, lin=lin):
            return lin.gn_hessian(xi, v, noise_precision) + prior.apply_precision(v)

        dm, ncg = pcg(hess, -g, prior.apply_covariance, eta, max_cg)
        total_cg += ncg
        slope = float(g @ dm)
        alpha = 1.0
        for _ in range(max_backtrack):
            trial = LinearizationPoint(forward, m + alpha * dm)
            trial_cost = sum(misfit_cost(trial, y, xi, prior, noise_precision))
            if trial_cost <= cost + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            err = MapConvergenceError("line search failed", m, gnorm)
            if raise_on_fail:
                raise err
            return MapResult(m, gnorm, gnorm0, it, total_cg, cost, False, lin)
        m, lin, cost = trial.m.copy(), trial, trial_cost
        g = misfit_gradient(lin, y, xi, prior, noise_precision)
        gnorm = np.sqrt(max(float(g @ prior.apply_covariance(g)), 0.0))
        it += 1
        log.debug("GN iter %d cost %.6e |g| %.3e cg %d alpha %.3g", it, cost, gnorm, ncg, alpha)
    return MapResult(m, gnorm, gnorm0, it, total_cg, cost, True, lin)


def double_pass_eigh(apply_op, dim, r, p, rng):
    """Randomized double-pass eigensolver for a symmetric PSD operator.

    ``apply_op`` maps a (dim, ncols) block to its image. Returns the r largest
    eigenvalues (descending) and orthonormal eigenvectors.
    """
    if r + p > dim:
        raise ValueError(f"r + p = {r + p} exceeds the dimension {dim}")
    omega = rng.standard_normal((dim, r + p))
    Y = apply_op(omega)
    Q, _ = np.linalg.qr(Y)
    Z = apply_op(Q)
    T = Q.T @ Z
    T = 0.5 * (T + T.T)
    lam, V = np.linalg.eigh(T)
    order = np.argsort(lam)[::-1][:r]
    return lam[order], Q @ V[:, order]


def _clamp_eigenvalues(lam):
    lam = np.array(lam, dtype=float)
    floor = -1e-8 * max(1.0, float(np.max(np.abs(lam))) if lam.size else 1.0)
    if np.any(lam < floor):
        raise ValueError(f"GN eigenvalue {lam.min():.3e} is significantly negative")
    if np.any(lam < 0):
        if np.any(lam < -1e-12):
            warnings.warn(f"clamping {np.sum(lam < 0)} slightly negative eigenvalues to zero", RuntimeWarning)
        lam = np.maximum(lam, 0.0)
    return lam


@dataclass
class LaplacePosterior:
    m_map: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (d_m, r), Γ_prior^{-1}-orthonormal
    xi: np.ndarray
    y: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return len(self.eigenvalues)

    def d(self):
        lam = self.eigenvalues
        return lam / (lam + 1.0)

    def s(self):
        return 1.0 - 1.0 / np.sqrt(self.eigenvalues + 1.0)


def randomized_gevp(lin: LinearizationPoint, prior: GaussianPrior, xi, r, p=10, noise_precision=1.0, seed=0):
    """Leading eigenpairs of H w = λ Γ_prior^{-1} w for the GN Hessian at ``lin``.

    Solved on the prior-whitened operator S^T H S with S = A^{-1} M^{1/2};
    eigenvectors are mapped back as w = S v.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def whitened(X):
        return prior.unwhiten_transpose(lin.gn_hessian(xi, prior.unwhiten(X), noise_precision))

    lam, V = double_pass_eigh(whitened, prior.dim, r, p, rng)
    return _clamp_eigenvalues(lam), prior.unwhiten(V)


def laplace_posterior(forward, prior, y, xi, noise_precision, r, p=10, seed=0, m0=None, **map_kwargs):
    res = compute_map(forward, prior, y, xi, noise_precision, m0=m0, **map_kwargs)
    lam, W = randomized_gevp(res.lin, prior, xi, r, p, noise_precision, seed)
    return LaplacePosterior(res.m, lam, W, np.asarray(xi).copy(), np.asarray(y).copy()), res


def posterior_sample(post: LaplacePosterior, prior: GaussianPrior, seed) -> np.ndarray:
    """m_MAP + (I - W S W^T Γ_prior^{-1}) m with m a zero-mean prior draw."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fluct = prior.unwhiten(rng.standard_normal(prior.dim))
    return post.m_map + posterior_fluctuation(post, prior, fluct)


def posterior_fluctuation(post: LaplacePosterior, prior: GaussianPrior, fluct):
    coeff = post.eigenvectors.T @ prior.apply_precision(fluct)
    return fluct - post.eigenvectors @ (post.s() * coeff)


def ig_eigen_term(eigenvalues) -> float:
    lam = np.asarray(eigenvalues, dtype=float)
    return 0.5 * float(np.sum(np.log1p(lam) - lam / (1.0 + lam)))


def information_gain(post: LaplacePosterior, prior: GaussianPrior) -> float:
    """Laplace/low-rank KL(posterior || prior) in nats."""
    return ig_eigen_term(post.eigenvalues) + 0.5 * prior.precision_norm_sq(post.m_map - prior.m_prior)


def pointwise_variance(post: LaplacePosterior | None, prior: GaussianPrior, prior_diag=None) -> np.ndarray:
    """diag(Γ_prior - W D W^T); exact prior diagonal via dense A^{-1} (d_m <= 4096)."""
    if prior_diag is None:
        prior_diag = prior_variance(prior)
    if post is None:
        return prior_diag
    return prior_diag - np.sum(post.eigenvectors**2 * post.d()[None, :], axis=1)


def prior_variance(prior: GaussianPrior) -> np.ndarray:
    return np.diag(prior.dense_covariance()).copy()
