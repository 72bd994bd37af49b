"""Reduced-space Bayesian inference driven by a trained surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ..laplace import ig_eigen_term
from .params import SurrogateParams
from .train import numpy_forward


class AssemblyError(ValueError):
    pass


@dataclass
class ReducedMapResult:
    beta: np.ndarray
    cost: float
    grad_norm: float
    iterations: int
    converged: bool
    message: str


@dataclass
class SurrogatePosterior:
    beta_map: np.ndarray
    eigenvalues: np.ndarray  # descending
    U: np.ndarray  # (r_m, r_m), orthonormal columns
    xi: np.ndarray
    y: np.ndarray | None = None
    map_result: ReducedMapResult | None = None

    def s(self):
        return 1.0 - 1.0 / np.sqrt(self.eigenvalues + 1.0)

    @property
    def ig(self) -> float:
        return reduced_ig(self)


class SurrogateModel:
    """A trained surrogate plus the bases and noise model that connect it to full space."""

    def __init__(self, params: SurrogateParams, bases, prior, beta_f0, noise_std, backend=None):
        if params.r_m != bases.r_m or params.r_f != bases.r_f:
            raise ValueError("surrogate ranks do not match the bases")
        self.params = params
        self.bases = bases
        self.prior = prior
        self.beta_f0 = np.asarray(beta_f0, dtype=float)
        self.noise_std = float(noise_std)
        self.backend = backend
        Psi = bases.psi_f
        self.G = Psi.T @ Psi / self.noise_std**2  # Psi_F^T Γn^{-1} Psi_F

    @property
    def K(self):
        return self.params.K

    @property
    def r_m(self):
        return self.params.r_m

    def evaluate(self, beta, tangents=True):
        """(beta_F series (B, K+1, r_F), output Jacobians dF, Jacobian-head Jacobians dJ)."""
        beta = np.atleast_2d(beta)
        if self.params.kind == "lano":
            from .kernel import lano_eval

            out = lano_eval(self.params.arrays, beta, self.beta_f0, tangents, backend=self.backend)
            return out["bF"], out.get("dF"), out.get("dJ")
        out = numpy_forward(self.params, beta, self.beta_f0, tangents)
        return out["bF"], out.get("dF"), out.get("dF")

    def simulate(self, beta) -> np.ndarray:
        """Decoded full-space observables at the K candidate times, shape (K, d_y)."""
        bF, _, _ = self.evaluate(beta, tangents=False)
        return self.bases.decode_f(bF[0, 1:])

    def jacobian_action(self, beta, mhat) -> np.ndarray:
        """Ĵ m̂ = Psi_F ∇N^J (Psi_m^T Γ_prior^{-1} m̂) at every candidate time, shape (K, d_y)."""
        _, _, dJ = self.evaluate(beta)
        coeff = self.bases.psi_m.T @ self.prior.apply_precision(np.asarray(mhat, dtype=float))
        return (dJ[0] @ coeff) @ self.bases.psi_f.T

    def project_data(self, y, xi):
        """c_k = Psi_F^T Γn^{-1}(y_k - F̄) and the constant part of the misfit."""
        sel = np.flatnonzero(xi)
        r = np.asarray(y, dtype=float)[sel] - self.bases.f_mean
        c = np.zeros((self.K, self.bases.r_f))
        c[sel] = r @ self.bases.psi_f / self.noise_std**2
        const = 0.5 * float(np.sum(r * r)) / self.noise_std**2
        return c, const

    def reduced_cost_grad(self, beta, xi, c, const):
        bF, dF, _ = self.evaluate(beta)
        bF, dF = bF[0, 1:], dF[0]
        cost = const + 0.5 * float(beta @ beta)
        grad = beta.copy()
        for k in np.flatnonzero(xi):
            Gb = self.G @ bF[k]
            cost += 0.5 * float(bF[k] @ Gb) - float(c[k] @ bF[k])
            grad += dF[k].T @ (Gb - c[k])
        return cost, grad

    def reduced_map(self, y, xi, beta0=None, maxiter=150, history=150, gtol=1e-7, ftol=1e-12) -> ReducedMapResult:
        xi = np.asarray(xi)
        if xi.shape != (self.K,):
            raise ValueError("design length does not match the surrogate")
        if not np.any(xi):
            return ReducedMapResult(np.zeros(self.r_m), 0.0, 0.0, 0, True, "empty design")
        c, const = self.project_data(y, xi)
        x0 = np.zeros(self.r_m) if beta0 is None else np.asarray(beta0, dtype=float)
        res = minimize(
            self.reduced_cost_grad,
            x0,
            args=(xi, c, const),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": maxiter, "maxcor": history, "gtol": gtol, "ftol": ftol},
        )
        gnorm = float(np.max(np.abs(res.jac)))
        return ReducedMapResult(res.x, float(res.fun), gnorm, int(res.nit), bool(gnorm <= gtol or res.success), str(res.message))

    def reduced_hessian(self, beta, xi):
        """Σ ξ_k (∇N^J_k)^T Psi_F^T Γn^{-1} Psi_F (∇N^J_k)."""
        _, _, dJ = self.evaluate(beta)
        dJ = dJ[0]
        H = np.zeros((self.r_m, self.r_m))
        for k in np.flatnonzero(xi):
            H += dJ[k].T @ self.G @ dJ[k]
        asym = np.max(np.abs(H - H.T))
        if asym > 1e-8 * max(1.0, np.max(np.abs(H))):
            raise AssemblyError(f"reduced Hessian asymmetry {asym:.2e}")
        return 0.5 * (H + H.T)

    def reduced_gevp_ig(self, beta_map, xi, y=None, map_result=None):
        xi = np.asarray(xi)
        H = self.reduced_hessian(beta_map, xi) if np.any(xi) else np.zeros((self.r_m, self.r_m))
        lam, U = np.linalg.eigh(H)
        order = np.argsort(lam)[::-1]
        lam, U = lam[order], U[:, order]
        if lam.size and lam[-1] < -1e-8 * max(1.0, lam[0]):
            raise AssemblyError(f"reduced Hessian has eigenvalue {lam[-1]:.3e}")
        lam = np.maximum(lam, 0.0)
        post = SurrogatePosterior(np.asarray(beta_map, dtype=float), lam, U, xi.copy(), y, map_result)
        return post, reduced_ig(post)

    def posterior(self, y, xi, beta0=None):
        res = self.reduced_map(y, xi, beta0)
        post, _ = self.reduced_gevp_ig(res.beta, xi, y, res)
        return post


def reduced_ig(post: SurrogatePosterior) -> float:
    return ig_eigen_term(post.eigenvalues) + 0.5 * float(post.beta_map @ post.beta_map)


def reduced_map(model: SurrogateModel, y, xi, beta0=None):
    return model.reduced_map(y, xi, beta0)


def reduced_gevp_ig(model: SurrogateModel, beta_map, xi):
    return model.reduced_gevp_ig(beta_map, xi)


def reduced_posterior_sample(post: SurrogatePosterior, seed) -> np.ndarray:
    """beta_MAP + (I - U S U^T) beta with beta ~ N(0, I)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    beta = rng.standard_normal(len(post.beta_map))
    return post.beta_map + reduced_fluctuation(post, beta)


def reduced_fluctuation(post: SurrogatePosterior, beta):
    return beta - post.U @ (post.s() * (post.U.T @ beta))
