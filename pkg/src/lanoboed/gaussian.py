"""Dense closed-form linear-Gaussian algebra used as a test oracle.

The observation model is y_k = c_k + J_k m + noise, noise ~ N(0, s^2 I),
with prior N(m0, G). Everything is dense, so keep d_m modest (<= 4096).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _logdet(S):
    sign, val = np.linalg.slogdet(S)
    if sign <= 0:
        raise ValueError("matrix is not positive definite")
    return val


def _sym(S):
    return 0.5 * (S + S.T)


def gaussian_kl(mu1, S1, mu0, S0) -> float:
    """KL(N(mu1, S1) || N(mu0, S0))."""
    d = len(mu0)
    S0inv = np.linalg.inv(S0)
    diff = mu1 - mu0
    return 0.5 * (np.trace(S0inv @ S1) - d + _logdet(S0) - _logdet(S1) + diff @ S0inv @ diff)


def dense_jacobians(forward, m=None) -> np.ndarray:
    """Stack of J_k, shape (K, d_y, d_m), from d_m tangent solves."""
    from .adjoints import LinearizationPoint

    m = np.zeros(forward.dim) if m is None else m
    lin = LinearizationPoint(forward, m)
    return lin.tangent(np.eye(forward.dim))


@dataclass
class LinearGaussianProblem:
    J: np.ndarray  # (K, d_y, d_m)
    offset: np.ndarray  # (K, d_y)
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    noise_var: float

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        self.prior_cov = _sym(np.asarray(self.prior_cov, dtype=float))
        if np.linalg.eigvalsh(self.prior_cov).min() <= 0:
            raise ValueError("prior covariance is not positive definite")
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")
        self._prior_prec = _sym(np.linalg.inv(self.prior_cov))
        self._prior_logdet = _logdet(self.prior_cov)
        self._cache = {}

    @classmethod
    def from_forward(cls, forward, prior):
        """Linear (frozen-reaction) forward model plus its Gaussian prior."""
        if forward.config.reaction != "linear":
            raise ValueError("closed forms need the linear reaction configuration")
        offset = forward.pto(np.zeros(forward.dim))
        return cls(dense_jacobians(forward), offset, prior.m_prior.copy(), prior.dense_covariance(), forward.config.noise_std**2)

    @property
    def K(self):
        return self.J.shape[0]

    @property
    def dim(self):
        return self.J.shape[2]

    def forward(self, m):
        return self.offset + np.einsum("kij,j->ki", self.J, m)

    def _stack(self, xi):
        sel = np.flatnonzero(xi)
        return sel, self.J[sel].reshape(-1, self.dim)

    def posterior(self, xi, y):
        """Exact posterior mean and covariance given data at the selected times."""
        sel, Js = self._stack(xi)
        if sel.size == 0:
            return self.prior_mean.copy(), self.prior_cov.copy()
        ys = (np.asarray(y)[sel] - self.offset[sel]).ravel()
        cov, _ = self._post_cov(sel, Js)
        mean = cov @ (Js.T @ ys / self.noise_var + self._prior_prec @ self.prior_mean)
        return mean, cov.copy()

    def _post_cov(self, sel, Js):
        """Posterior covariance and KL(post||prior) minus its mean term; data-independent, so cached."""
        key = tuple(sel)
        if key not in self._cache:
            cov = _sym(np.linalg.inv(self._prior_prec + Js.T @ Js / self.noise_var))
            base = 0.5 * (np.sum(self._prior_prec * cov) - self.dim + self._prior_logdet - _logdet(cov))
            self._cache[key] = (cov, base)
        return self._cache[key]

    def kl_to_prior(self, mean, cov) -> float:
        return gaussian_kl(mean, cov, self.prior_mean, self.prior_cov)

    def posterior_kl(self, xi, y):
        """(mean, cov, KL(post||prior)) with the covariance part cached per design."""
        sel, Js = self._stack(xi)
        mean, cov = self.posterior(xi, y)
        base = self._post_cov(sel, Js)[1] if sel.size else 0.0
        diff = mean - self.prior_mean
        return mean, cov, base + 0.5 * float(diff @ self._prior_prec @ diff)

    def whitened_hessian(self, xi):
        """Γ^{1/2} H Γ^{1/2} (symmetric square root); its spectrum is the GEVP spectrum."""
        _, Js = self._stack(xi)
        w, V = np.linalg.eigh(self.prior_cov)
        half = (V * np.sqrt(w)) @ V.T
        return _sym(half @ (Js.T @ Js / self.noise_var) @ half)

    def eig(self, xi) -> float:
        """Expected information gain ½ log det(I + Γn^{-1/2} J Γ J^T Γn^{-1/2})."""
        sel, Js = self._stack(xi)
        if sel.size == 0:
            return 0.0
        S = np.eye(Js.shape[0]) + Js @ self.prior_cov @ Js.T / self.noise_var
        return 0.5 * _logdet(S)

    def _predictive_mean_map(self, xi_full, prefix_xi, y_prefix):
        """Express the full posterior mean as a + B y_new with y_new ~ N(c, C).

        Returns (post1_mean, post1_cov, post2_cov, a, B, c, C).
        """
        xi_full = np.asarray(xi_full)
        prefix_xi = np.asarray(prefix_xi)
        if np.any(prefix_xi > xi_full):
            raise ValueError("prefix must be contained in the design")
        mu1, S1 = self.posterior(prefix_xi, y_prefix)
        _, S2 = self.posterior(xi_full, y_prefix)
        new = np.flatnonzero(xi_full - prefix_xi)
        old = np.flatnonzero(prefix_xi)
        d_y = self.J.shape[1]
        Jn = self.J[new].reshape(-1, self.dim)
        Jo = self.J[old].reshape(-1, self.dim)
        yo = (np.asarray(y_prefix)[old] - self.offset[old]).ravel()
        # mu2 = S2 (G^-1 m0 + Jo^T yo/s2 + Jn^T (y_new - c_new)/s2)
        a = S2 @ (self._prior_prec @ self.prior_mean + Jo.T @ yo / self.noise_var - Jn.T @ self.offset[new].ravel() / self.noise_var)
        B = S2 @ Jn.T / self.noise_var
        c = self.offset[new].ravel() + Jn @ mu1
        C = _sym(Jn @ S1 @ Jn.T + self.noise_var * np.eye(len(new) * d_y))
        return mu1, S1, S2, a, B, c, C

    def _expected_kl(self, S2, a, B, c, C, ref_mean, ref_cov):
        """E_{y_new}[KL(N(a + B y_new, S2) || N(ref_mean, ref_cov))]."""
        P = np.linalg.inv(ref_cov)
        e = a + B @ c - ref_mean
        quad = e @ P @ e + np.trace(B.T @ P @ B @ C)
        d = self.dim
        return 0.5 * (np.trace(P @ S2) - d + _logdet(ref_cov) - _logdet(S2) + quad)

    def conditional_eig(self, xi_full, prefix_xi, y_prefix) -> float:
        """Expected KL(terminal posterior || prior) over the prefix-predictive of the new data."""
        mu1, S1, S2, a, B, c, C = self._predictive_mean_map(xi_full, prefix_xi, y_prefix)
        return self._expected_kl(S2, a, B, c, C, self.prior_mean, self.prior_cov)

    def conditional_eig_vs_prefix(self, xi_full, prefix_xi, y_prefix) -> float:
        """Expected KL(terminal posterior || prefix posterior)."""
        mu1, S1, S2, a, B, c, C = self._predictive_mean_map(xi_full, prefix_xi, y_prefix)
        return self._expected_kl(S2, a, B, c, C, mu1, S1)


def linear_gaussian_oracle(J, prior_cov, noise_var, xi, y, prior_mean=None, offset=None):
    """Exact posterior mean/cov, KL(post||prior) and EIG for a dense linear-Gaussian instance."""
    J = np.asarray(J, dtype=float)
    if prior_mean is None:
        prior_mean = np.zeros(J.shape[2])
    if offset is None:
        offset = np.zeros(J.shape[:2])
    prob = LinearGaussianProblem(J, offset, prior_mean, prior_cov, noise_var)
    mean, cov = prob.posterior(xi, y)
    return mean, cov, prob.kl_to_prior(mean, cov), prob.eig(xi)
