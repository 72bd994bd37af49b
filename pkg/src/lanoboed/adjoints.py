"""Tangent-linear and adjoint sweeps for the backward-Euler PtO map.

The tangent recursion is

    L_n du_n = Mt du_{n-1} + S_n dm,    du_0 = 0,

with ``L_n`` the linearized step operator at u_n and ``S_n = M_L diag(c_n)``
the parameter sensitivity of the nodal reaction. The adjoint sweep is its
exact discrete transpose, so the dot test holds to round-off.
"""

from __future__ import annotations

import numpy as np

from .forward import ForwardModel


def _as_noise_precision(noise_precision, d_y):
    if np.isscalar(noise_precision):
        return lambda v: float(noise_precision) * v
    P = np.asarray(noise_precision, dtype=float)
    if P.shape != (d_y, d_y):
        raise ValueError(f"noise precision must be scalar or {d_y}x{d_y}")
    return lambda v: P @ v


class LinearizationPoint:
    """A parameter, its trajectory and the per-step factorized linearized operators."""

    def __init__(self, forward: ForwardModel, m, traj=None, factors=None):
        self.forward = forward
        self.m = np.array(m, dtype=float)
        self.m.setflags(write=False)
        if traj is None or factors is None:
            traj, factors = forward.solve(self.m, keep_factors=True)
        if len(factors) != forward.config.n_steps:
            raise ValueError("need one factorization per time step")
        self.traj = traj
        self.factors = factors
        states = traj.states
        # S_n diagonal for n = 1..N (row n-1)
        self.sens = forward.ml[None, :] * np.array([forward.reaction_dm(states[n], self.m) for n in range(1, len(states))])
        self.obs_steps = forward.config.candidate_indices
        self.observables = forward.observe(traj)

    @property
    def K(self) -> int:
        return len(self.obs_steps)

    def _B(self, u):
        nodes = self.forward.obs_nodes
        return u if nodes is None else u[nodes]

    def _Bt(self, v):
        nodes = self.forward.obs_nodes
        if nodes is None:
            return v
        out = np.zeros((self.forward.dim,) + v.shape[1:])
        out[nodes] = v
        return out

    def tangent(self, mhat, upto=None) -> np.ndarray:
        """J_k mhat for every candidate time; shape (K, d_y) or (K, d_y, ncols)."""
        mhat = np.asarray(mhat, dtype=float)
        if mhat.shape[0] != self.forward.dim:
            raise ValueError("direction has wrong length")
        fwd = self.forward
        cols = mhat.shape[1:]
        out = np.zeros((self.K, fwd.d_y) + cols)
        last = self.obs_steps[-1] if upto is None else self.obs_steps[upto - 1]
        if not np.any(mhat):
            return out
        sens = self.sens if mhat.ndim == 1 else self.sens[:, :, None]
        uh = np.zeros_like(mhat)
        k = 0
        for n in range(1, last + 1):
            uh = self.factors[n - 1].solve(fwd.Mt @ uh + sens[n - 1] * mhat)
            if k < self.K and n == self.obs_steps[k]:
                out[k] = self._B(uh)
                k += 1
        return out

    def adjoint(self, v, xi) -> np.ndarray:
        """sum_k xi_k J_k^T v_k, with ``v`` of shape (K, d_y) or (K, d_y, ncols)."""
        xi = np.asarray(xi)
        if xi.shape != (self.K,):
            raise ValueError(f"design has length {xi.shape}, expected {self.K}")
        v = np.asarray(v, dtype=float)
        fwd = self.forward
        cols = v.shape[2:]
        grad = np.zeros((fwd.dim,) + cols)
        sel = np.flatnonzero(xi)
        if sel.size == 0:
            return grad
        sources = {int(self.obs_steps[k]): self._Bt(v[k]) for k in sel}
        last = max(sources)
        sens = self.sens if not cols else self.sens[:, :, None]
        a = np.zeros((fwd.dim,) + cols)
        MtT = fwd.Mt.T.tocsr()
        for n in range(last, 0, -1):
            rhs = MtT @ a
            if n in sources:
                rhs = rhs + sources[n]
            # linearized operators are symmetric, so the transpose solve reuses the factor
            a = self.factors[n - 1].solve(rhs)
            grad += sens[n - 1] * a
        return grad

    def gn_hessian(self, xi, mhat, noise_precision) -> np.ndarray:
        """sum_k xi_k J_k^T Γ_noise^{-1} J_k mhat via one tangent and one adjoint sweep."""
        xi = np.asarray(xi)
        sel = np.flatnonzero(xi)
        mhat = np.asarray(mhat, dtype=float)
        if sel.size == 0:
            return np.zeros_like(mhat)
        Jm = self.tangent(mhat, upto=sel[-1] + 1)
        apply_p = _as_noise_precision(noise_precision, self.forward.d_y)
        return self.adjoint(np.stack([apply_p(Jm[k]) for k in range(self.K)]), xi)


def tangent_action(lin: LinearizationPoint, mhat):
    return lin.tangent(mhat)


def adjoint_action(lin: LinearizationPoint, v, xi):
    return lin.adjoint(v, xi)


def gn_hessian_action(lin: LinearizationPoint, xi, noise_precision, mhat):
    return lin.gn_hessian(xi, mhat, noise_precision)


def misfit_cost(lin: LinearizationPoint, y, xi, prior, noise_precision) -> tuple[float, float]:
    """(data misfit, prior term) of the MAP objective at ``lin.m``."""
    apply_p = _as_noise_precision(noise_precision, lin.forward.d_y)
    misfit = 0.0
    for k in np.flatnonzero(xi):
        r = y[k] - lin.observables[k]
        misfit += 0.5 * float(r @ apply_p(r))
    reg = 0.5 * prior.precision_norm_sq(lin.m - prior.m_prior)
    return misfit, reg


def misfit_gradient(lin: LinearizationPoint, y, xi, prior, noise_precision) -> np.ndarray:
    """Euclidean gradient of the full MAP objective (data misfit plus prior term)."""
    y = np.asarray(y, dtype=float)
    apply_p = _as_noise_precision(noise_precision, lin.forward.d_y)
    resid = np.zeros_like(lin.observables)
    for k in np.flatnonzero(xi):
        resid[k] = apply_p(y[k] - lin.observables[k])
    return -lin.adjoint(resid, xi) + prior.apply_precision(lin.m - prior.m_prior)
