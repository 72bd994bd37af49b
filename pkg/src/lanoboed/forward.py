"""Backward-Euler finite-element solver for the tumor reaction-diffusion model.

Each step solves, for u = u_{k+1},

    Mt (u - u_k) / dt + A_D u - M_L [G (1 - u) u] = 0,   G = exp(m),

with Newton's method. ``Mt`` is the lumped mass by default (keeps the
discrete maximum principle, so u stays in [0, 1]); the reaction is always
assembled with nodal quadrature ``M_L`` so its Jacobian is diagonal.

``reaction='linear'`` swaps the logistic term for a frozen source
``M_L (q m)`` that is affine in m. That configuration makes the whole
parameter-to-observable map affine and is what the closed-form Gaussian
oracles run against.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import GRAY, MaterialMap, StructuredMesh, stiffness_matrix, mass_matrix
from .linalg import SPDFactor, sparse_to_upper_band

log = logging.getLogger(__name__)


class NewtonDivergence(RuntimeError):
    def __init__(self, step, residual, iterations):
        super().__init__(f"Newton failed at step {step}: residual {residual:.3e} after {iterations} iterations")
        self.step = step
        self.residual = residual


@dataclass(frozen=True)
class SimulationConfig:
    T: float = 10.0
    dt: float = 0.1
    n_obs: int = 10
    obs_indices: tuple | None = None
    noise_std: float = 0.02
    newton_atol: float = 1e-10
    newton_rtol: float = 1e-5
    newton_maxiter: int = 100
    reaction: str = "logistic"
    frozen_scale: float = 0.25
    lumped_time_mass: bool = True
    ic_amplitude: float = 0.5
    ic_width_frac: float = 0.1
    observe_nodes: tuple | None = None

    def __post_init__(self):
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("T and dt must be positive")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"T/dt = {n} is not an integer")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if self.reaction not in ("logistic", "linear"):
            raise ValueError(f"unknown reaction {self.reaction!r}")
        idx = self.candidate_indices
        if np.any(np.diff(idx) <= 0) or idx[0] < 1 or idx[-1] > self.n_steps:
            raise ValueError(f"candidate indices {idx} out of range 1..{self.n_steps} or not increasing")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def candidate_indices(self) -> np.ndarray:
        """1-based step indices of the K candidate observation times."""
        if self.obs_indices is not None:
            return np.asarray(self.obs_indices, dtype=int)
        stride = self.n_steps // self.n_obs
        if stride * self.n_obs != self.n_steps:
            raise ValueError(f"{self.n_steps} steps do not split into {self.n_obs} equal observation intervals")
        return stride * np.arange(1, self.n_obs + 1)

    @property
    def K(self) -> int:
        return len(self.candidate_indices)


@dataclass
class StateTrajectory:
    states: np.ndarray  # (n_steps + 1, d_m), row 0 is u_0
    newton_iterations: list = field(default_factory=list)
    final_residuals: list = field(default_factory=list)


class ForwardModel:
    """Discretized PDE on a mesh; all solves are pure functions of ``m``."""

    def __init__(self, mesh: StructuredMesh, material: MaterialMap, config: SimulationConfig | None = None):
        self.mesh = mesh
        self.material = material
        self.config = config or SimulationConfig()
        self.M = mass_matrix(mesh)
        self.ml = np.asarray(self.M.sum(axis=1)).ravel()
        self.A_D = stiffness_matrix(mesh, material.diffusion)
        cfg = self.config
        if cfg.lumped_time_mass:
            self.Mt = sp.diags(self.ml / cfg.dt, format="csr")
        else:
            self.Mt = (self.M / cfg.dt).tocsr()
        self.base_operator = (self.Mt + self.A_D).tocsr()
        self.bandwidth = mesh.nx + 1
        self._base_band = sparse_to_upper_band(self.base_operator, self.bandwidth)
        self.u0 = self.initial_condition()
        if cfg.observe_nodes is not None:
            nodes = np.asarray(cfg.observe_nodes, dtype=int)
            if nodes.min() < 0 or nodes.max() >= mesh.n_nodes:
                raise ValueError("observation node out of range")
            self.obs_nodes = nodes
        else:
            self.obs_nodes = None
        self._linear_lu = None

    @property
    def dim(self) -> int:
        return self.mesh.n_nodes

    @property
    def d_y(self) -> int:
        return self.dim if self.obs_nodes is None else len(self.obs_nodes)

    @property
    def K(self) -> int:
        return self.config.K

    def initial_condition(self) -> np.ndarray:
        xy = self.mesh.coordinates()
        gray = self.material.labels == GRAY
        center = xy[gray].mean(axis=0) if np.any(gray) else xy.mean(axis=0)
        width = self.config.ic_width_frac * self.mesh.size[0]
        r2 = np.sum((xy - center) ** 2, axis=1)
        return self.config.ic_amplitude * np.exp(-r2 / (2.0 * width**2))

    # -- nodal reaction pieces --------------------------------------------
    def reaction(self, u, m):
        if self.config.reaction == "linear":
            return self.config.frozen_scale * m
        return np.exp(m) * (1.0 - u) * u

    def reaction_du(self, u, m):
        if self.config.reaction == "linear":
            return np.zeros_like(u)
        return np.exp(m) * (1.0 - 2.0 * u)

    def reaction_dm(self, u, m):
        """Nodal factor c with d(reaction)/dm = diag(c)."""
        if self.config.reaction == "linear":
            return np.full_like(u, self.config.frozen_scale)
        return np.exp(m) * (1.0 - u) * u

    def linearized_operator(self, u, m) -> sp.csc_matrix:
        """Mt + A_D - M_L diag(d reaction / du) at state ``u``."""
        return (self.base_operator - sp.diags(self.ml * self.reaction_du(u, m))).tocsc()

    def _factor(self, u, m) -> SPDFactor:
        if self.config.reaction == "linear":
            if self._linear_lu is None:
                self._linear_lu = SPDFactor(self._base_band.copy(), self.base_operator)
            return self._linear_lu
        band = self._base_band.copy()
        band[-1] -= self.ml * self.reaction_du(u, m)
        try:
            return SPDFactor(band)
        except np.linalg.LinAlgError:
            return SPDFactor(None, self.linearized_operator(u, m))

    # -- time integration ---------------------------------------------------
    def solve(self, m, keep_factors=False):
        """Integrate from u_0; returns the trajectory and, if asked, per-step factorizations."""
        m = np.asarray(m, dtype=float)
        if m.shape != (self.dim,) or not np.all(np.isfinite(m)):
            raise ValueError("parameter must be a finite vector of length d_m")
        cfg = self.config
        n = cfg.n_steps
        states = np.empty((n + 1, self.dim))
        states[0] = self.u0
        factors = [] if keep_factors else None
        iters, resids = [], []
        u = self.u0.copy()
        for k in range(1, n + 1):
            u_prev = states[k - 1]
            rhs_prev = self.Mt @ u_prev
            u = u_prev.copy()
            res = self.base_operator @ u - rhs_prev - self.ml * self.reaction(u, m)
            r0 = np.linalg.norm(res)
            rn = r0
            it = 0
            while rn > cfg.newton_atol and rn > cfg.newton_rtol * r0:
                if it >= cfg.newton_maxiter:
                    raise NewtonDivergence(k, rn, it)
                lu = self._factor(u, m)
                u = u - lu.solve(res)
                res = self.base_operator @ u - rhs_prev - self.ml * self.reaction(u, m)
                rn = np.linalg.norm(res)
                it += 1
                if not np.isfinite(rn):
                    raise NewtonDivergence(k, rn, it)
            states[k] = u
            iters.append(it)
            resids.append(rn)
            if keep_factors:
                factors.append(self._factor(u, m))
        traj = StateTrajectory(states, iters, resids)
        return (traj, factors) if keep_factors else traj

    def observe(self, traj: StateTrajectory) -> np.ndarray:
        return observe(traj, self.config, self.obs_nodes)

    def pto(self, m) -> np.ndarray:
        """Parameter-to-observable map: (K, d_y) observables at the candidate times."""
        return self.observe(self.solve(m))


def observe(traj: StateTrajectory, config: SimulationConfig, nodes=None) -> np.ndarray:
    idx = config.candidate_indices
    if idx.max() >= traj.states.shape[0]:
        raise IndexError(f"candidate index {idx.max()} beyond trajectory length {traj.states.shape[0]}")
    out = traj.states[idx]
    if nodes is not None:
        out = out[:, nodes]
    return out.copy()


def synthesize_data(series, noise_std, seed) -> np.ndarray:
    """Add i.i.d. N(0, noise_std^2) noise to every entry."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    series = np.asarray(series, dtype=float)
    return series + noise_std * rng.standard_normal(series.shape)


def solve_forward(forward: ForwardModel, m) -> StateTrajectory:
    return forward.solve(m)
