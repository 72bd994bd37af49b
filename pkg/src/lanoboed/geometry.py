"""Structured-grid bilinear finite elements, two-region material map and the Matérn prior.

Nodes are ordered row-major with x running fastest: node ``(i, j)`` has index
``j * nx + i``. Elements are the ``(nx - 1) * (ny - 1)`` grid cells, each a
bilinear quadrilateral with local node order (i, j), (i+1, j), (i+1, j+1), (i, j+1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import io as sio

GRAY, WHITE = 0, 1

# Growth-rate prior and diffusion constants per region (log scale, 1/day and mm^2/day).
MATERIAL_DEFAULTS = {
    "log_g_mean_gm": -0.7800,
    "log_g_mean_wm": -0.8419,
    "log_g_var_gm": 0.0682,
    "log_g_var_wm": 0.0682,
    "rho_gm": 6.0,
    "rho_wm": 12.0,
    "log_d_gm": -0.9937,
    "log_d_wm": -0.3006,
}


def matern_gamma(sigma, rho):
    return rho / (4.0 * np.sqrt(2.0 * np.pi) * sigma)


def matern_delta(sigma, rho):
    return np.sqrt(2.0) / (sigma * rho * np.sqrt(np.pi))


@dataclass(frozen=True)
class StructuredMesh:
    nx: int
    ny: int
    hx: float
    hy: float

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"need at least 3 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.hx > 0 and self.hy > 0):
            raise ValueError("mesh spacings must be positive")

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def size(self) -> tuple[float, float]:
        return (self.nx - 1) * self.hx, (self.ny - 1) * self.hy

    @property
    def area(self) -> float:
        lx, ly = self.size
        return lx * ly

    def coordinates(self) -> np.ndarray:
        """(n_nodes, 2) array of node coordinates in mm."""
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        xx, yy = np.meshgrid(x, y)  # shape (ny, nx): row j, column i
        return np.column_stack([xx.ravel(), yy.ravel()])

    def elements(self) -> np.ndarray:
        """(n_elements, 4) connectivity, counter-clockwise local order."""
        i, j = np.meshgrid(np.arange(self.nx - 1), np.arange(self.ny - 1))
        n0 = (j * self.nx + i).ravel()
        return np.column_stack([n0, n0 + 1, n0 + 1 + self.nx, n0 + self.nx])

    def as_image(self, values) -> np.ndarray:
        """Reshape a nodal vector to an (ny, nx) image."""
        return np.asarray(values).reshape(self.ny, self.nx)


@dataclass(frozen=True)
class MaterialMap:
    labels: np.ndarray
    diffusion: np.ndarray
    m_prior: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    gamma: np.ndarray = field(init=False)
    delta: np.ndarray = field(init=False)

    def __post_init__(self):
        if np.any(self.diffusion <= 0):
            raise ValueError("diffusion must be positive")
        if np.any(self.sigma <= 0) or np.any(self.rho <= 0):
            raise ValueError("sigma and rho must be positive")
        object.__setattr__(self, "gamma", matern_gamma(self.sigma, self.rho))
        object.__setattr__(self, "delta", matern_delta(self.sigma, self.rho))
        for name in ("labels", "diffusion", "m_prior", "sigma", "rho", "gamma", "delta"):
            getattr(self, name).setflags(write=False)


def region_labels(mesh: StructuredMesh, region_spec) -> np.ndarray:
    """Per-node GRAY/WHITE labels.

    ``region_spec`` is ``("disk", (cx, cy), radius)`` in mm, ``"half-split"``
    (left half gray, right half white) or ``("mask-file", path)``.
    """
    if region_spec is None:
        lx, ly = mesh.size
        region_spec = ("disk", (0.5 * lx, 0.5 * ly), 0.3 * min(lx, ly))
    if isinstance(region_spec, str):
        region_spec = (region_spec,)
    kind = region_spec[0]
    if kind == "disk":
        (cx, cy), radius = region_spec[1], region_spec[2]
        xy = mesh.coordinates()
        inside = (xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2 <= radius**2
        return np.where(inside, WHITE, GRAY).astype(np.int8)
    if kind == "half-split":
        i = np.tile(np.arange(mesh.nx), mesh.ny)
        return np.where(2 * i < mesh.nx, GRAY, WHITE).astype(np.int8)
    if kind == "mask-file":
        img = sio.read_pgm(region_spec[1])
        if img.shape != (mesh.ny, mesh.nx):
            raise ValueError(
                f"mask is {img.shape[1]}x{img.shape[0]} pixels, mesh is {mesh.nx}x{mesh.ny} nodes"
            )
        return np.where(img.ravel() >= 128, WHITE, GRAY).astype(np.int8)
    raise ValueError(f"unknown region spec {kind!r}")


def build_geometry(nx: int, ny: int, domain_size_mm=20.0, region_spec=None, overrides=None):
    """Build the mesh and the per-node material map.

    ``domain_size_mm`` is a scalar (square) or an ``(lx, ly)`` pair.
    ``overrides`` replaces any of the :data:`MATERIAL_DEFAULTS` keys.
    """
    if np.isscalar(domain_size_mm):
        lx = ly = float(domain_size_mm)
    else:
        lx, ly = map(float, domain_size_mm)
    if lx <= 0 or ly <= 0:
        raise ValueError("domain size must be positive")
    if nx < 3 or ny < 3:
        raise ValueError(f"need at least 3 nodes per axis, got {nx}x{ny}")
    mesh = StructuredMesh(int(nx), int(ny), lx / (nx - 1), ly / (ny - 1))

    params = dict(MATERIAL_DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in params:
            raise KeyError(f"unknown material override {key!r}")
        params[key] = float(value)

    labels = region_labels(mesh, region_spec)
    white = labels == WHITE

    def per_node(gm, wm):
        return np.where(white, params[wm], params[gm]).astype(np.float64)

    material = MaterialMap(
        labels=labels,
        diffusion=np.exp(per_node("log_d_gm", "log_d_wm")),
        m_prior=per_node("log_g_mean_gm", "log_g_mean_wm"),
        sigma=np.sqrt(per_node("log_g_var_gm", "log_g_var_wm")),
        rho=per_node("rho_gm", "rho_wm"),
    )
    return mesh, material


# -- bilinear element kernels ------------------------------------------------

_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_LOCAL = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _reference_tables():
    pts = np.array([(a, b) for b in _GAUSS for a in _GAUSS])  # 4 quadrature points, weight 1 each
    N = 0.25 * (1 + pts[:, None, 0] * _LOCAL[None, :, 0]) * (1 + pts[:, None, 1] * _LOCAL[None, :, 1])
    dxi = 0.25 * _LOCAL[None, :, 0] * (1 + pts[:, None, 1] * _LOCAL[None, :, 1])
    deta = 0.25 * _LOCAL[None, :, 1] * (1 + pts[:, None, 0] * _LOCAL[None, :, 0])
    return N, dxi, deta


def assemble_weighted(mesh: StructuredMesh, grad_coef=None, mass_coef=None) -> sp.csr_matrix:
    """Assemble ``∫ a ∇φ_i·∇φ_j + c φ_i φ_j`` with nodal coefficients interpolated at 2x2 Gauss points."""
    N, dxi, deta = _reference_tables()
    conn = mesh.elements()
    det = 0.25 * mesh.hx * mesh.hy
    ke = np.zeros((conn.shape[0], 4, 4))
    if grad_coef is not None:
        aq = np.asarray(grad_coef, dtype=float)[conn] @ N.T  # (E, q)
        gx = dxi * (2.0 / mesh.hx)
        gy = deta * (2.0 / mesh.hy)
        gg = np.einsum("qa,qb->qab", gx, gx) + np.einsum("qa,qb->qab", gy, gy)
        ke += det * np.einsum("eq,qab->eab", aq, gg)
    if mass_coef is not None:
        cq = np.asarray(mass_coef, dtype=float)[conn] @ N.T
        nn = np.einsum("qa,qb->qab", N, N)
        ke += det * np.einsum("eq,qab->eab", cq, nn)
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    n = mesh.n_nodes
    mat = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    # exact symmetrization removes round-off asymmetry from the scatter
    return ((mat + mat.T) * 0.5).tocsr()


def mass_matrix(mesh: StructuredMesh) -> sp.csr_matrix:
    return assemble_weighted(mesh, mass_coef=np.ones(mesh.n_nodes))


def stiffness_matrix(mesh: StructuredMesh, coef) -> sp.csr_matrix:
    return assemble_weighted(mesh, grad_coef=coef)


class PriorNorms(NamedTuple):
    precision_sq: float
    mass_norm: float
    whitened: np.ndarray


class GaussianPrior:
    """Gaussian prior N(m_prior, A^-1 M A^-1) with A the Matérn SPDE operator.

    ``mass_mode='lumped'`` takes M as the row-sum lumped mass, so M^{1/2} is
    diagonal and every M^{-1} is a division. ``'consistent'`` uses the full
    mass matrix with a dense Cholesky root and is limited to small meshes.
    """

    def __init__(self, mesh: StructuredMesh, material: MaterialMap, mass_mode="lumped"):
        if mass_mode not in ("lumped", "consistent"):
            raise ValueError(f"mass_mode must be 'lumped' or 'consistent', not {mass_mode!r}")
        if not np.any(material.delta > 0):
            raise ValueError("SPDE operator is singular: delta vanishes everywhere")
        self.mesh = mesh
        self.material = material
        self.mass_mode = mass_mode
        self.m_prior = material.m_prior.copy()
        self.M = mass_matrix(mesh)
        self.A = assemble_weighted(mesh, grad_coef=material.gamma, mass_coef=material.delta)
        self.mass_lumped = np.asarray(self.M.sum(axis=1)).ravel()
        self._A_lu = spla.splu(self.A.tocsc())
        if mass_mode == "lumped":
            self._sqrt_ml = np.sqrt(self.mass_lumped)
            self._chol = None
        else:
            if mesh.n_nodes > 4096:
                raise ValueError("consistent-mass prior is limited to d_m <= 4096")
            self._chol = np.linalg.cholesky(self.M.toarray())
            self._M_lu = spla.splu(self.M.tocsc())

    @property
    def dim(self) -> int:
        return self.mesh.n_nodes

    # -- operator actions ---------------------------------------------------
    def solve_A(self, x):
        return self._A_lu.solve(np.asarray(x, dtype=float))

    def apply_mass_inverse(self, x):
        x = np.asarray(x, dtype=float)
        if self._chol is None:
            return x / (self.mass_lumped if x.ndim == 1 else self.mass_lumped[:, None])
        return self._M_lu.solve(x)

    def apply_precision(self, v):
        """Γ_prior^{-1} v = A M^{-1} A v."""
        return self.A @ self.apply_mass_inverse(self.A @ v)

    def apply_covariance(self, v):
        """Γ_prior v = A^{-1} M A^{-1} v."""
        w = self.solve_A(v)
        w = self._mass_apply(w)
        return self.solve_A(w)

    def _mass_apply(self, x):
        if self._chol is None:
            return x * (self.mass_lumped if x.ndim == 1 else self.mass_lumped[:, None])
        return self.M @ x

    def whiten(self, v):
        """M^{-1/2} A v; its squared 2-norm is the prior-precision norm of v."""
        av = self.A @ np.asarray(v, dtype=float)
        if self._chol is None:
            return av / (self._sqrt_ml if av.ndim == 1 else self._sqrt_ml[:, None])
        return sla.solve_triangular(self._chol, av, lower=True)

    def unwhiten(self, beta):
        """A^{-1} M^{1/2} beta, the inverse of :meth:`whiten`."""
        beta = np.asarray(beta, dtype=float)
        if self._chol is None:
            x = beta * (self._sqrt_ml if beta.ndim == 1 else self._sqrt_ml[:, None])
        else:
            x = self._chol @ beta
        return self.solve_A(x)

    def unwhiten_transpose(self, x):
        """(A^{-1} M^{1/2})^T x = M^{1/2} A^{-1} x (A is symmetric)."""
        w = self.solve_A(x)
        if self._chol is None:
            return w * (self._sqrt_ml if w.ndim == 1 else self._sqrt_ml[:, None])
        return self._chol.T @ w

    def precision_norm_sq(self, v) -> float:
        w = self.whiten(v)
        return float(w @ w)

    def mass_norm(self, v) -> float:
        """Norm induced by the consistent mass matrix, independent of ``mass_mode``."""
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(max(v @ (self.M @ v), 0.0)))

    def sample(self, rng, n=None):
        """Draw prior samples; ``n=None`` returns one vector, else an (d_m, n) array."""
        eta = rng.standard_normal(self.dim if n is None else (self.dim, n))
        fluct = self.unwhiten(eta)
        return fluct + (self.m_prior if n is None else self.m_prior[:, None])

    # -- dense oracles (small meshes only) ---------------------------------
    def dense_covariance(self) -> np.ndarray:
        if self.dim > 4096:
            raise ValueError("dense covariance limited to d_m <= 4096")
        Ainv = np.linalg.inv(self.A.toarray())
        Mm = np.diag(self.mass_lumped) if self._chol is None else self.M.toarray()
        cov = Ainv @ Mm @ Ainv
        return 0.5 * (cov + cov.T)

    def dense_precision(self) -> np.ndarray:
        Ad = self.A.toarray()
        if self._chol is None:
            return Ad @ (Ad / self.mass_lumped[:, None])
        return Ad @ np.linalg.solve(self.M.toarray(), Ad)


def assemble_operators(mesh: StructuredMesh, material: MaterialMap, mass_mode="lumped") -> GaussianPrior:
    return GaussianPrior(mesh, material, mass_mode=mass_mode)


def prior_sample(prior: GaussianPrior, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return prior.sample(rng)


def prior_norms(prior: GaussianPrior, v) -> PriorNorms:
    w = prior.whiten(v)
    return PriorNorms(float(w @ w), prior.mass_norm(v), w)
