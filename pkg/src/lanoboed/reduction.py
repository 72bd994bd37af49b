"""Derivative-informed input subspace, PCA output basis and training data."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .adjoints import LinearizationPoint
from .laplace import double_pass_eigh

log = logging.getLogger(__name__)


def parallel_map(fn, items, threads=1):
    """Ordered map; a thread pool when ``threads > 1`` (BLAS/LAPACK release the GIL)."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class ReducedBases:
    psi_m: np.ndarray  # (d_m, r_m), Γ_prior^{-1}-orthonormal
    dis_eigenvalues: np.ndarray
    psi_f: np.ndarray  # (d_y, r_F), orthonormal
    singular_values: np.ndarray
    f_mean: np.ndarray  # (d_y,)

    @property
    def r_m(self) -> int:
        return self.psi_m.shape[1]

    @property
    def r_f(self) -> int:
        return self.psi_f.shape[1]

    # input side is an oblique projection through the prior precision
    def encode_m(self, m, prior):
        m = np.asarray(m, dtype=float)
        if m.shape[0] != self.psi_m.shape[0]:
            raise ValueError("parameter has wrong length")
        diff = m - (prior.m_prior if m.ndim == 1 else prior.m_prior[:, None])
        return self.psi_m.T @ prior.apply_precision(diff)

    def decode_m(self, beta, prior):
        beta = np.asarray(beta, dtype=float)
        if beta.shape[0] != self.r_m:
            raise ValueError("coefficient vector has wrong length")
        out = self.psi_m @ beta
        return out + (prior.m_prior if beta.ndim == 1 else prior.m_prior[:, None])

    def encode_f(self, F):
        F = np.asarray(F, dtype=float)
        if F.shape[-1] != self.psi_f.shape[0]:
            raise ValueError("observable has wrong length")
        return (F - self.f_mean) @ self.psi_f

    def decode_f(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape[-1] != self.r_f:
            raise ValueError("coefficient vector has wrong length")
        return self.f_mean + beta @ self.psi_f.T

    def save(self, path):
        path = io.ensure_dir(path)
        arrays = {
            "psi_m": self.psi_m,
            "dis_eigenvalues": self.dis_eigenvalues,
            "psi_f": self.psi_f,
            "singular_values": self.singular_values,
            "f_mean": self.f_mean,
        }
        meta = {"r_m": self.r_m, "r_f": self.r_f}
        for name, arr in arrays.items():
            io.write_sbf(path / f"{name}.sbf", arr)
            meta[f"hash_{name}"] = io.array_hash(arr)
        io.write_manifest(path / "bases.manifest", meta)

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls(**{n: io.read_sbf(path / f"{n}.sbf") for n in ("psi_m", "dis_eigenvalues", "psi_f", "singular_values", "f_mean")})


class _AveragedGram:
    """Sample average of sum_k J_k^T J_k over a set of linearization points."""

    def __init__(self, lins, xi):
        self.lins = lins
        self.xi = xi

    def __call__(self, X):
        out = np.zeros_like(X)
        for lin in self.lins:
            out += lin.gn_hessian(self.xi, X, 1.0)
        return out / len(self.lins)


def compute_dis(forward, prior, n_samples, r, p=10, seed=0, threads=1, return_points=False):
    """Leading generalized eigenvectors of E[sum_k J_k^T J_k] against Γ_prior^{-1}."""
    if n_samples < 1:
        raise ValueError("need at least one parameter sample")
    rng = np.random.default_rng(seed)
    draws = prior.sample(rng, n_samples).T
    lins = parallel_map(lambda m: LinearizationPoint(forward, m), list(draws), threads)
    op = _AveragedGram(lins, np.ones(forward.K, dtype=int))

    def whitened(X):
        return prior.unwhiten_transpose(op(prior.unwhiten(X)))

    lam, V = double_pass_eigh(whitened, prior.dim, r, p, rng)
    if np.any(lam < -1e-8 * max(1.0, lam[0])):
        raise ValueError("DIS operator produced significantly negative eigenvalues")
    lam = np.maximum(lam, 0.0)
    psi = prior.unwhiten(V)
    return (psi, lam, lins) if return_points else (psi, lam)


def compute_pca(snapshots, r):
    """Mean-centred truncated SVD of a (n_snapshots, d_y) matrix."""
    X = np.asarray(snapshots, dtype=float)
    if X.ndim != 2 or X.shape[0] < r:
        raise ValueError(f"need at least r = {r} snapshots")
    mean = X.mean(axis=0)
    U, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    if s[0] == 0 or (r > 1 and s[r - 1] <= 1e-12 * s[0]):
        warnings.warn("snapshot matrix is rank deficient at the requested truncation", RuntimeWarning)
    return Vt[:r].T.copy(), mean, s


@dataclass
class TrainingSet:
    beta_m: np.ndarray  # (N, r_m)
    beta_f: np.ndarray  # (N, K + 1, r_F), column 0 is the encoded initial state
    beta_j: np.ndarray  # (N, K, r_F, r_m)
    m: np.ndarray | None = None  # (N, d_m) raw draws, kept for full-model evaluation
    observables: np.ndarray | None = None  # (N, K, d_y)

    def __len__(self):
        return self.beta_m.shape[0]

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return TrainingSet(self.beta_m[idx], self.beta_f[idx], self.beta_j[idx], pick(self.m), pick(self.observables))

    def save(self, path, extra=None):
        path = io.ensure_dir(path)
        meta = {"n_samples": len(self)}
        for name in ("beta_m", "beta_f", "beta_j", "m", "observables"):
            arr = getattr(self, name)
            if arr is None:
                continue
            io.write_sbf(path / f"{name}.sbf", arr)
            meta[f"hash_{name}"] = io.array_hash(arr)
        meta.update(extra or {})
        io.write_manifest(path / "data.manifest", meta)

    @classmethod
    def load(cls, path):
        path = Path(path)
        get = lambda n: io.read_sbf(path / f"{n}.sbf") if (path / f"{n}.sbf").exists() else None
        return cls(get("beta_m"), get("beta_f"), get("beta_j"), get("m"), get("observables"))


def reduced_jacobian(lin: LinearizationPoint, bases: ReducedBases) -> np.ndarray:
    """Psi_F^T J_k Psi_m for every k, shape (K, r_F, r_m).

    Tangent route (r_m columns) when r_m <= r_F, otherwise one batched adjoint
    sweep over K * r_F output directions.
    """
    K = lin.K
    if bases.r_m <= bases.r_f:
        JPsi = lin.tangent(bases.psi_m)  # (K, d_y, r_m)
        return np.einsum("yf,kym->kfm", bases.psi_f, JPsi)
    r_f = bases.r_f
    V = np.zeros((K, bases.psi_f.shape[0], K * r_f))
    for k in range(K):
        V[k, :, k * r_f : (k + 1) * r_f] = bases.psi_f
    G = lin.adjoint(V, np.ones(K, dtype=int))  # (d_m, K r_F)
    return (G.T @ bases.psi_m).reshape(K, r_f, bases.r_m)


def generate_training_set(forward, prior, bases: ReducedBases, n_samples, seed, threads=1, keep_raw=True) -> TrainingSet:
    """Prior draws, their encoded observables and encoded Jacobians."""
    rng = np.random.default_rng(seed)
    draws = [prior.sample(rng) for _ in range(n_samples)]
    beta_f0 = bases.encode_f(_initial_observable(forward))

    def one(m):
        lin = LinearizationPoint(forward, m)
        bj = reduced_jacobian(lin, bases)
        return bases.encode_m(m, prior), bases.encode_f(lin.observables), bj, lin.observables

    out = parallel_map(one, draws, threads)
    beta_m = np.array([o[0] for o in out])
    beta_f = np.array([np.vstack([beta_f0[None, :], o[1]]) for o in out])
    beta_j = np.array([o[2] for o in out])
    obs = np.array([o[3] for o in out]) if keep_raw else None
    return TrainingSet(beta_m, beta_f, beta_j, np.array(draws) if keep_raw else None, obs)


def _initial_observable(forward):
    u0 = forward.u0
    return u0 if forward.obs_nodes is None else u0[forward.obs_nodes]


def build_bases(forward, prior, r_m, r_f, n_dis, n_pca, seed, p=10, threads=1):
    """DIS from ``n_dis`` draws; PCA from ``n_pca`` fresh prior draws' observables."""
    ss = np.random.SeedSequence(seed)
    s_dis, s_pca = ss.spawn(2)
    psi_m, lam = compute_dis(forward, prior, n_dis, r_m, p, np.random.default_rng(s_dis), threads)
    rng = np.random.default_rng(s_pca)
    ms = [prior.sample(rng) for _ in range(n_pca)]
    snaps = np.concatenate(parallel_map(forward.pto, ms, threads), axis=0)
    psi_f, mean, s = compute_pca(snaps, r_f)
    return ReducedBases(psi_m, lam, psi_f, s[:r_f].copy(), mean)
