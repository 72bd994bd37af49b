"""Accuracy and timing metrics comparing a surrogate against the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import io
from .laplace import ig_eigen_term

# Day-10 LANO errors at the original full scale; printed for orientation, never asserted.
REFERENCE_DAY_K = {"pto_percent": 2.27, "jacobian_percent": 1.57}


@dataclass
class ErrorStats:
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            raise ValueError("no samples")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("relative errors must be finite and nonnegative")
        return cls(float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, int(v.size))

    def percent(self) -> str:
        return f"{100 * self.mean:.2f}% ± {100 * self.std:.2f}% (n={self.n})"


@dataclass
class MetricsReport:
    kind: str
    pto: list[ErrorStats]  # one entry per day
    jacobian: list[ErrorStats]
    map_re: ErrorStats | None = None
    eig_sum_re: ErrorStats | None = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        for k, (p, j) in enumerate(zip(self.pto, self.jacobian), 1):
            yield [self.kind, k, 100 * p.mean, 100 * p.std, 100 * j.mean, 100 * j.std, p.n]

    def write_csv(self, path):
        header = ["model", "day", "pto_err_pct", "pto_err_std_pct", "jac_err_pct", "jac_err_std_pct", "n_samples"]
        io.write_csv(path, header, self.rows())


def mass_norm_rows(M, X):
    """Row-wise M-norms of X (N, d); M is a sparse or dense symmetric matrix."""
    X = np.atleast_2d(X)
    return np.sqrt(np.maximum(np.einsum("ij,ij->i", X, (M @ X.T).T), 0.0))


def pto_errors(F_true, F_pred, M=None):
    """Relative errors ‖F - F̂‖_M / ‖F‖_M, shape (N, K). ``M=None`` uses the Euclidean norm."""
    F_true = np.asarray(F_true, dtype=float)
    F_pred = np.asarray(F_pred, dtype=float)
    N, K, d = F_true.shape
    a = F_true.reshape(-1, d)
    b = F_pred.reshape(-1, d)
    if M is None:
        num, den = np.linalg.norm(a - b, axis=1), np.linalg.norm(a, axis=1)
    else:
        num, den = mass_norm_rows(M, a - b), mass_norm_rows(M, a)
    return (num / np.maximum(den, np.finfo(float).tiny)).reshape(N, K)


def jacobian_errors(J_true, J_pred):
    """Relative Frobenius errors per sample and day, inputs (N, K, r_F, r_m)."""
    num = np.linalg.norm(J_true - J_pred, axis=(2, 3))
    den = np.linalg.norm(J_true, axis=(2, 3))
    return num / np.maximum(den, np.finfo(float).tiny)


def surrogate_errors(model, test_set, mass=None, batch=64) -> MetricsReport:
    """Per-day PtO and reduced-Jacobian errors of ``model`` on a held-out set.

    The PtO reference is the stored full-space observable when available,
    otherwise the decoded reduced reference.
    """
    n = len(test_set)
    if n == 0:
        raise ValueError("test set is empty")
    bF, dJ = [], []
    for s in range(0, n, batch):
        f, _, j = model.evaluate(test_set.beta_m[s : s + batch])
        bF.append(f)
        dJ.append(j)
    bF = np.concatenate(bF)[:, 1:]
    dJ = np.concatenate(dJ)
    F_pred = model.bases.decode_f(bF)
    F_true = test_set.observables if test_set.observables is not None else model.bases.decode_f(test_set.beta_f[:, 1:])
    if mass is not None and F_true.shape[2] != mass.shape[0]:
        mass = None
    ep = pto_errors(F_true, F_pred, mass)
    ej = jacobian_errors(test_set.beta_j, dJ)
    return MetricsReport(
        model.params.kind,
        [ErrorStats.of(ep[:, k]) for k in range(ep.shape[1])],
        [ErrorStats.of(ej[:, k]) for k in range(ej.shape[1])],
    )


def map_relative_error(m_map, beta_map, bases, prior) -> float:
    """‖m_MAP - Ψ_m β_MAP - m_prior‖_M / ‖m_MAP‖_M."""
    diff = m_map - bases.decode_m(beta_map, prior)
    return prior.mass_norm(diff) / prior.mass_norm(m_map)


def eig_sum_relative_error(lam_full, lam_red) -> float:
    """Relative difference of the eigenvalue term ½Σ[log(1+λ) - λ/(1+λ)]."""
    a = ig_eigen_term(np.asarray(lam_full))
    b = ig_eigen_term(np.asarray(lam_red))
    return abs(a - b) / max(abs(a), np.finfo(float).tiny)


def spectrum_rows(lam_full, lam_red):
    n = max(len(lam_full), len(lam_red))
    pad = lambda v: np.concatenate([np.asarray(v, float), np.full(n - len(v), np.nan)])
    return [[j + 1, a, b] for j, (a, b) in enumerate(zip(pad(lam_full), pad(lam_red)))]


# -- timing


@dataclass
class TimingRow:
    task: str
    full_s: float
    surrogate_s: float

    @property
    def speedup(self) -> float:
        return self.full_s / self.surrogate_s if self.surrogate_s > 0 else float("inf")


def best_time(fn, repeats=3) -> float:
    """Minimum wall time over ``repeats`` calls."""
    best = float("inf")
    for _ in range(max(1, repeats)):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def write_timing_table(path, rows):
    io.write_csv(path, ["task", "full_s", "surrogate_s", "speedup"], [[r.task, r.full_s, r.surrogate_s, r.speedup] for r in rows])


def format_timing_table(rows) -> str:
    out = [f"{'task':<18}{'full (s)':>12}{'surrogate (s)':>16}{'speedup':>10}"]
    for r in rows:
        out.append(f"{r.task:<18}{r.full_s:>12.4g}{r.surrogate_s:>16.4g}{r.speedup:>9.1f}x")
    return "\n".join(out)
