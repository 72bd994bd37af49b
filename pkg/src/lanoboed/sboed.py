"""Sequential Bayesian optimal experimental design over observation times.

Three interchangeable inference models implement the small protocol used by
the conditional-EIG estimator:

    model.K, model.noise_std
    model.prior_state()            -> posterior object for "no data yet"
    model.sample(post, rng)        -> parameter draw from a posterior
    model.simulate(theta)          -> (K, d_y) observables
    model.posterior(y, xi, warm)   -> posterior object with attribute ``ig``
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import io
from .forward import NewtonDivergence
from .laplace import LaplacePosterior, MapConvergenceError, compute_map, information_gain, posterior_sample, randomized_gevp

log = logging.getLogger(__name__)


class TooManyFailures(RuntimeError):
    pass


# -- designs -------------------------------------------------------------------
@dataclass
class Design:
    K: int
    d: int
    xi: np.ndarray = None
    frozen: int = 0  # entries [0, frozen) are fixed

    def __post_init__(self):
        if self.xi is None:
            self.xi = np.zeros(self.K, dtype=int)
        self.xi = np.asarray(self.xi, dtype=int)
        if self.xi.shape != (self.K,) or np.any((self.xi != 0) & (self.xi != 1)):
            raise ValueError("design must be a binary vector of length K")
        if not 1 <= self.d <= self.K:
            raise ValueError("budget must satisfy 1 <= d <= K")
        if self.xi.sum() > self.d:
            raise ValueError("design exceeds its budget")

    @property
    def complete(self):
        return int(self.xi.sum()) == self.d

    def completions(self):
        """All designs that keep the frozen prefix and complete the budget."""
        rem = self.d - int(self.xi[: self.frozen].sum())
        free = range(self.frozen, self.K)
        for combo in itertools.combinations(free, rem):
            xi = self.xi.copy()
            xi[self.frozen :] = 0
            xi[list(combo)] = 1
            yield xi

    def n_completions(self):
        rem = self.d - int(self.xi[: self.frozen].sum())
        return math.comb(self.K - self.frozen, rem)


def bitstring(xi) -> str:
    return "".join(str(int(v)) for v in xi)


def uniform_design(K, d) -> np.ndarray:
    """Evenly spaced times ending at the horizon: indices round(j K / d) - 1, j = 1..d."""
    xi = np.zeros(K, dtype=int)
    xi[[int(round(j * K / d)) - 1 for j in range(1, d + 1)]] = 1
    return xi


# -- inference models --------------------------------------------------------------
@dataclass
class LGPosterior:
    mean: np.ndarray
    cov: np.ndarray
    ig: float
    chol: np.ndarray = None


class LinearGaussianModel:
    """Exact Gaussian inference for an affine PtO map (closed-form oracle model)."""

    def __init__(self, problem):
        self.problem = problem
        self.noise_std = math.sqrt(problem.noise_var)

    @property
    def K(self):
        return self.problem.K

    def prior_state(self):
        cov = self.problem.prior_cov.copy()
        return LGPosterior(self.problem.prior_mean.copy(), cov, 0.0, np.linalg.cholesky(cov))

    def simulate(self, theta):
        return self.problem.forward(theta)

    def posterior(self, y, xi, warm=None):
        mean, cov, kl = self.problem.posterior_kl(xi, y)
        return LGPosterior(mean, cov, kl)

    def sample(self, post, rng):
        if post.chol is None:
            post.chol = np.linalg.cholesky(post.cov)
        return post.mean + post.chol @ rng.standard_normal(len(post.mean))


@dataclass
class FullPosterior:
    laplace: LaplacePosterior | None
    ig: float
    m_map: np.ndarray


class FullModel:
    """Full-order PDE model with the low-rank Laplace posterior."""

    def __init__(self, forward, prior, rank, oversampling=10, map_options=None, gevp_seed=0):
        self.forward = forward
        self.prior = prior
        self.rank = rank
        self.p = oversampling
        self.noise_std = forward.config.noise_std
        self.map_options = map_options or {}
        self.gevp_seed = gevp_seed

    @property
    def K(self):
        return self.forward.K

    def prior_state(self):
        return FullPosterior(None, 0.0, self.prior.m_prior.copy())

    def sample(self, post, rng):
        if post.laplace is None:
            return self.prior.sample(rng)
        return posterior_sample(post.laplace, self.prior, rng)

    def simulate(self, theta):
        return self.forward.pto(theta)

    def posterior(self, y, xi, warm=None):
        xi = np.asarray(xi)
        if not np.any(xi):
            return self.prior_state()
        res = compute_map(self.forward, self.prior, y, xi, 1.0 / self.noise_std**2, m0=warm, **self.map_options)
        lam, W = randomized_gevp(res.lin, self.prior, xi, self.rank, self.p, 1.0 / self.noise_std**2, self.gevp_seed)
        lp = LaplacePosterior(res.m, lam, W, xi.copy(), np.asarray(y).copy())
        return FullPosterior(lp, information_gain(lp, self.prior), res.m)


class SurrogateInferenceModel:
    """Reduced-space inference through a trained surrogate (parameters are beta vectors)."""

    def __init__(self, surrogate):
        self.sur = surrogate
        self.noise_std = surrogate.noise_std

    @property
    def K(self):
        return self.sur.K

    def prior_state(self):
        from .surrogate.inference import SurrogatePosterior

        r = self.sur.r_m
        return SurrogatePosterior(np.zeros(r), np.zeros(r), np.eye(r), np.zeros(self.K, dtype=int))

    def sample(self, post, rng):
        from .surrogate.inference import reduced_posterior_sample

        return reduced_posterior_sample(post, rng)

    def simulate(self, theta):
        return self.sur.simulate(theta)

    def posterior(self, y, xi, warm=None):
        return self.sur.posterior(y, xi, warm)


# -- state and conditional EIG ---------------------------------------------------------
@dataclass
class SboedState:
    K: int
    d: int
    step: int = 0  # first mutable index (0-based)
    xi_star: np.ndarray = None
    y_star: np.ndarray = None
    posterior: object = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.xi_star is None:
            self.xi_star = np.zeros(self.K, dtype=int)

    def design(self) -> Design:
        return Design(self.K, self.d, self.xi_star.copy(), frozen=self.step)

    def record(self, **entry):
        self.log.append(dict(entry))


@dataclass
class CeigResult:
    value: float
    std_err: float
    n_failed: int
    n_samples: int
    igs: np.ndarray


def sample_streams(seed, n):
    """Per-sample generators; identical for every candidate of a sweep (common random numbers).

    Children are built from explicit spawn keys rather than ``spawn`` so the
    parent is never mutated and repeated calls give the same streams.
    """
    if isinstance(seed, np.random.SeedSequence):
        entropy, key = seed.entropy, tuple(seed.spawn_key)
    else:
        entropy, key = seed, ()
    return [np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=key + (i,))) for i in range(n)]


def sweep_seed(seed, sweep):
    """Seed of the ``sweep``-th optimisation sweep of a run; sweep 0 is the static design."""
    return np.random.SeedSequence(seed, spawn_key=(sweep,))


def conditional_eig(model, state: SboedState, xi, n_samples, seed, allow_partial=False) -> CeigResult:
    """Nested Monte Carlo estimate of the expected terminal information gain."""
    xi = np.asarray(xi, dtype=int)
    if xi.shape != (state.K,):
        raise ValueError("candidate has the wrong length")
    if np.any(xi[: state.step] != state.xi_star[: state.step]):
        raise ValueError("candidate changes the frozen prefix")
    if not allow_partial and xi.sum() != state.d:
        raise ValueError("candidate does not complete the budget")
    if not np.any(xi):
        return CeigResult(0.0, 0.0, 0, n_samples, np.zeros(n_samples))
    post = state.posterior if state.posterior is not None else model.prior_state()
    prefix = np.flatnonzero(state.xi_star[: state.step])
    igs = []
    failed = 0
    for rng in sample_streams(seed, n_samples):
        theta = model.sample(post, rng)
        try:
            F = model.simulate(theta)
            y = F + model.noise_std * rng.standard_normal(F.shape)
            if prefix.size:
                y[prefix] = state.y_star[prefix]
            igs.append(model.posterior(y, xi).ig)
        except (MapConvergenceError, NewtonDivergence, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            failed += 1
            log.warning("cEIG sample failed: %s", exc)
            if failed > 0.1 * n_samples:
                raise TooManyFailures(f"{failed} of {n_samples} cEIG samples failed") from exc
    igs = np.asarray(igs)
    se = float(igs.std(ddof=1) / np.sqrt(len(igs))) if len(igs) > 1 else 0.0
    return CeigResult(float(igs.mean()), se, failed, n_samples, igs)


@dataclass
class DesignResult:
    best: np.ndarray
    value: float
    table: list  # (xi, ceig, std_err, wall seconds)
    strategy: str

    @property
    def n_evaluations(self):
        return len(self.table)


def optimize_design(model, state: SboedState, n_samples, seed, strategy="exhaustive", budget_cap=10_000) -> DesignResult:
    """Exhaustive search over completions (ties to the earliest times), greedy above ``budget_cap``."""
    design = state.design()
    rem = state.d - int(state.xi_star[: state.step].sum())
    if rem < 1:
        raise ValueError("no remaining budget")
    if state.K - state.step < rem:
        raise ValueError("empty feasible set: not enough times left")
    if strategy == "exhaustive" and design.n_completions() > budget_cap:
        log.info("%d completions exceed the cap %d; switching to greedy", design.n_completions(), budget_cap)
        strategy = "greedy"
    table = []

    def evaluate(xi, partial=False):
        t0 = time.perf_counter()
        res = conditional_eig(model, state, xi, n_samples, seed, allow_partial=partial)
        table.append((xi.copy(), res.value, res.std_err, time.perf_counter() - t0))
        return res.value

    if strategy == "exhaustive":
        best, best_val = None, -np.inf
        for xi in design.completions():
            val = evaluate(xi)
            if val > best_val:  # strict: lexicographic order breaks ties toward earlier times
                best, best_val = xi, val
        return DesignResult(best, best_val, table, strategy)
    if strategy != "greedy":
        raise ValueError(f"unknown strategy {strategy!r}")
    xi = state.xi_star.copy()
    xi[state.step :] = 0
    best_val = -np.inf
    for _ in range(rem):
        cand_best, cand_val = None, -np.inf
        for k in range(state.step, state.K):
            if xi[k]:
                continue
            trial = xi.copy()
            trial[k] = 1
            val = evaluate(trial, partial=True)
            if val > cand_val:
                cand_best, cand_val = trial, val
        xi, best_val = cand_best, cand_val
    return DesignResult(xi, best_val, table, strategy)


@dataclass
class AdaptiveResult:
    adaptive: np.ndarray
    static: np.ndarray
    y_star: np.ndarray
    state: SboedState
    n_evaluations: int
    sweeps: list


def adaptive_run(model, observe, d, n_samples, seed, strategy="exhaustive", budget_cap=10_000, on_sweep=None) -> AdaptiveResult:
    """Adaptive loop: optimise, observe at the first selected time, update, repeat.

    ``observe(k)`` returns the real data vector at candidate index k.
    """
    K = model.K
    state = SboedState(K, d, posterior=model.prior_state())
    state.y_star = None
    sweeps = []
    static = None
    n_eval = 0
    while int(state.xi_star.sum()) < d:
        res = optimize_design(model, state, n_samples, sweep_seed(seed, len(sweeps)), strategy, budget_cap)
        sweeps.append(res)
        n_eval += res.n_evaluations
        if static is None:
            static = res.best.copy()
        for xi, val, se, wall in res.table:
            state.record(step=state.step, candidate=bitstring(xi), ceig=val, std_err=se, wall=wall)
        t = int(np.flatnonzero(res.best[state.step :])[0]) + state.step
        y_t = np.asarray(observe(t), dtype=float)
        if state.y_star is None:
            state.y_star = np.zeros((K,) + y_t.shape)
        state.y_star[t] = y_t
        state.xi_star[t] = 1
        state.step = t + 1
        warm = getattr(state.posterior, "beta_map", None)
        state.posterior = model.posterior(state.y_star, state.xi_star, warm)
        state.record(step=t, candidate=bitstring(state.xi_star), ceig=float("nan"), std_err=float("nan"), wall=0.0, event="observe")
        if on_sweep is not None:
            on_sweep(state, res)
    return AdaptiveResult(state.xi_star.copy(), static, state.y_star, state, n_eval, sweeps)


def write_run_log(path, state: SboedState):
    rows = [[e["step"], e["candidate"], e["ceig"], e["std_err"], e["wall"], e.get("event", "ceig")] for e in state.log]
    io.write_csv(path, ["step", "candidate", "ceig", "std_err", "wall_seconds", "event"], rows)


# -- prefix-shift oracle ---------------------------------------------------------------
def prefix_shift_oracle(problem, prefix_xi, y_prefix, d, step=None):
    """Max over candidates of |terminal objective - prefix-conditioned objective - KL(prefix posterior || prior)|.

    Returns (max deviation, terminal values, conditioned values, constant).
    """
    prefix_xi = np.asarray(prefix_xi, dtype=int)
    K = problem.K
    if step is None:
        sel = np.flatnonzero(prefix_xi)
        step = int(sel[-1]) + 1 if sel.size else 0
    mu1, S1 = problem.posterior(prefix_xi, y_prefix)
    const = problem.kl_to_prior(mu1, S1)
    design = Design(K, d, prefix_xi.copy(), frozen=step)
    term, cond = [], []
    for xi in design.completions():
        term.append(problem.conditional_eig(xi, prefix_xi, y_prefix))
        cond.append(problem.conditional_eig_vs_prefix(xi, prefix_xi, y_prefix))
    term, cond = np.array(term), np.array(cond)
    return float(np.max(np.abs(term - cond - const))), term, cond, const
