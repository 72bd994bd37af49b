"""Glue between RunConfig, the numerical modules and on-disk artifacts."""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import __version__, io
from .config import ConfigError, RunConfig
from .forward import ForwardModel, SimulationConfig, synthesize_data
from .geometry import GaussianPrior, build_geometry
from .laplace import LaplacePosterior, compute_map, information_gain, randomized_gevp
from .metrics import eig_sum_relative_error, map_relative_error
from .reduction import ReducedBases, TrainingSet, _initial_observable, build_bases, generate_training_set


def write_run_manifest(directory, cfg: RunConfig, command, inputs=(), extra=None):
    """resolved.cfg plus a manifest with tool version, input hashes and output hashes."""
    directory = io.ensure_dir(directory)
    cfg.write(directory / "resolved.cfg")
    entries = {"tool": "lanoboed", "version": __version__, "command": command, "config_hash": io.file_hash(directory / "resolved.cfg")}
    for p in inputs:
        p = Path(p)
        for f in sorted(p.glob("*.manifest")) if p.is_dir() else [p]:
            entries[f"input.{f.parent.name}/{f.name}"] = io.file_hash(f)
    for f in sorted(directory.iterdir()):
        if f.is_file() and f.name != "run.manifest":
            entries[f"output.{f.name}"] = io.file_hash(f)
    entries.update(extra or {})
    io.write_manifest(directory / "run.manifest", entries)


@dataclass
class Problem:
    """Geometry, prior and forward model built from one configuration."""

    cfg: RunConfig

    @cached_property
    def geometry(self):
        return build_geometry(self.cfg.nx, self.cfg.ny, self.cfg.domain_size_mm, self.cfg.region_spec(), self.cfg.material)

    @property
    def mesh(self):
        return self.geometry[0]

    @property
    def material(self):
        return self.geometry[1]

    @cached_property
    def prior(self):
        return GaussianPrior(self.mesh, self.material)

    @cached_property
    def sim_config(self):
        c = self.cfg
        return SimulationConfig(T=c.T, dt=c.dt, n_obs=c.K, noise_std=c.noise_std, reaction=c.reaction)

    @cached_property
    def forward(self):
        return ForwardModel(self.mesh, self.material, self.sim_config)

    @property
    def noise_precision(self):
        return 1.0 / self.cfg.noise_std**2

    def truth(self, index=0):
        """Ground-truth parameter number ``index`` and its noisy full-design data."""
        ss = np.random.SeedSequence(self.cfg.named_seed("truth"), spawn_key=(index,))
        m = self.prior.sample(np.random.default_rng(ss))
        F = self.forward.pto(m)
        noise_seed = np.random.SeedSequence(self.cfg.named_seed("noise"), spawn_key=(index,))
        return m, synthesize_data(F, self.cfg.noise_std, noise_seed)

    def full_posterior(self, y, xi, m0=None, **map_kwargs):
        res = compute_map(self.forward, self.prior, y, xi, self.noise_precision, m0=m0, **map_kwargs)
        lam, W = randomized_gevp(res.lin, self.prior, xi, self.cfg.rank, self.cfg.oversampling, self.noise_precision, self.cfg.named_seed("gevp"))
        post = LaplacePosterior(res.m, lam, W, np.asarray(xi).copy(), np.asarray(y).copy())
        return post, res

    def build_bases(self, threads=1):
        c = self.cfg
        return build_bases(self.forward, self.prior, c.r_m, c.r_f, c.n_dis, c.n_pca, c.named_seed("bases"), c.oversampling, threads)

    def training_data(self, bases, which="train", threads=1):
        n = self.cfg.n_train if which == "train" else self.cfg.n_test
        seed = self.cfg.named_seed("train_data" if which == "train" else "test_data")
        return generate_training_set(self.forward, self.prior, bases, n, seed, threads)

    def beta_f0(self, bases):
        return bases.encode_f(_initial_observable(self.forward))


class Workspace:
    """Artifact layout under one output directory.

    out/geometry, out/bases, out/data/{train,test}, out/models/<kind>, and one
    directory per analysis subcommand.
    """

    def __init__(self, cfg: RunConfig, out, threads=1):
        self.cfg = cfg
        self.out = Path(out)
        self.threads = threads
        self.problem = Problem(cfg)

    def path(self, *parts):
        return self.out.joinpath(*parts)

    def _require(self, path, key, hint):
        if not Path(path).exists():
            raise ConfigError(f"missing input {key}: {path} not found; run `lanoboed {hint}` first", key)

    def bases(self) -> ReducedBases:
        d = self.path("bases")
        self._require(d / "bases.manifest", "bases", "reduce")
        b = ReducedBases.load(d)
        if b.r_m != self.cfg.r_m or b.r_f != self.cfg.r_f:
            raise ConfigError(f"stored bases have ranks ({b.r_m}, {b.r_f}) but the config asks for ({self.cfg.r_m}, {self.cfg.r_f})", "r_m")
        return b

    def data(self, which) -> TrainingSet:
        d = self.path("data", which)
        self._require(d / "data.manifest", f"data.{which}", "gen-data")
        return TrainingSet.load(d)

    def params(self, kind=None):
        from .surrogate.params import SurrogateParams

        kind = kind or self.cfg.surrogate
        d = self.path("models", kind)
        self._require(d / "checkpoint.manifest", f"models.{kind}", f"train --set surrogate={kind}")
        return SurrogateParams.load(d)

    def trained_kinds(self):
        return [k for k in ("lano", "neural-ode", "per-step") if self.path("models", k, "checkpoint.manifest").exists()]

    def model_inputs(self):
        """Existing bases and surrogate checkpoint directories, for manifest hashing."""
        dirs = [self.path("bases"), self.path("models", self.cfg.surrogate)]
        return [d for d in dirs if d.is_dir()]

    def surrogate(self, kind=None, backend=None):
        from .surrogate.inference import SurrogateModel

        bases = self.bases()
        return SurrogateModel(self.params(kind), bases, self.problem.prior, self.problem.beta_f0(bases), self.cfg.noise_std, backend)


@dataclass
class InferenceComparison:
    map_re: np.ndarray
    eig_sum_re: np.ndarray  # reduced Hessian at the encoded full MAP
    eig_sum_re_own: np.ndarray  # reduced Hessian at the surrogate's own MAP
    ig_full: np.ndarray
    ig_surrogate: np.ndarray
    lam_full: list
    lam_surrogate: list
    time_full: float
    time_surrogate: float


def compare_inference(problem: Problem, sur, n_real, xi=None, start=0, log=None) -> InferenceComparison:
    """Full vs surrogate MAP, spectrum and IG over ``n_real`` synthetic data sets."""
    K = problem.forward.K
    xi = np.ones(K, dtype=int) if xi is None else np.asarray(xi)
    out = {k: [] for k in ("mre", "es", "eso", "igf", "igs", "lf", "ls")}
    tf = ts = 0.0
    for i in range(start, start + n_real):
        _, y = problem.truth(i)
        t = time.perf_counter()
        post, _ = problem.full_posterior(y, xi)
        igf = information_gain(post, problem.prior)
        tf += time.perf_counter() - t
        t = time.perf_counter()
        spost = sur.posterior(y, xi)
        ts += time.perf_counter() - t
        matched, _ = sur.reduced_gevp_ig(sur.bases.encode_m(post.m_map, problem.prior), xi)
        out["mre"].append(map_relative_error(post.m_map, spost.beta_map, sur.bases, problem.prior))
        out["es"].append(eig_sum_relative_error(post.eigenvalues, matched.eigenvalues))
        out["eso"].append(eig_sum_relative_error(post.eigenvalues, spost.eigenvalues))
        out["igf"].append(igf)
        out["igs"].append(spost.ig)
        out["lf"].append(post.eigenvalues)
        out["ls"].append(matched.eigenvalues)
        if log:
            log(f"realization {i}: MAP-re {100 * out['mre'][-1]:.2f}%  eig-sum re {100 * out['es'][-1]:.2f}%  IG full {igf:.3f} surrogate {spost.ig:.3f}")
    arr = lambda k: np.array(out[k])
    return InferenceComparison(arr("mre"), arr("es"), arr("eso"), arr("igf"), arr("igs"), out["lf"], out["ls"], tf, ts)
