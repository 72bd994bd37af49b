"""Command-line front end: ``lanoboed <subcommand> [--config FILE] [--out DIR] ...``.

Exit status: 0 success, 1 usage or missing input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, load_config
from .pipeline import Workspace, compare_inference, write_run_manifest

log = logging.getLogger("lanoboed")

COMMANDS = ("gen-geometry", "gen-data", "reduce", "train", "eval-surrogate", "map", "eig", "ig", "design", "run-sboed", "bench", "verify")


class UsageError(Exception):
    pass


def _numerical_errors():
    from .forward import NewtonDivergence
    from .laplace import MapConvergenceError
    from .sboed import TooManyFailures
    from .surrogate.core import NonFiniteActivation
    from .surrogate.inference import AssemblyError
    from .surrogate.train import TrainingDivergence

    return (NewtonDivergence, MapConvergenceError, TooManyFailures, NonFiniteActivation, AssemblyError, TrainingDivergence, FloatingPointError, np.linalg.LinAlgError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="lanoboed", description="Sequential optimal design of observation times with a latent attention surrogate.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", default="run", help="workspace directory (default ./run)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads; 1 gives bit-reproducible runs")
    p.add_argument("--seed", type=int, help="master seed (u64); named seeds derive from it")
    p.add_argument("--strategy", choices=("exhaustive", "greedy"), help="design search strategy")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a configuration key")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.strategy is not None:
        overrides.append(f"strategy={args.strategy}")
    return load_config(args.config, overrides)


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_geometry(ws: Workspace):
    pb = ws.problem
    d = io.ensure_dir(ws.path("geometry"))
    mesh, mat = pb.mesh, pb.material
    io.write_sbf(d / "coordinates.sbf", mesh.coordinates())
    for name in ("labels", "diffusion", "m_prior", "sigma", "rho", "gamma", "delta"):
        arr = np.asarray(getattr(mat, name), dtype=float)
        io.write_sbf(d / f"{name}.sbf", arr)
        io.write_pgm(d / f"{name}.pgm", mesh.as_image(arr))
    sample = pb.prior.sample(np.random.default_rng(ws.cfg.named_seed("truth")))
    io.write_sbf(d / "prior_sample.sbf", sample)
    io.write_pgm(d / "prior_sample.pgm", mesh.as_image(sample))
    io.write_pgm(d / "initial_state.pgm", mesh.as_image(pb.forward.u0))
    write_run_manifest(d, ws.cfg, "gen-geometry", extra={"nx": mesh.nx, "ny": mesh.ny, "n_gray": int(np.sum(mat.labels == 0)), "n_white": int(np.sum(mat.labels == 1))})
    log.info("geometry %dx%d written to %s", mesh.nx, mesh.ny, d)


def cmd_reduce(ws: Workspace):
    t = time.perf_counter()
    bases = ws.problem.build_bases(ws.threads)
    d = ws.path("bases")
    bases.save(d)
    io.write_csv(d / "spectra.csv", ["index", "dis_eigenvalue", "pca_singular_value"], [[j + 1, a, b] for j, (a, b) in enumerate(zip(bases.dis_eigenvalues, bases.singular_values))])
    write_run_manifest(d, ws.cfg, "reduce", extra={"seconds": f"{time.perf_counter() - t:.2f}"})
    log.info("bases r_m=%d r_F=%d in %.1fs", bases.r_m, bases.r_f, time.perf_counter() - t)


def cmd_gen_data(ws: Workspace):
    from .metrics import pto_errors

    bases = ws.bases()
    for which in ("train", "test"):
        t = time.perf_counter()
        data = ws.problem.training_data(bases, which, ws.threads)
        d = ws.path("data", which)
        data.save(d, {"seed": ws.cfg.named_seed("train_data" if which == "train" else "test_data")})
        write_run_manifest(d, ws.cfg, "gen-data", inputs=[ws.path("bases")])
        log.info("%s set: %d samples in %.1fs", which, len(data), time.perf_counter() - t)
    # reconstruction error of the output basis on held-out samples
    rec = bases.decode_f(bases.encode_f(data.observables))
    M = ws.problem.prior.M if data.observables.shape[2] == ws.problem.prior.dim else None
    err = pto_errors(data.observables, rec, M)
    io.write_csv(ws.path("data", "test", "reconstruction.csv"), ["day", "mean_rel_err", "max_rel_err"], [[k + 1, err[:, k].mean(), err[:, k].max()] for k in range(err.shape[1])])
    log.info("held-out PCA reconstruction error: mean %.2f%%, max %.2f%%", 100 * err.mean(), 100 * err.max())


def _train_kind(ws: Workspace, kind):
    from .surrogate.params import init_baseline, init_lano
    from .surrogate.train import TrainConfig, train

    c = ws.cfg
    data = ws.data("train")
    val = ws.data("test") if ws.path("data", "test", "data.manifest").exists() else None
    K = data.beta_f.shape[1] - 1
    seed = c.named_seed("init")
    params = init_lano(K, c.r_m, c.r_f, c.d_h, c.d_a, seed=seed) if kind == "lano" else init_baseline(kind, K, c.r_m, c.r_f, c.baseline_width, seed=seed)
    tc = TrainConfig(epochs=c.epochs, lr=c.lr, weight_decay=c.weight_decay, w_j=c.w_j, batch_size=c.batch_size, seed=c.named_seed("shuffle"), teacher_forcing=c.teacher_forcing, threads=ws.threads)
    t = time.perf_counter()
    trained, hist = train(params, data, tc, val_data=val)
    d = ws.path("models", kind)
    trained.save(d, {"epochs": c.epochs, "train_seconds": f"{time.perf_counter() - t:.1f}"}, hist)
    write_run_manifest(d, c, "train", inputs=[ws.path("data", "train")])
    log.info("%s trained in %.1fs, final loss %.4e", kind, time.perf_counter() - t, hist[-1]["loss"])


def cmd_train(ws: Workspace):
    _train_kind(ws, ws.cfg.surrogate)


def cmd_eval_surrogate(ws: Workspace):
    from .metrics import REFERENCE_DAY_K, surrogate_errors

    kinds = ws.trained_kinds()
    if not kinds:
        raise ConfigError("missing input models: no trained surrogate found; run `lanoboed train` first", "models")
    test = ws.data("test")
    d = io.ensure_dir(ws.path("eval"))
    rows = []
    for kind in kinds:
        rep = surrogate_errors(ws.surrogate(kind), test, ws.problem.prior.M)
        rep.write_csv(d / f"errors_{kind}.csv")
        rows += list(rep.rows())
        last_p, last_j = rep.pto[-1], rep.jacobian[-1]
        log.info("%-10s day-%d PtO error %s, Jacobian error %s", kind, len(rep.pto), last_p.percent(), last_j.percent())
    io.write_csv(d / "errors.csv", ["model", "day", "pto_err_pct", "pto_err_std_pct", "jac_err_pct", "jac_err_std_pct", "n_samples"], rows)
    log.info("reference (full scale, LANO, last day): PtO %.2f%%, Jacobian %.2f%%", REFERENCE_DAY_K["pto_percent"], REFERENCE_DAY_K["jacobian_percent"])
    write_run_manifest(d, ws.cfg, "eval-surrogate", inputs=[ws.path("data", "test")] + [ws.path("models", k) for k in kinds])


def _comparison(ws: Workspace):
    sur = ws.surrogate()
    return compare_inference(ws.problem, sur, ws.cfg.n_realizations, ws.cfg.design_vector(), log=log.info)


def _full_only_maps(ws: Workspace, d):
    from .laplace import information_gain

    rows = []
    for i in range(ws.cfg.n_realizations):
        m_true, y = ws.problem.truth(i)
        post, res = ws.problem.full_posterior(y, ws.cfg.design_vector())
        rows.append([i, res.iterations, res.grad_norm, information_gain(post, ws.problem.prior)])
        if i == 0:
            io.write_sbf(d / "map_0.sbf", post.m_map)
            io.write_pgm(d / "map_0.pgm", ws.problem.mesh.as_image(post.m_map))
            io.write_pgm(d / "truth_0.pgm", ws.problem.mesh.as_image(m_true))
    io.write_csv(d / "full_map.csv", ["realization", "gn_iterations", "grad_norm", "ig_full"], rows)


def cmd_map(ws: Workspace):
    d = io.ensure_dir(ws.path("map"))
    if not ws.trained_kinds():
        log.info("no trained surrogate: computing full-model MAP points only")
        _full_only_maps(ws, d)
    else:
        cmp = _comparison(ws)
        io.write_csv(d / "map_re.csv", ["realization", "map_re_pct"], [[i, 100 * v] for i, v in enumerate(cmp.map_re)])
        log.info("MAP relative error: mean %.2f%% (std %.2f%%, n=%d)", 100 * cmp.map_re.mean(), 100 * cmp.map_re.std(), len(cmp.map_re))
    write_run_manifest(d, ws.cfg, "map", inputs=ws.model_inputs())


def cmd_eig(ws: Workspace):
    from .metrics import spectrum_rows

    d = io.ensure_dir(ws.path("eig"))
    cmp = _comparison(ws)
    io.write_csv(d / "spectrum.csv", ["index", "lambda_full", "lambda_surrogate"], spectrum_rows(np.mean(cmp.lam_full, 0), np.mean(cmp.lam_surrogate, 0)))
    io.write_csv(d / "eig_sum_re.csv", ["realization", "matched_map_pct", "own_map_pct"], [[i, 100 * a, 100 * b] for i, (a, b) in enumerate(zip(cmp.eig_sum_re, cmp.eig_sum_re_own))])
    log.info("eigenvalue-term relative error at matched MAP: mean %.2f%%", 100 * cmp.eig_sum_re.mean())
    write_run_manifest(d, ws.cfg, "eig", inputs=ws.model_inputs())


def cmd_ig(ws: Workspace):
    d = io.ensure_dir(ws.path("ig"))
    cmp = _comparison(ws)
    rows = [[i, a, b, abs(a - b) / a] for i, (a, b) in enumerate(zip(cmp.ig_full, cmp.ig_surrogate))]
    io.write_csv(d / "ig.csv", ["realization", "ig_full", "ig_surrogate", "rel_diff"], rows)
    log.info("IG full %.3f vs surrogate %.3f (means); time %.1fs vs %.2fs", cmp.ig_full.mean(), cmp.ig_surrogate.mean(), cmp.time_full, cmp.time_surrogate)
    write_run_manifest(d, ws.cfg, "ig", inputs=ws.model_inputs())


def design_model(ws: Workspace):
    from .sboed import FullModel, LinearGaussianModel, SurrogateInferenceModel

    c = ws.cfg
    if c.sboed_model == "surrogate":
        return SurrogateInferenceModel(ws.surrogate())
    if c.sboed_model == "full":
        return FullModel(ws.problem.forward, ws.problem.prior, c.rank, c.oversampling, gevp_seed=c.named_seed("gevp"))
    from .gaussian import LinearGaussianProblem
    from .pipeline import Problem

    lin = Problem(c.replace(reaction="linear"))
    return LinearGaussianModel(LinearGaussianProblem.from_forward(lin.forward, lin.prior))


def cmd_design(ws: Workspace):
    from .sboed import SboedState, bitstring, optimize_design, sweep_seed

    c = ws.cfg
    model = design_model(ws)
    state = SboedState(model.K, c.design_d, posterior=model.prior_state())
    res = optimize_design(model, state, c.n_s, sweep_seed(c.named_seed("sboed"), 0), c.strategy, c.budget_cap)
    d = io.ensure_dir(ws.path("design"))
    io.write_csv(d / "ceig.csv", ["candidate", "ceig", "std_err", "wall_seconds"], [[bitstring(x), v, s, w] for x, v, s, w in res.table])
    io.write_csv(d / "best.csv", ["design", "ceig", "strategy", "n_evaluations"], [[bitstring(res.best), res.value, res.strategy, res.n_evaluations]])
    write_run_manifest(d, c, "design", inputs=ws.model_inputs())
    log.info("best design %s (cEIG %.4f) after %d evaluations", bitstring(res.best), res.value, res.n_evaluations)


def terminal_ig(problem, y, xi):
    """IG of the full-model Laplace posterior given data at the selected times."""
    from .laplace import information_gain

    post, _ = problem.full_posterior(y, xi)
    return post, information_gain(post, problem.prior)


def cmd_run_sboed(ws: Workspace):
    from .laplace import pointwise_variance, prior_variance
    from .sboed import adaptive_run, bitstring, uniform_design, write_run_log

    c = ws.cfg
    pb = ws.problem
    model = design_model(ws)
    m_true, y_true = pb.truth(0)
    t = time.perf_counter()
    res = adaptive_run(model, lambda k: y_true[k], c.design_d, c.n_s, c.named_seed("sboed"), c.strategy, c.budget_cap)
    elapsed = time.perf_counter() - t
    d = io.ensure_dir(ws.path("sboed"))
    write_run_log(d / "run_log.csv", res.state)
    designs = {"adaptive": res.adaptive, "static": res.static, "uniform": uniform_design(pb.forward.K, c.design_d)}
    pvar = prior_variance(pb.prior)
    io.write_pgm(d / "std_prior.pgm", pb.mesh.as_image(np.sqrt(pvar)))
    rows, per_day = [], []
    for name, xi in designs.items():
        post, ig = terminal_ig(pb, y_true, xi)
        rows.append([name, bitstring(xi), ig])
        std = np.sqrt(np.maximum(pointwise_variance(post, pb.prior, pvar), 0.0))
        io.write_pgm(d / f"std_{name}.pgm", pb.mesh.as_image(std))
        sel = np.flatnonzero(xi)
        for j in range(1, len(sel) + 1):
            part = np.zeros_like(xi)
            part[sel[:j]] = 1
            per_day.append([name, int(sel[j - 1]) + 1, terminal_ig(pb, y_true, part)[1]])
    io.write_csv(d / "report.csv", ["design", "bitstring", "terminal_ig_full_model"], rows)
    io.write_csv(d / "per_day_ig.csv", ["design", "day_index", "ig_after_observation"], per_day)
    write_run_manifest(d, c, "run-sboed", inputs=ws.model_inputs(), extra={"n_evaluations": res.n_evaluations, "seconds": f"{elapsed:.1f}"})
    for name, bits, ig in rows:
        log.info("%-8s %s terminal IG %.4f", name, bits, ig)
    log.info("%d cEIG evaluations in %.1fs", res.n_evaluations, elapsed)


def run_bench(ws: Workspace):
    """Timing rows for PtO, MAP, eigenpairs and the whole IG pipeline."""
    from .laplace import compute_map, information_gain, randomized_gevp
    from .metrics import TimingRow, best_time

    c, pb = ws.cfg, ws.problem
    sur = ws.surrogate("lano")
    m, y = pb.truth(0)
    xi = c.design_vector()
    reps = c.bench_repeats

    def sur_pto():
        beta = sur.bases.encode_m(m, pb.prior)
        return sur.bases.decode_f(sur.evaluate(beta, tangents=False)[0][0, 1:])

    def full_ig():
        post, _ = pb.full_posterior(y, xi)
        return information_gain(post, pb.prior)

    res = compute_map(pb.forward, pb.prior, y, xi, pb.noise_precision)
    sres = sur.reduced_map(y, xi)
    return [
        TimingRow("PtO", best_time(lambda: pb.forward.pto(m), reps), best_time(sur_pto, reps)),
        TimingRow("MAP", best_time(lambda: compute_map(pb.forward, pb.prior, y, xi, pb.noise_precision), reps), best_time(lambda: sur.reduced_map(y, xi), reps)),
        TimingRow(
            "Eigenpairs",
            best_time(lambda: randomized_gevp(res.lin, pb.prior, xi, c.rank, c.oversampling, pb.noise_precision), reps),
            best_time(lambda: sur.reduced_gevp_ig(sres.beta, xi), reps),
        ),
        TimingRow("Information Gain", best_time(full_ig, reps), best_time(lambda: sur.posterior(y, xi).ig, reps)),
    ]


def kernel_bench(ws: Workspace, batch=(1, 16)):
    from .metrics import best_time
    from .surrogate.kernel import available_backends, lano_eval

    sur_params = ws.params("lano")
    bases = ws.bases()
    f0 = ws.problem.beta_f0(bases)
    rng = np.random.default_rng(0)
    out = []
    for B in batch:
        bm = rng.standard_normal((B, bases.r_m))
        for be in available_backends():
            out.append([be, B, best_time(lambda: lano_eval(sur_params.arrays, bm, f0, True, backend=be), 5)])
    return out


def cmd_bench(ws: Workspace):
    from .metrics import format_timing_table, write_timing_table

    rows = run_bench(ws)
    d = io.ensure_dir(ws.path("bench"))
    write_timing_table(d / "timing.csv", rows)
    io.write_csv(d / "kernel.csv", ["backend", "batch", "seconds"], kernel_bench(ws))
    write_run_manifest(d, ws.cfg, "bench", inputs=[ws.path("models", "lano"), ws.path("bases")])
    print(format_timing_table(rows))


def cmd_verify(ws: Workspace):
    from .verify import run_all

    results = run_all(log=print)
    d = io.ensure_dir(ws.path("verify"))
    io.write_csv(d / "results.csv", ["check", "passed", "value", "tolerance", "seconds", "detail"], [[r.name, int(r.passed), r.value, r.tolerance, r.seconds, r.detail] for r in results])
    write_run_manifest(d, ws.cfg, "verify")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


HANDLERS = {
    "gen-geometry": cmd_gen_geometry,
    "gen-data": cmd_gen_data,
    "reduce": cmd_reduce,
    "train": cmd_train,
    "eval-surrogate": cmd_eval_surrogate,
    "map": cmd_map,
    "eig": cmd_eig,
    "ig": cmd_ig,
    "design": cmd_design,
    "run-sboed": cmd_run_sboed,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        ws = Workspace(cfg, Path(args.out), args.threads)
        return int(HANDLERS[args.command](ws) or 0)
    except UsageError as exc:
        print(f"lanoboed: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        key = f" [key: {exc.key}]" if exc.key else ""
        print(f"lanoboed: error: {exc}{key}", file=sys.stderr)
        return 1
    except _numerical_errors() as exc:
        print(f"lanoboed: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
