"""Acceptance criteria 1-11, one PASS/FAIL line each.

The desk pipeline (32x32 grid, default ranks and sizes) is built once per
session through the CLI and shared by criteria 7, 8 and 10; it takes most of
the suite's runtime. Set ``LANOBOED_ACCEPT_DIR`` to keep its artifacts between
sessions: stages whose manifest already exists are then skipped.
"""

import csv
import os
import subprocess
import sys
import time
from math import comb
from pathlib import Path

import numpy as np
import pytest

from lanoboed import cli, verify
from lanoboed.config import RunConfig
from lanoboed.io import read_manifest
from lanoboed.pipeline import Workspace, compare_inference

pytestmark = pytest.mark.slow

# matched budget for all three surrogates (the shipped default)
EPOCHS = 1000
SBOED_CFG = """
nx = 16
ny = 16
T = 6.0
K = 6
n_train = 128
n_test = 16
epochs = 300
design_d = 2
strategy = exhaustive
"""


def verdict(request, n, ok, detail):
    """Record the criterion line (echoed in the terminal summary), then assert."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    request.config.acceptance_lines[n] = line
    print(line)
    assert ok, line


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def stage(out, cmd, marker, *extra):
    """Run one CLI stage unless its manifest is already there; returns seconds spent."""
    if (Path(out) / marker / "run.manifest").exists():
        return 0.0
    t = time.perf_counter()
    code = cli.main([cmd, "--out", str(out), "-q", "--threads", str(os.cpu_count() or 1), *extra])
    assert code == 0, f"{cmd} exited with {code}"
    return time.perf_counter() - t


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = Path(os.environ.get("LANOBOED_ACCEPT_DIR") or tmp_path_factory.mktemp("desk"))
    ep = ("--set", f"epochs={EPOCHS}")
    seconds = 0.0
    seconds += stage(out, "gen-geometry", "geometry")
    seconds += stage(out, "reduce", "bases")
    seconds += stage(out, "gen-data", "data/test")
    for kind in ("lano", "neural-ode", "per-step"):
        seconds += stage(out, "train", f"models/{kind}", "--set", f"surrogate={kind}", *ep)
    seconds += stage(out, "eval-surrogate", "eval")
    stage(out, "bench", "bench")
    return out, seconds


@pytest.fixture(scope="session")
def desk_inference(desk):
    out, _ = desk
    ws = Workspace(RunConfig(), out)
    return compare_inference(ws.problem, ws.surrogate("lano"), 16)


def test_criterion_01_adjoints(request):
    dot, fd = verify.check_adjoint_dot(), verify.check_tangent_fd()
    secs = dot.seconds + fd.seconds
    ok = dot.value <= 1e-10 and fd.value <= 1e-4 and secs < 60
    verdict(request, 1, ok, f"dot test {dot.value:.1e}, finite differences {fd.value:.1e}, {secs:.1f}s")


def test_criterion_02_linear_gaussian(request):
    r = verify.check_linear_gaussian()
    verdict(request, 2, r.passed, f"{r.value:.1e} (MAP, spectrum and IG vs closed form) {r.detail}".rstrip())


def test_criterion_03_prefix_shift(request):
    r = verify.check_prefix_shift()
    verdict(request, 3, r.passed and r.seconds < 60, f"deviation {r.value:.1e} {r.detail}, {r.seconds:.1f}s".rstrip())


def test_criterion_04_conditional_eig(request):
    r = verify.check_conditional_eig()
    verdict(request, 4, r.passed, f"worst {r.value:.2f} standard errors {r.detail}".rstrip())


def test_criterion_05_eig_monotone(request):
    r = verify.check_eig_monotone()
    verdict(request, 5, r.passed, f"largest decrease {r.value:.1e} over all supersets, K = 5")


def test_criterion_06_lano_derivatives(request):
    fd, causal = verify.check_lano_fd(), verify.check_lano_causal()
    ok = fd.passed and fd.value <= 1e-6 and causal.passed and causal.value == 0.0
    verdict(request, 6, ok, f"Jacobian vs finite differences {fd.value:.1e}, masked sensitivity {causal.value:.1e}")


def test_criterion_07_surrogate_ordering(request, desk):
    out, seconds = desk
    errs = rows(out / "eval" / "errors.csv")
    by = lambda kind, col: np.array([float(r[col]) for r in errs if r["model"] == kind])
    K = len(by("lano", "day"))
    late = slice(K // 2, K)
    pto_lano, pto_ode = by("lano", "pto_err_pct")[-1], by("neural-ode", "pto_err_pct")[-1]
    jac_lano, jac_ps = by("lano", "jac_err_pct")[late].mean(), by("per-step", "jac_err_pct")[late].mean()
    ok = pto_lano < pto_ode and jac_lano < jac_ps and seconds < 7200
    verdict(
        request,
        7,
        ok,
        f"day-{K} PtO LANO {pto_lano:.2f}% vs neural-ODE {pto_ode:.2f}%; late-horizon Jacobian LANO {jac_lano:.2f}% vs per-step {jac_ps:.2f}%; pipeline {seconds / 60:.1f} min",
    )


def test_criterion_08_inference_agreement(request, desk_inference):
    cmp = desk_inference
    mre, es = cmp.map_re.mean(), cmp.eig_sum_re.mean()
    ok = len(cmp.map_re) == 16 and mre <= 0.05 and es <= 0.05
    verdict(request, 8, ok, f"mean MAP relative error {100 * mre:.2f}%, eigenvalue-sum error at matched MAP {100 * es:.2f}% (16 realizations)")


def test_criterion_09_sboed_run(request, tmp_path_factory):
    root = tmp_path_factory.mktemp("sboed16")
    cfg = root / "sboed.cfg"
    cfg.write_text(SBOED_CFG)
    out = root / "run"
    base = ["--config", str(cfg), "--out", str(out), "-q", "--threads", "1"]
    for cmd in ("gen-geometry", "reduce", "gen-data", "train", "run-sboed"):
        assert cli.main([cmd, *base]) == 0, cmd
    first = (out / "sboed" / "run_log.csv").read_text(), (out / "sboed" / "report.csv").read_text()
    assert cli.main(["run-sboed", *base]) == 0
    second = (out / "sboed" / "run_log.csv").read_text(), (out / "sboed" / "report.csv").read_text()
    drop_wall = lambda text: [r[:4] + r[5:] for r in csv.reader(text.splitlines())]
    same = drop_wall(first[0]) == drop_wall(second[0]) and first[1] == second[1]
    report = {r["design"]: r for r in rows(out / "sboed" / "report.csv")}
    ig_a = float(report["adaptive"]["terminal_ig_full_model"])
    ig_u = float(report["uniform"]["terminal_ig_full_model"])
    n_eval = int(read_manifest(out / "sboed" / "run.manifest")["n_evaluations"])
    ok = same and ig_a >= ig_u and n_eval <= comb(7, 2)
    verdict(
        request,
        9,
        ok,
        f"deterministic {same}; terminal IG adaptive {report['adaptive']['bitstring']} {ig_a:.4f} vs uniform {report['uniform']['bitstring']} {ig_u:.4f}; {n_eval} evaluations (cap {comb(7, 2)})",
    )


def test_criterion_10_speedup(request, desk):
    out, _ = desk
    table = {r["task"]: r for r in rows(out / "bench" / "timing.csv")}
    ig = table["Information Gain"]
    speedup = float(ig["full_s"]) / float(ig["surrogate_s"])
    verdict(request, 10, speedup >= 10, f"IG full {float(ig['full_s']):.2f}s vs surrogate {float(ig['surrogate_s']):.4f}s, {speedup:.0f}x")


def test_criterion_11_verify_suite(request, tmp_path):
    t = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "lanoboed.cli", "verify", "--out", str(tmp_path)], capture_output=True, text=True, timeout=1800)
    secs = time.perf_counter() - t
    res = rows(tmp_path / "verify" / "results.csv") if (tmp_path / "verify" / "results.csv").exists() else []
    ok = proc.returncode == 0 and secs <= 1800 and res and all(r["passed"] == "1" for r in res)
    verdict(request, 11, bool(ok), f"{len(res)} checks, exit {proc.returncode}, {secs / 60:.1f} min")
