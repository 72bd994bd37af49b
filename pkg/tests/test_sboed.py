import csv
from math import comb

import numpy as np
import pytest

from lanoboed.sboed import (
    Design,
    LinearGaussianModel,
    SboedState,
    TooManyFailures,
    adaptive_run,
    conditional_eig,
    optimize_design,
    sweep_seed,
    prefix_shift_oracle,
    uniform_design,
    write_run_log,
)
from lanoboed.verify import check_design_counts, linear_problem


@pytest.fixture(scope="module")
def lg4(linear8):
    fwd, prior, lg = linear8
    rng = np.random.default_rng(8)
    m_true = prior.sample(rng)
    y = lg.forward(m_true) + 0.05 * rng.standard_normal(lg.offset.shape)
    return LinearGaussianModel(lg), lg, y


def fresh(model, d):
    return SboedState(model.K, d, posterior=model.prior_state())


class ConstantModel:
    """Every posterior has the same IG, so all candidates tie."""

    K = 4
    noise_std = 1.0

    def __init__(self, fail=False):
        self.fail = fail

    def prior_state(self):
        return None

    def sample(self, post, rng):
        return rng.standard_normal(2)

    def simulate(self, theta):
        return np.zeros((self.K, 1))

    def posterior(self, y, xi, warm=None):
        if self.fail:
            raise ValueError("inner solve failed")
        return type("P", (), {"ig": 1.0})()


def test_empty_candidate_has_zero_value(lg4):
    model = lg4[0]
    res = conditional_eig(model, fresh(model, 2), np.zeros(4, int), 8, 0, allow_partial=True)
    assert res.value == 0.0


def test_candidate_validation(lg4):
    model = lg4[0]
    state = fresh(model, 2)
    with pytest.raises(ValueError):
        conditional_eig(model, state, np.ones(3, int), 4, 0)
    with pytest.raises(ValueError):
        conditional_eig(model, state, np.array([1, 1, 1, 0]), 4, 0)
    state.xi_star = np.array([1, 0, 0, 0])
    state.step = 1
    with pytest.raises(ValueError):
        conditional_eig(model, state, np.array([0, 1, 1, 0]), 4, 0)


def test_design_validation():
    with pytest.raises(ValueError):
        Design(4, 0)
    with pytest.raises(ValueError):
        Design(4, 1, np.array([1, 1, 0, 0]))
    with pytest.raises(ValueError):
        Design(4, 2, np.array([2, 0, 0, 0]))
    d = Design(5, 3, np.array([1, 0, 0, 0, 0]), frozen=2)
    comps = list(d.completions())
    assert len(comps) == d.n_completions() == comb(3, 2)
    assert all(c[0] == 1 and c[1] == 0 and c.sum() == 3 for c in comps)


def test_six_candidates_for_two_of_four(lg4):
    model = lg4[0]
    res = optimize_design(model, fresh(model, 2), 16, 0)
    assert res.n_evaluations == 6
    assert len({tuple(t[0]) for t in res.table}) == 6


def test_evaluation_counts():
    r = check_design_counts()
    assert r.passed, r.line()


@pytest.mark.parametrize("d", [1, 2, 3])
def test_adaptive_evaluations_bounded(lg4, d):
    model, lg, y = lg4
    res = adaptive_run(model, lambda k: y[k], d, 8, 0)
    assert res.n_evaluations <= comb(model.K + 1, d)
    assert res.adaptive.sum() == d


def test_exhaustive_argmax_matches_closed_form():
    _, prior, lg = linear_problem(K=5)
    model = LinearGaussianModel(lg)
    res = optimize_design(model, fresh(model, 2), 2000, 1)
    cands = [t[0] for t in res.table]
    exact = [lg.eig(xi) for xi in cands]
    assert np.array_equal(res.best, cands[int(np.argmax(exact))])


def test_full_budget_selects_everything(lg4):
    model, _, y = lg4
    res = adaptive_run(model, lambda k: y[k], model.K, 4, 0)
    assert np.all(res.adaptive == 1)
    observed = [e["step"] for e in res.state.log if e.get("event") == "observe"]
    assert observed == list(range(model.K))


def test_run_is_reproducible(lg4, tmp_path):
    model, _, y = lg4
    a = adaptive_run(model, lambda k: y[k], 2, 16, 5)
    b = adaptive_run(model, lambda k: y[k], 2, 16, 5)
    assert np.array_equal(a.adaptive, b.adaptive) and np.array_equal(a.static, b.static)
    write_run_log(tmp_path / "a.csv", a.state)
    write_run_log(tmp_path / "b.csv", b.state)
    ra = list(csv.reader(open(tmp_path / "a.csv")))
    rb = list(csv.reader(open(tmp_path / "b.csv")))
    assert ra[0] == ["step", "candidate", "ceig", "std_err", "wall_seconds", "event"]
    assert len(ra) == len(a.state.log) + 1
    # everything except wall-clock time is reproducible
    drop = lambda rows: [r[:4] + r[5:] for r in rows]
    assert drop(ra) == drop(rb)


def test_observation_times_strictly_increase(lg4):
    model, _, y = lg4
    res = adaptive_run(model, lambda k: y[k], 3, 8, 2)
    observed = [e["step"] for e in res.state.log if e.get("event") == "observe"]
    assert len(observed) == 3 and all(a < b for a, b in zip(observed, observed[1:]))
    assert np.array_equal(np.flatnonzero(res.adaptive), observed)


def test_static_design_is_first_sweep_argmax(lg4):
    model, _, y = lg4
    res = adaptive_run(model, lambda k: y[k], 2, 32, 9)
    first = optimize_design(model, fresh(model, 2), 32, sweep_seed(9, 0))
    assert np.array_equal(res.static, first.best)


def test_prefix_shift_without_data_is_zero(lg4):
    _, lg, y = lg4
    dev, term, cond, const = prefix_shift_oracle(lg, np.zeros(4, int), y, 2)
    assert const == 0.0
    assert dev <= 1e-10 and np.allclose(term, cond, rtol=1e-12)


def test_prefix_shift_with_data(lg4):
    _, lg, y = lg4
    dev, term, cond, const = prefix_shift_oracle(lg, np.array([0, 1, 0, 0]), y, 2)
    assert dev <= 1e-8 and const > 0
    assert int(np.argmax(term)) == int(np.argmax(cond))


def test_common_random_numbers_ranking(lg4):
    model, lg, _ = lg4
    rankings = []
    for seed in (0, 1):
        res = optimize_design(model, fresh(model, 2), 1024, seed)
        rankings.append([tuple(t[0]) for t in sorted(res.table, key=lambda t: -t[1])])
    cands = [t[0] for t in res.table]
    oracle = [tuple(c) for _, c in sorted(zip([-lg.eig(c) for c in cands], [tuple(c) for c in cands]))]
    assert rankings[0] == rankings[1] == oracle


def test_common_random_numbers_shared_across_candidates(lg4):
    model = lg4[0]
    state = fresh(model, 2)
    a = conditional_eig(model, state, np.array([1, 1, 0, 0]), 32, 3)
    b = conditional_eig(model, state, np.array([1, 1, 0, 0]), 32, 3)
    assert np.array_equal(a.igs, b.igs)


def test_greedy_fallback(lg4):
    model = lg4[0]
    res = optimize_design(model, fresh(model, 2), 16, 0, budget_cap=5)
    assert res.strategy == "greedy"
    assert res.best.sum() == 2
    assert res.n_evaluations == 4 + 3


def test_ties_go_to_earliest_times():
    res = optimize_design(ConstantModel(), SboedState(4, 2), 4, 0)
    assert np.array_equal(res.best, [1, 1, 0, 0])
    greedy = optimize_design(ConstantModel(), SboedState(4, 2), 4, 0, strategy="greedy")
    assert np.array_equal(greedy.best, [1, 1, 0, 0])


def test_too_many_failures():
    with pytest.raises(TooManyFailures):
        conditional_eig(ConstantModel(fail=True), SboedState(4, 2), np.array([1, 0, 1, 0]), 10, 0)


def test_no_remaining_budget():
    state = SboedState(4, 2, step=2, xi_star=np.array([1, 1, 0, 0]))
    with pytest.raises(ValueError):
        optimize_design(ConstantModel(), state, 4, 0)


def test_uniform_design():
    assert np.flatnonzero(uniform_design(10, 2)).tolist() == [4, 9]
    assert np.flatnonzero(uniform_design(6, 2)).tolist() == [2, 5]
    assert np.all(uniform_design(4, 4) == 1)
    assert uniform_design(7, 3).sum() == 3
