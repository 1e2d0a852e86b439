import math

import numpy as np
import pytest

from hawkes_gc.core import FitConfig, HawkesParams
from hawkes_gc.estimate import (
    fit_early_stopped_gd,
    fit_restart_sgd,
    fit_two_phase,
    fit_vanilla_gd,
    grid_search,
    phase1_pgd,
    phase2_bcd,
    select_rows,
)
from hawkes_gc.likelihood import Gradients, prepare, row_grad
from hawkes_gc.simulate import GenConfig, generate_synthetic_problem, sample_dataset

FAST = FitConfig(phase1_iters=200, phase1_halve_every=50)


@pytest.fixture(scope="module")
def poisson_data():
    return sample_dataset(HawkesParams([0.5], [[0.0]], 1.0), 5000.0, 1, seed=3)


@pytest.fixture(scope="module")
def small_problem():
    return generate_synthetic_problem(GenConfig(d=4, horizon=300.0, n_sequences=5, seed=4, neg_fraction=0.3))


def _grads_with_row_norms(norms):
    d = len(norms)
    d_A = np.zeros((d, d))
    d_A[:, 0] = norms
    return Gradients(np.zeros(d), d_A)


def test_select_rows_energy_example():
    norms = [0.1] * 10
    norms[3], norms[6] = 3.0, 2.0
    order, k = select_rows(_grads_with_row_norms(norms), 0.85)
    assert sorted(order[:k]) == [3, 6] and order[:2] == [3, 6]


def test_select_rows_tiny_fraction_takes_the_largest():
    order, k = select_rows(_grads_with_row_norms([0.5, 2.0, 1.0]), 1e-9)
    assert order[:k] == [1]


def test_select_rows_equal_norms_and_ties():
    order, k = select_rows(_grads_with_row_norms([1.0] * 5), 1.0)
    assert k == 5 and order == [0, 1, 2, 3, 4]


def test_select_rows_zero_gradient():
    assert select_rows(_grads_with_row_norms([0.0] * 3), 0.5)[1] == 0


def test_phase1_recovers_poisson_rate(poisson_data):
    res = phase1_pgd(poisson_data, 1.0, FitConfig())
    rate = poisson_data.n_events / poisson_data.total_horizon
    assert abs(res.params.mu[0] - 0.5) < 0.05 and abs(res.params.mu[0] - rate) < 0.05
    assert abs(res.params.A[0, 0]) < 0.05


def test_phase1_iterates_are_nonnegative_and_finite(small_problem):
    res = phase1_pgd(small_problem.dataset, small_problem.truth.beta, FAST)
    assert np.all(res.params.mu >= 0) and np.all(res.params.A >= 0)
    assert all(r.loglik is not None and math.isfinite(r.loglik) for r in res.trace.phase("phase1"))


def test_phase1_loglik_trend():
    rising = 0
    for seed in range(10):
        prob = generate_synthetic_problem(GenConfig(d=3, horizon=200.0, n_sequences=3, seed=seed))
        res = phase1_pgd(prob.dataset, prob.truth.beta, FitConfig(phase1_iters=300, phase1_halve_every=100))
        recs = res.trace.phase("phase1")
        k = len(recs) // 10
        rising += recs[-1].loglik >= recs[k - 1].loglik
    assert rising >= 9


def test_phase2_only_touches_selected_rows(small_problem):
    data, beta = small_problem.dataset, small_problem.truth.beta
    cfg = FAST.updated(p_select=0.5)
    p1 = phase1_pgd(data, beta, cfg)
    before_mu, before_A = p1.params.mu.copy(), p1.params.A.copy()
    fit = phase2_bcd(data, beta, cfg, p1)
    untouched = [i for i in range(4) if i not in fit.selected_rows]
    assert untouched
    for i in untouched:
        assert np.array_equal(fit.params_hat.A[i], before_A[i])
        assert fit.params_hat.mu[i] == before_mu[i]


def test_phase2_never_raises_row_gradient_norm(small_problem):
    data, beta = small_problem.dataset, small_problem.truth.beta
    cfg = FAST.updated(p_select=1.0)
    tab = prepare(data, beta)
    p1 = phase1_pgd(tab, beta, cfg)
    fit = phase2_bcd(tab, beta, cfg, p1)
    for i in fit.selected_rows:
        entry = np.linalg.norm(row_grad(p1.params.mu[i], p1.params.A[i], tab, i)[1])
        exit_ = np.linalg.norm(row_grad(p1.params.mu[i], fit.params_hat.A[i], tab, i)[1])
        assert exit_ <= entry


def test_phase2_stays_put_on_nonnegative_truth():
    truth = HawkesParams([0.3, 0.2, 0.4], [[0.0, 0.3, 0.0], [0.0, 0.0, 0.0], [0.2, 0.1, 0.0]], 1.0)
    data = sample_dataset(truth, 2000.0, 1, seed=8)
    p1 = phase1_pgd(data, 1.0, FitConfig())
    fit = phase2_bcd(data, 1.0, FitConfig(), p1)
    assert np.abs(fit.params_hat.A - p1.params.A).sum() < 0.1


def test_two_phase_is_deterministic(small_problem):
    a = fit_two_phase(small_problem.dataset, 0.8, FAST)
    b = fit_two_phase(small_problem.dataset, 0.8, FAST)
    assert a.params_hat == b.params_hat and a.selected_rows == b.selected_rows
    assert a.to_json(timings=False) == b.to_json(timings=False)


def test_fit_result_invariants(small_problem):
    fit = fit_two_phase(small_problem.dataset, 0.8, FAST)
    assert len(set(fit.selected_rows)) == len(fit.selected_rows)
    assert set(fit.selected_rows) <= set(range(4))
    assert math.isfinite(fit.end_phase1_loglik)
    its = [r.iteration for r in fit.trace.records]
    assert its == sorted(set(its))
    phases = [r.phase for r in fit.trace.records]
    assert phases.index("phase2") > max(i for i, p in enumerate(phases) if p == "phase1")


@pytest.mark.parametrize("fit", [fit_vanilla_gd, fit_early_stopped_gd])
def test_baselines_recover_poisson_rate(poisson_data, fit):
    res = fit(poisson_data, 1.0, FitConfig())
    assert abs(res.params_hat.mu[0] - 0.5) < 0.05


def test_early_stopped_terminates_finite(small_problem):
    for seed in range(3):
        res = fit_early_stopped_gd(small_problem.dataset, 0.8, FAST.updated(seed=seed))
        assert np.all(np.isfinite(res.params_hat.A))


def test_vanilla_records_divergence_instead_of_crashing(small_problem):
    res = fit_vanilla_gd(small_problem.dataset, 0.8, FAST, gamma=5.0, iters=50)
    assert np.all(np.isfinite(res.params_hat.A))
    assert isinstance(res.diverged, bool)


def test_restart_sgd_single_sequence_and_agreement():
    truth = HawkesParams([0.3, 0.2], [[0.0, 0.3], [0.0, 0.0]], 1.0)
    data = sample_dataset(truth, 1500.0, 1, seed=2)
    sgd = fit_restart_sgd(data, 1.0, FitConfig())
    two = fit_two_phase(data, 1.0, FitConfig())
    assert np.all(np.isfinite(sgd.params_hat.A))
    assert np.abs(sgd.params_hat.A - two.params_hat.A).sum() < 0.3
    assert np.abs(sgd.params_hat.mu - two.params_hat.mu).sum() < 0.1


def test_grid_search_single_point_equals_two_phase(small_problem):
    data = small_problem.dataset
    res = grid_search(data, [0.8], [0.0], [FAST.gamma1], FAST)
    direct = fit_two_phase(data, 0.8, FAST)
    assert res.fit.params_hat == direct.params_hat
    assert res.best["beta"] == 0.8 and len(res.table) == 1


def test_grid_search_table_and_parallel_agreement(small_problem):
    data = small_problem.dataset
    serial = grid_search(data, [0.6, 0.8, 1.0], [0.0, 0.1], [0.1], FAST, workers=1)
    parallel = grid_search(data, [0.6, 0.8, 1.0], [0.0, 0.1], [0.1], FAST, workers=2)
    assert len(serial.table) == 6
    assert all(math.isfinite(r["loglik"]) or r["loglik"] == -math.inf for r in serial.table)
    assert serial.table == parallel.table and serial.best == parallel.best
    assert serial.fit.params_hat == parallel.fit.params_hat
    assert serial.best["loglik"] == max(r["loglik"] for r in serial.table)


def test_grid_search_rejects_empty_grid(small_problem):
    with pytest.raises(ValueError):
        grid_search(small_problem.dataset, [], [0.0], [0.1], FAST)
