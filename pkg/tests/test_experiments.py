import json
import math

import numpy as np
import pytest

from hawkes_gc import experiments
from hawkes_gc.experiments import (
    DEFAULT_PLANS,
    ExperimentPlan,
    PlanError,
    aggregate,
    default_plan,
    read_plan,
    run_experiment,
    sign_pattern,
)

QUICK_FIT = {"phase1_iters": 60, "phase1_halve_every": 20, "max_inner_iters": 20}


def quick_plan(**kw):
    fields = dict(experiment="consistency", d=2, horizons=(40.0, 80.0), n_sequences=(2,), trials=3, seed=9,
                fit=QUICK_FIT)
    fields.update(kw)
    return ExperimentPlan(**fields)


@pytest.fixture(scope="module")
def quick_result():
    return run_experiment(quick_plan(), workers=1)


def test_aggregate_matches_naive_statistics(quick_result):
    for row in quick_result.table:
        recs = [r for r in quick_result.records if r["config"] == row["config"] and r["status"] == "ok"]
        for name in ("A_err", "mu_err", "shd"):
            values = sorted(r[name] for r in recs)
            n = len(values)
            median = values[n // 2] if n % 2 else (values[n // 2 - 1] + values[n // 2]) / 2
            mean = sum(values) / n
            std = math.sqrt(sum((v - mean) ** 2 for v in values) / n)
            assert row[f"{name}_median"] == pytest.approx(median, rel=1e-12)
            assert row[f"{name}_mean"] == pytest.approx(mean, rel=1e-12)
            assert row[f"{name}_std"] == pytest.approx(std, rel=1e-9, abs=1e-15)
        assert row["n_ok"] == 3 and row["n_failed"] == 0


def test_single_trial_aggregates_equal_the_trial():
    res = run_experiment(quick_plan(trials=1, horizons=(40.0,)), workers=1)
    (rec,), (row,) = res.records, res.table
    assert row["A_err_median"] == row["A_err_mean"] == rec["A_err"]
    assert row["A_err_std"] == 0.0


def test_rerun_and_parallel_are_identical(quick_result):
    def strip(records):
        return [{k: v for k, v in r.items() if k != "elapsed"} for r in records]

    again = run_experiment(quick_plan(), workers=1)
    parallel = run_experiment(quick_plan(), workers=2)
    assert strip(again.records) == strip(quick_result.records)
    assert strip(parallel.records) == strip(quick_result.records)
    assert [r["trial"] for r in parallel.records[:3]] == [0, 1, 2]


def test_trials_share_truth_across_configurations(quick_result):
    seeds = {(r["config"], r["trial"]): r["seed"] for r in quick_result.records}
    assert seeds[("horizon=40,n_sequences=2", 1)] == seeds[("horizon=80,n_sequences=2", 1)] == 10


def test_failed_trial_is_counted_and_excluded(monkeypatch):
    original = experiments._TRIALS["consistency"]

    def flaky(plan, config, seed):
        if seed == plan.seed + 1:
            raise FloatingPointError("boom")
        return original(plan, config, seed)

    monkeypatch.setitem(experiments._TRIALS, "consistency", flaky)
    res = run_experiment(quick_plan(horizons=(40.0,)), workers=1)
    failed = [r for r in res.records if r["status"] == "failed"]
    assert len(failed) == 1 and "FloatingPointError: boom" in failed[0]["error"]
    row = res.row("two_phase")
    assert row["n_ok"] == 2 and row["n_failed"] == 1
    ok = [r["A_err"] for r in res.records if r["status"] == "ok"]
    assert row["A_err_mean"] == pytest.approx(np.mean(ok))


def test_all_failed_configuration_still_reported():
    records = [{"config": "c", "trial": 0, "seed": 0, "method": "", "status": "failed", "error": "x"}]
    assert aggregate(records) == [{"config": "c", "method": "", "n_ok": 0, "n_failed": 1}]


def test_plan_validation():
    with pytest.raises(PlanError, match="experiment"):
        ExperimentPlan("nope")
    with pytest.raises(PlanError, match="allow_large_d"):
        ExperimentPlan("consistency", d=11)
    ExperimentPlan("consistency", d=11, allow_large_d=True)
    with pytest.raises(PlanError, match="unknown methods"):
        ExperimentPlan("baselines", methods=("magic",))
    with pytest.raises(PlanError, match="fit overrides"):
        ExperimentPlan("consistency", fit={"gamma1": -1.0})
    with pytest.raises(PlanError, match="trials"):
        ExperimentPlan("consistency", trials=0)
    with pytest.raises(PlanError, match="unknown plan fields"):
        ExperimentPlan.from_dict({"experiment": "consistency", "horizon": 3})


def test_plan_json_round_trip(tmp_path):
    plan = quick_plan(options={"note": 1})
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(plan.to_dict()))
    assert read_plan(path) == plan
    path.write_text("{not json")
    with pytest.raises(PlanError, match="not valid JSON"):
        read_plan(path)


def test_default_plans_are_valid():
    for name in DEFAULT_PLANS:
        plan = default_plan(name, trials=2)
        assert plan.trials == 2
    assert default_plan("multi_sequence").experiment == "consistency"
    with pytest.raises(PlanError):
        default_plan("missing")


def test_write_refuses_to_overwrite(tmp_path, quick_result):
    written = quick_result.write(tmp_path)
    assert sorted(p.name for p in written) == ["records.csv", "summary.csv", "summary.json"]
    with pytest.raises(FileExistsError):
        quick_result.write(tmp_path)
    quick_result.write(tmp_path, force=True)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["plan"]["experiment"] == "consistency" and len(summary["table"]) == 2


def test_beta_grid_selected_row_is_one_of_the_grid():
    res = run_experiment(ExperimentPlan("beta_grid", d=2, horizons=(60.0,), n_sequences=(2,), trials=1,
                                        beta_grid=(0.5, 1.0), fit=QUICK_FIT), workers=1)
    methods = [r["method"] for r in res.records]
    assert methods == ["beta=0.5", "beta=1", "selected"]
    sel = res.records[-1]
    assert sel["beta"] in (0.5, 1.0)
    best = max(res.records[:2], key=lambda r: r["phase1_loglik"])
    assert sel["A_err"] == best["A_err"]


def test_baselines_quick_run_has_every_method():
    res = run_experiment(ExperimentPlan("baselines", d=2, horizons=(60.0,), n_sequences=(2,), trials=1,
                                        methods=tuple(experiments.METHODS), fit=QUICK_FIT), workers=1)
    assert {r["method"] for r in res.table} == set(experiments.METHODS)
    assert all(r["status"] == "ok" for r in res.records)


def test_runtime_quick_run():
    res = run_experiment(ExperimentPlan("runtime", d=2, horizons=(30.0,), n_sequences=(5,), trials=1,
                                        evaluations=3), workers=4)
    assert {r["method"] for r in res.records} == {"surrogate_grad", "restart_grad"}
    assert all(r["seconds"] > 0 for r in res.records)


def test_sign_pattern():
    assert sign_pattern([[0.04, -0.3], [0.2, -0.01]], 0.05).tolist() == [[0, -1], [1, 0]]


def test_chains_quick_run():
    plan = ExperimentPlan("chains", trials=1, seed=3, options={"cohort_size": 60}, fit=QUICK_FIT)
    (rec,) = run_experiment(plan, workers=1).records
    assert rec["status"] == "ok", rec.get("error")
    assert rec["injected_first"] in (0.0, 1.0) and rec["control_quiet"] in (0.0, 1.0)
