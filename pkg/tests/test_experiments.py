"""Study harness, CSV layer, and the second-moment audit."""

from dataclasses import replace

import numpy as np
import pytest

from pfsgd import TimeGrid, make_rng, run_pf_sgd
from pfsgd.experiments import (
    RAW_HEADER,
    StudyConfig,
    StudyResult,
    TrialRow,
    aggregate_rows,
    convergence_vs_iterations,
    convergence_vs_particles,
    export_csv,
    fixed_control_cost,
    make_benchmark,
    moment_bound_audit,
    parse_raw_csv,
    run_study,
    run_trial,
    trial_seed,
)
from pfsgd.lq import LqParams, lq_model, x0_sampler
from pfsgd.model import ControlSchedule
from pfsgd.sgd import SgdConfig

import oracles


def test_study_config_validation(tmp_path):
    good = StudyConfig(
        benchmark="lq",
        particle_counts=(2, 8),
        iteration_rule="fixed",
        L=10,
        trials=2,
        base_seed=0,
        output_dir=str(tmp_path),
    )
    assert good.iterations_for(8) == 10
    squared = replace(good, iteration_rule="squared", L=None)
    assert squared.iterations_for(8) == 64

    with pytest.raises(ValueError):
        replace(good, benchmark="pendulum")
    with pytest.raises(ValueError):
        replace(good, particle_counts=(8, 2))
    with pytest.raises(ValueError):
        replace(good, particle_counts=())
    with pytest.raises(ValueError):
        replace(good, trials=0)
    with pytest.raises(ValueError):
        replace(good, iteration_rule="cubed")
    with pytest.raises(ValueError):
        replace(good, iteration_rule="fixed", L=None)


def test_trial_seed_is_stable_and_spread():
    a = trial_seed(7, 32, 1000, 0)
    assert a == trial_seed(7, 32, 1000, 0)
    others = {
        trial_seed(7, 32, 1000, 1),
        trial_seed(7, 64, 1000, 0),
        trial_seed(7, 32, 999, 0),
        trial_seed(8, 32, 1000, 0),
    }
    assert a not in others and len(others) == 4


def _rows():
    return [
        TrialRow("lq", 4, 10, 0, 1, 2.0, 5.0, 1.0),
        TrialRow("lq", 4, 10, 1, 2, 4.0, 6.0, 1.0),
        TrialRow("lq", 2, 10, 0, 3, 7.0, 8.0, 1.0),
    ]


def test_aggregate_rows_recomputes_mean_and_se():
    aggs = aggregate_rows(_rows())
    assert [(a.S, a.L) for a in aggs] == [(2, 10), (4, 10)]
    one = aggs[0]
    assert one.mean_error == 7.0 and one.std_error == 0.0 and one.trials == 1
    two = aggs[1]
    assert two.mean_error == pytest.approx(3.0)
    assert two.std_error == pytest.approx(np.std([2.0, 4.0], ddof=1) / np.sqrt(2))


def _desk_config(tmp_path):
    return StudyConfig(
        benchmark="lq",
        particle_counts=(2, 4),
        iteration_rule="fixed",
        L=10,
        trials=2,
        base_seed=0,
        output_dir=str(tmp_path),
    )


def test_export_and_parse_round_trip(tmp_path):
    rows = sorted(_rows(), key=lambda r: (r.S, r.L, r.trial))
    export_csv(StudyResult(_desk_config(tmp_path), rows), str(tmp_path))
    raw = (tmp_path / "raw.csv").read_bytes()
    assert b"\r" not in raw
    assert raw.decode().splitlines()[0] == RAW_HEADER
    back = parse_raw_csv(str(tmp_path / "raw.csv"))
    assert back == rows

    agg_lines = (tmp_path / "agg.csv").read_text().splitlines()
    assert agg_lines[0] == "S,L,mean_error,std_error,trials"
    assert len(agg_lines) == 3

    dat_lines = (tmp_path / "agg.dat").read_text().splitlines()
    assert dat_lines[0] == "# S mean_error"
    assert dat_lines[1].split() == ["2", "7"]


def test_float_round_trip_is_exact(tmp_path):
    val = float(np.float64(1.0) / 3.0)
    rows = [TrialRow("lq", 2, 3, 0, 11, val, val * 7.0, 0.123456789123)]
    export_csv(StudyResult(_desk_config(tmp_path), rows), str(tmp_path))
    back = parse_raw_csv(str(tmp_path / "raw.csv"))[0]
    assert back.error == val and back.cost == val * 7.0


def test_run_trial_is_deterministic():
    row_a, none_res = run_trial("lq", S=4, L=8, trial=0, base_seed=5)
    row_b, _ = run_trial("lq", S=4, L=8, trial=0, base_seed=5)
    assert none_res is None
    assert row_a.error == row_b.error and row_a.cost == row_b.cost
    assert row_a.seed == trial_seed(5, 4, 8, 0)
    _, kept = run_trial("lq", S=4, L=8, trial=0, base_seed=5, retain=True)
    assert kept is not None and kept.applied_controls.shape == (50, 4)


def test_run_study_desk_scale(tmp_path):
    cfg = StudyConfig(
        benchmark="lq",
        particle_counts=(2, 4),
        iteration_rule="fixed",
        L=6,
        trials=2,
        base_seed=3,
        output_dir=str(tmp_path / "a"),
    )
    result = run_study(cfg)
    assert [(r.S, r.trial) for r in result.rows] == [(2, 0), (2, 1), (4, 0), (4, 1)]
    aggs = result.aggregates
    assert len(aggs) == 2 and all(a.trials == 2 for a in aggs)
    # exported raw rows reload to the in-memory rows
    assert parse_raw_csv(str(tmp_path / "a" / "raw.csv")) == result.rows

    # a rerun writes an identical raw.csv apart from the wall-clock column
    rerun = run_study(replace(cfg, output_dir=str(tmp_path / "b")))

    def masked(d):
        lines = (tmp_path / d / "raw.csv").read_text().splitlines()
        return [",".join(line.split(",")[:-1]) for line in lines]

    assert masked("a") == masked("b")
    assert [r.error for r in rerun.rows] == [r.error for r in result.rows]


def test_convergence_wrappers_enforce_their_rules(tmp_path):
    cfg = StudyConfig(
        benchmark="lq",
        particle_counts=(2,),
        iteration_rule="squared",
        L=None,
        trials=1,
        base_seed=0,
        output_dir=str(tmp_path),
    )
    with pytest.raises(ValueError):
        convergence_vs_particles(cfg)  # needs the fixed-L rule
    with pytest.raises(ValueError):
        convergence_vs_iterations(replace(cfg, iteration_rule="fixed", L=4))
    out = convergence_vs_iterations(cfg)
    assert len(out.rows) == 1


def test_fixed_control_cost_is_deterministic_per_seed():
    bench = make_benchmark("lq")
    # constant nonzero schedule: the benchmark noise is control-scaled
    ones = ControlSchedule(0, np.ones((51, 4)))
    a = fixed_control_cost(bench.model, bench.grid, ones, bench.x0_sampler, make_rng(4, 0))
    b = fixed_control_cost(bench.model, bench.grid, ones, bench.x0_sampler, make_rng(4, 0))
    c = fixed_control_cost(bench.model, bench.grid, ones, bench.x0_sampler, make_rng(5, 0))
    assert a == b and a != c and np.isfinite(a)


def test_fixed_control_cost_constant_model_hand_value():
    base = oracles.scalar_linear_model(a=0.0, sig=0.3)
    model = replace(
        base,
        f=lambda t, x, u: np.ones(x.shape[:-1]) if x.ndim > 1 else 1.0,
        h=lambda x: np.full(x.shape[:-1], 5.0) if x.ndim > 1 else 5.0,
    )
    grid = TimeGrid(2.0, 10)
    cost = fixed_control_cost(
        model, grid, ControlSchedule.zeros(0, 10, 1), oracles.gaussian_x0(0.0, 1.0), make_rng(6, 0)
    )
    assert cost == pytest.approx(7.0, rel=1e-12)


def test_moment_audit_requires_retained_clouds():
    params = LqParams()
    grid = TimeGrid(1.0, 6)
    model = lq_model(params, grid)
    run = run_pf_sgd(
        model,
        grid,
        4,
        SgdConfig(L=3),
        x0_sampler(params),
        truth_rng=make_rng(1, 0),
        algo_rng=make_rng(1, 1),
    )
    with pytest.raises(ValueError):
        moment_bound_audit(model, grid, run)


def test_moment_audit_on_static_model():
    # b = 0 and sigma = 0 freeze the cloud: empirical second moments stay
    # constant while the recursion bound grows, so the audit must pass
    model = oracles.scalar_linear_model(a=0.0, sig=0.0)
    grid = TimeGrid(1.0, 8)
    run = run_pf_sgd(
        model,
        grid,
        16,
        SgdConfig(L=2),
        oracles.gaussian_x0(1.0, 0.25),
        truth_rng=make_rng(2, 0),
        algo_rng=make_rng(2, 1),
        retain_clouds=True,
    )
    report = moment_bound_audit(model, grid, run)
    assert report.ok
    assert report.kappa_hat == pytest.approx(min(run.like_ratio_min))
    assert report.max_ratio <= 1.0
    assert np.all(report.bound >= report.empirical - 1e-12)
    assert report.escape_frequency <= 3.0 * report.tail_target
    assert "max_ratio=" in report.summary() and "ok=True" in report.summary()


def test_moment_audit_classification_rule():
    from pfsgd.experiments import MomentAuditReport

    def report(max_ratio, escape):
        return MomentAuditReport(
            bound=np.ones(3),
            empirical=np.ones(3),
            kappa_hat=0.9,
            c_drift2=1.0,
            c_diffusion2=1.0,
            max_ratio=max_ratio,
            chebyshev_m=10.0,
            tail_target=0.01,
            escape_frequency=escape,
        )

    assert report(1.0, 0.03).ok
    assert not report(1.2, 0.0).ok  # bound exceeded
    assert not report(0.5, 0.05).ok  # tail escapes too often
    assert "ok=False" in report(1.2, 0.0).summary()


def test_moment_audit_rejects_bad_kappa():
    model = oracles.scalar_linear_model(a=0.0, sig=0.0)
    grid = TimeGrid(1.0, 4)
    run = run_pf_sgd(
        model,
        grid,
        8,
        SgdConfig(L=2),
        oracles.gaussian_x0(1.0, 0.25),
        truth_rng=make_rng(2, 0),
        algo_rng=make_rng(2, 1),
        retain_clouds=True,
    )
    with pytest.raises(ValueError):
        moment_bound_audit(model, grid, run, kappa_hat=1.5)
    with pytest.raises(ValueError):
        moment_bound_audit(model, grid, run, kappa_hat=0.0)
