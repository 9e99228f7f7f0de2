"""Inner-loop descent mechanics and gradient estimators."""

import numpy as np
import pytest

from pfsgd import ControlSchedule, TimeGrid, make_rng
from pfsgd.lq import LqParams, lq_model, make_gradient_kernel
from pfsgd.particle_filter import ParticleCloud
from pfsgd.sgd import (
    SgdConfig,
    StepSchedule,
    full_gradient_oracle,
    optimize_at_time,
    sgd_gradient_sample,
    sgd_update,
)

import oracles


def test_step_schedule_values_and_validation():
    sched = StepSchedule(0.2, 50.0)
    assert sched(0) == pytest.approx(0.2)
    assert sched(50) == pytest.approx(0.1)
    assert sched(150) == pytest.approx(0.05)
    assert StepSchedule(0.3)(10**6) == pytest.approx(0.3)  # no decay
    with pytest.raises(ValueError):
        StepSchedule(0.0)
    with pytest.raises(ValueError):
        StepSchedule(0.1, 0.0)


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(L=0)
    with pytest.raises(ValueError):
        SgdConfig(L=1, projection_bounds=(1.0, 1.0))
    cfg = SgdConfig(L=5)
    assert cfg.step_schedule(0) == pytest.approx(0.1)


def test_sgd_update_arithmetic_and_projection():
    ctrl = ControlSchedule(2, np.array([[1.0, -1.0], [0.5, 0.0]]))
    grad = np.array([[10.0, -10.0], [1.0, 2.0]])
    out = sgd_update(ctrl, grad, eta=0.1)
    np.testing.assert_allclose(out.values, [[0.0, 0.0], [0.4, -0.2]])
    assert out.start_index == 2

    clipped = sgd_update(ctrl, grad, eta=1.0, projection_bounds=(-2.0, 2.0))
    np.testing.assert_allclose(clipped.values, [[-2.0, 2.0], [-0.5, -2.0]])


def test_cloud_and_schedule_must_agree_on_start_node():
    params = LqParams()
    grid = TimeGrid(1.0, 6)
    model = lq_model(params, grid)
    cloud = ParticleCloud.from_samples(np.zeros((3, 4)), time_index=2)
    with pytest.raises(ValueError):
        optimize_at_time(model, grid, cloud, ControlSchedule.zeros(1, 6, 4), SgdConfig(L=1), make_rng(0))


def test_zero_gradient_model_keeps_schedule():
    model = oracles.scalar_linear_model(a=0.2, sig=0.3)  # zero cost => zero gradient
    grid = TimeGrid(1.0, 6)
    cloud = ParticleCloud.from_samples(np.ones((4, 1)), time_index=0)
    init = ControlSchedule(0, 0.7 * np.ones((7, 1)))
    out = optimize_at_time(model, grid, cloud, init, SgdConfig(L=30), make_rng(1))
    np.testing.assert_array_equal(out.values, init.values)


def test_gradient_sample_shapes_and_determinism():
    params = LqParams()
    grid = TimeGrid(1.0, 8)
    model = lq_model(params, grid)
    ctrl = ControlSchedule(3, 0.2 * make_rng(2).standard_normal((6, 4)))
    g1, path1 = sgd_gradient_sample(model, grid, ctrl, np.zeros(4), make_rng(3))
    g2, path2 = sgd_gradient_sample(model, grid, ctrl, np.zeros(4), make_rng(3))
    assert g1.shape == (6, 4)
    assert path1.states.shape == (6, 4)
    np.testing.assert_array_equal(g1, g2)
    np.testing.assert_array_equal(path1.states, path2.states)


def test_optimize_at_time_fast_kernel_equals_generic():
    params = LqParams()
    grid = TimeGrid(1.0, 10)
    model = lq_model(params, grid)
    kernel = make_gradient_kernel(params, grid)
    cloud = ParticleCloud.from_samples(0.1 * make_rng(4).standard_normal((6, 4)), time_index=0)
    init = ControlSchedule.zeros(0, 10, 4)
    cfg = SgdConfig(L=40)
    out_generic = optimize_at_time(model, grid, cloud, init, cfg, make_rng(5))
    out_kernel = optimize_at_time(model, grid, cloud, init, cfg, make_rng(5), gradient_fn=kernel)
    np.testing.assert_allclose(out_kernel.values, out_generic.values, rtol=1e-11, atol=1e-13)


def test_oracle_single_particle_single_path_equals_one_sample():
    params = LqParams()
    grid = TimeGrid(1.0, 7)
    model = lq_model(params, grid)
    ctrl = ControlSchedule(0, 0.3 * make_rng(6).standard_normal((8, 4)))
    x = 0.2 * make_rng(7).standard_normal(4)
    cloud = ParticleCloud.from_samples(x[None, :], time_index=0)

    mean, se = full_gradient_oracle(model, grid, ctrl, cloud, paths_per_particle=1, rng=make_rng(8))
    sample, _ = sgd_gradient_sample(model, grid, ctrl, x, make_rng(8))
    np.testing.assert_allclose(mean, sample, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(se, np.zeros_like(se))


def test_single_samples_average_to_oracle():
    params = LqParams()
    grid = TimeGrid(1.0, 6)
    model = lq_model(params, grid)
    ctrl = ControlSchedule(0, 0.25 * np.ones((7, 4)))
    cloud = ParticleCloud.from_samples(0.3 * make_rng(9).standard_normal((5, 4)), time_index=0)

    mean, se = full_gradient_oracle(model, grid, ctrl, cloud, paths_per_particle=400, rng=make_rng(10))

    rng = make_rng(11)
    draws = []
    for _ in range(2000):
        x = cloud.particles[int(rng.integers(cloud.size))]
        g, _ = sgd_gradient_sample(model, grid, ctrl, x, rng)
        draws.append(g)
    draws = np.array(draws)
    sample_mean = draws.mean(axis=0)
    sample_se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    pooled = np.hypot(sample_se, se)
    assert np.all(np.abs(sample_mean - mean) <= 4.0 * pooled + 1e-12)


def test_optimize_descends_on_deterministic_quadratic():
    # sigma = 0 keeps every gradient sample exact, so SGD must reduce the
    # deterministic cost monotonically-in-effect from the zero start
    params = LqParams(sigma=0.0)
    grid = TimeGrid(1.0, 10)
    model = lq_model(params, grid)
    cloud = ParticleCloud.from_samples(np.zeros((1, 4)), time_index=0)
    init = ControlSchedule.zeros(0, 10, 4)
    out = optimize_at_time(model, grid, cloud, init, SgdConfig(L=300), make_rng(12))
    before = oracles.discrete_cost(model, grid, init, np.zeros(4))
    after = oracles.discrete_cost(model, grid, out, np.zeros(4))
    assert after < 0.5 * before
