"""Independent reference implementations used only by the tests.

Everything here is written from the defining formulas with plain loops, on
purpose: these are the oracles the library is checked against, so they must
not share code paths with the package.
"""

import numpy as np

from pfsgd import ControlSchedule, ModelSpec, TimeGrid


def kalman_posterior_means(a, sig, m0, P0, grid, data, scale, var):
    """Exact filter for the scalar linear-Gaussian twin model.

    Dynamics  x_{k+1} = (1 + a dt) x_k + sig sqrt(dt) w_k
    datum     y_k     = scale * x_{k+1} + sqrt(var) e_k

    Returns the posterior means at nodes 1..N, one per assimilated datum.
    """
    dt = grid.dt
    F = 1.0 + a * dt
    Qn = sig**2 * dt
    m, P = float(m0), float(P0)
    means = np.empty(len(data))
    for k, y in enumerate(data):
        m, P = F * m, F * F * P + Qn
        gain = P * scale / (scale * scale * P + var)
        m = m + gain * (float(y) - scale * m)
        P = (1.0 - gain * scale) * P
        means[k] = m
    return means


def scalar_linear_model(a, sig, obs_scale_by_dt=True, obs_noise_variance=None):
    """dx = a x dt + sig dW, identity observation, zero cost."""
    return ModelSpec(
        dim_x=1,
        dim_u=1,
        dim_w=1,
        dim_obs=1,
        b=lambda t, x, u: a * x,
        sigma=lambda t, x, u: sig * np.ones_like(x)[..., None],
        b_x=lambda t, x, u: np.array([[a]]),
        b_u=lambda t, x, u: np.zeros((1, 1)),
        sigma_x=lambda t, x, u: np.zeros((1, 1, 1)),
        sigma_u=lambda t, x, u: np.zeros((1, 1, 1)),
        f=lambda t, x, u: np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0,
        f_x=lambda t, x, u: np.zeros(1),
        f_u=lambda t, x, u: np.zeros(1),
        h=lambda x: np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0,
        h_x=lambda x: np.zeros(1),
        g_obs=lambda x: x,
        obs_scale_by_dt=obs_scale_by_dt,
        obs_noise_variance=obs_noise_variance,
    )


def gaussian_x0(m0, P0):
    def sample(size, rng):
        return m0 + np.sqrt(P0) * rng.standard_normal((size, 1))

    return sample


def deterministic_path(model, grid, ctrl, x0):
    """Noise-free Euler states at nodes start..N (valid when sigma == 0)."""
    start = ctrl.start_index
    steps = grid.N - start
    states = np.empty((steps + 1, model.dim_x))
    states[0] = np.asarray(x0, dtype=float)
    for i in range(steps):
        t = grid.nodes[start + i]
        states[i + 1] = states[i] + grid.dt * np.asarray(
            model.b(t, states[i], ctrl.values[i]), dtype=float
        )
    return states


def discrete_cost(model, grid, ctrl, x0):
    """Right-endpoint quadrature of the running cost plus terminal cost."""
    states = deterministic_path(model, grid, ctrl, x0)
    start = ctrl.start_index
    total = 0.0
    for i in range(len(states) - 1):
        total += grid.dt * float(model.f(grid.nodes[start + i + 1], states[i + 1], ctrl.values[i]))
    return total + float(model.h(states[-1]))


def fd_cost_gradient(model, grid, ctrl, x0, eps=1e-5):
    """Central finite differences of `discrete_cost` in every schedule entry."""
    grad = np.zeros_like(ctrl.values)
    for i in range(len(ctrl.values)):
        for k in range(ctrl.values.shape[1]):
            up = ControlSchedule(ctrl.start_index, ctrl.values.copy())
            dn = ControlSchedule(ctrl.start_index, ctrl.values.copy())
            up.values[i, k] += eps
            dn.values[i, k] -= eps
            grad[i, k] = (discrete_cost(model, grid, up, x0) - discrete_cost(model, grid, dn, x0)) / (
                2.0 * eps
            )
    return grad
