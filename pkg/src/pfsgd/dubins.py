"""Dubins vehicle benchmark: bearing-only tracking with heading control.

A unit-speed car (X, Y, theta) steers its heading rate to follow a quarter
circle from (0, 0) to (1, 1) in fixed time.  Two fixed platforms at (-1, 1)
and (2, 1) report noisy bearing angles; position is never observed directly.
The cost penalizes squared deviation of the position from the reference arc
along the way and at the terminal time, plus quadratic control effort.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import ControlSchedule, ModelSpec, TimeGrid
from .sgd import SgdConfig, StepSchedule

Array = np.ndarray

# minimum |Y - platform_y| before bearings are evaluated on a clamped value
DENOM_FLOOR = 1e-8


@dataclass(frozen=True)
class DubinsParams:
    """Benchmark constants: noise levels, cost weights, geometry, horizon."""

    sigma: float = 0.1
    obs_noise_var: float = 0.1
    R: float = 20.0
    Q: float = 20.0
    K: float = 1.0
    platforms: tuple[tuple[float, float], tuple[float, float]] = ((-1.0, 1.0), (2.0, 1.0))
    start: tuple[float, float] = (0.0, 0.0)
    heading0: float = math.pi / 2
    target_terminal: tuple[float, float] = (1.0, 1.0)
    T: float = 1.0
    N: int = 50

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.obs_noise_var <= 0:
            raise ValueError("obs_noise_var must be positive")
        if self.R <= 0 or self.Q <= 0 or self.K < 0:
            raise ValueError("cost weights must satisfy R > 0, Q > 0, K >= 0")
        if self.platforms[0] == self.platforms[1]:
            raise ValueError("platforms must be distinct")

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.N)


def reference_circle_path(params: DubinsParams, grid: TimeGrid) -> Array:
    """Reference positions s*(t_n), shape (N+1, 2).

    Quarter arc of the unit circle centered at (0, 1), traversed at constant
    angular rate so s*(0) = start and s*(T) = target: the unique circular arc
    through both endpoints with the given initial heading.
    """
    phase = (math.pi / 2) * grid.nodes / params.T
    return np.column_stack([np.sin(phase), 1.0 - np.cos(phase)])


def bearing_observation(params: DubinsParams, x: Array) -> Array:
    """Principal-branch bearings arctan((X - px) / (Y - py)) per platform.

    Accepts (3,) or (B, 3).  Denominators with magnitude below DENOM_FLOOR
    are clamped to +/-DENOM_FLOOR and a RuntimeWarning is issued: the bearing
    is undefined on the platform line Y = py.
    """
    x = np.asarray(x, dtype=float)
    pos_x = x[..., 0]
    pos_y = x[..., 1]
    out = []
    for px, py in params.platforms:
        denom = pos_y - py
        bad = np.abs(denom) < DENOM_FLOOR
        if np.any(bad):
            warnings.warn(
                "bearing denominator clamped: state on platform line Y = %g" % py,
                RuntimeWarning,
                stacklevel=2,
            )
            sign = np.where(np.signbit(denom), -1.0, 1.0)
            denom = np.where(bad, sign * DENOM_FLOOR, denom)
        out.append(np.arctan((pos_x - px) / denom))
    return np.stack(out, axis=-1)


def _node_index(grid: TimeGrid, t: float) -> int:
    idx = int(round((t - grid.t0) / grid.dt))
    if idx < 0 or idx > grid.N:
        raise ValueError(f"time {t!r} is outside the grid")
    return idx


def dubins_model(
    params: DubinsParams, grid: TimeGrid, reference: Optional[Array] = None
) -> ModelSpec:
    """ModelSpec for the steering problem on the given grid.

    `reference` overrides the default quarter-circle target with any
    (N+1, 2) array of positions.  Cost callbacks look the target up by
    node, so they are only defined at grid times.
    """
    if reference is None:
        ref = reference_circle_path(params, grid)
    else:
        ref = np.asarray(reference, dtype=float)
        if ref.shape != (grid.N + 1, 2):
            raise ValueError(f"reference must have shape {(grid.N + 1, 2)}, got {ref.shape}")
    sig_mat = np.diag([params.sigma, params.sigma, params.sigma**2])
    R, Q, K = params.R, params.Q, params.K

    def b(t, x, u):
        x = np.asarray(x, dtype=float)
        theta = x[..., 2]
        head = np.broadcast_to(np.asarray(u, dtype=float)[0], theta.shape)
        return np.stack([np.sin(theta), np.cos(theta), head], axis=-1)

    def sigma(t, x, u):
        return sig_mat

    def b_x(t, x, u):
        x = np.asarray(x, dtype=float)
        theta = x[..., 2]
        out = np.zeros(theta.shape + (3, 3))
        out[..., 0, 2] = np.cos(theta)
        out[..., 1, 2] = -np.sin(theta)
        return out

    def b_u(t, x, u):
        return np.array([[0.0], [0.0], [1.0]])

    def sigma_x(t, x, u):
        return np.zeros((3, 3, 3))

    def sigma_u(t, x, u):
        return np.zeros((3, 3, 1))

    def f(t, x, u):
        x = np.asarray(x, dtype=float)
        dev = x[..., :2] - ref[_node_index(grid, t)]
        u = np.asarray(u, dtype=float)
        return 0.5 * R * np.sum(dev**2, axis=-1) + 0.5 * K * float(u @ u)

    def f_x(t, x, u):
        x = np.asarray(x, dtype=float)
        dev = x[..., :2] - ref[_node_index(grid, t)]
        out = np.zeros(x.shape)
        out[..., :2] = R * dev
        return out

    def f_u(t, x, u):
        return K * np.asarray(u, dtype=float)

    def h(x):
        x = np.asarray(x, dtype=float)
        dev = x[..., :2] - ref[grid.N]
        return Q * np.sum(dev**2, axis=-1)

    def h_x(x):
        x = np.asarray(x, dtype=float)
        dev = x[..., :2] - ref[grid.N]
        out = np.zeros(x.shape)
        out[..., :2] = 2.0 * Q * dev
        return out

    def g_obs(x):
        return bearing_observation(params, x)

    return ModelSpec(
        dim_x=3,
        dim_u=1,
        dim_w=3,
        dim_obs=2,
        b=b,
        sigma=sigma,
        b_x=b_x,
        b_u=b_u,
        sigma_x=sigma_x,
        sigma_u=sigma_u,
        f=f,
        f_x=f_x,
        f_u=f_u,
        h=h,
        h_x=h_x,
        g_obs=g_obs,
        obs_scale_by_dt=False,
        obs_noise_variance=params.obs_noise_var,
    )


def x0_sampler(params: DubinsParams) -> Callable[[int, np.random.Generator], Array]:
    """Initial cloud factory: every particle at the known start pose."""
    pose = np.array([params.start[0], params.start[1], params.heading0])

    def sample(size: int, rng: np.random.Generator) -> Array:
        return np.tile(pose, (size, 1))

    return sample


def make_gradient_kernel(
    params: DubinsParams, grid: TimeGrid, reference: Optional[Array] = None
):
    """Fused single-sample gradient for optimize_at_time.

    Exploits the model structure: sigma_x = 0 and sigma_u = 0 kill every Z
    term, b_x couples only through the heading row, and the heading evolves
    independently of position.  Forward path and backward adjoint collapse
    to cumulative sums; the result matches the generic path-then-adjoint
    computation to rounding error and consumes the rng identically (one
    (steps, 3) Gaussian block).
    """
    ref = (
        reference_circle_path(params, grid)
        if reference is None
        else np.asarray(reference, dtype=float)
    )
    dt = grid.dt
    sqdt = math.sqrt(dt)
    sig, sig2 = params.sigma, params.sigma**2
    R, Q, K = params.R, params.Q, params.K

    def kernel(ctrl: ControlSchedule, x_init: Array, rng: np.random.Generator) -> Array:
        start = ctrl.start_index
        steps = grid.N - start
        u = ctrl.values[:, 0]
        x_init = np.asarray(x_init, dtype=float)
        dW = sqdt * rng.standard_normal((steps, 3))

        theta = np.empty(steps + 1)
        theta[0] = x_init[2]
        theta[1:] = x_init[2] + np.cumsum(u[:steps] * dt + sig2 * dW[:, 2])
        pos_x = np.empty(steps + 1)
        pos_y = np.empty(steps + 1)
        pos_x[0], pos_y[0] = x_init[0], x_init[1]
        pos_x[1:] = x_init[0] + np.cumsum(np.sin(theta[:-1]) * dt + sig * dW[:, 0])
        pos_y[1:] = x_init[1] + np.cumsum(np.cos(theta[:-1]) * dt + sig * dW[:, 1])

        dev_x = pos_x - ref[start:, 0]
        dev_y = pos_y - ref[start:, 1]
        adj1 = np.empty(steps + 1)
        adj2 = np.empty(steps + 1)
        adj1[steps] = 2.0 * Q * dev_x[steps]
        adj2[steps] = 2.0 * Q * dev_y[steps]
        if steps:
            adj1[:steps] = adj1[steps] + dt * np.cumsum((R * dev_x)[::-1])[::-1][1:]
            adj2[:steps] = adj2[steps] + dt * np.cumsum((R * dev_y)[::-1])[::-1][1:]
        heading_pull = np.cos(theta) * adj1 - np.sin(theta) * adj2
        adj3 = np.empty(steps + 1)
        adj3[steps] = 0.0
        if steps:
            adj3[:steps] = dt * np.cumsum(heading_pull[::-1])[::-1][1:]
        return (adj3 + K * u)[:, None]

    return kernel


def default_sgd_config(params: DubinsParams, L: int = 1000) -> SgdConfig:
    """Inner-loop settings used by the benchmark runs."""
    return SgdConfig(L=L, step_schedule=StepSchedule(0.1, 100.0))
