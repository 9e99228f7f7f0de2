"""Stochastic gradient descent over the control schedule.

One gradient sample = one particle drawn from the current cloud, one forward
path simulated under the candidate schedule, one pathwise backward adjoint
solve reusing that path's noises, and the Hamiltonian control-derivative
assembled node by node.  `optimize_at_time` runs L such updates; the
`full_gradient_oracle` brute-forces the same expectation over every particle
with many paths each for bias checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fbsde import gradient_integrand, solve_adjoint_pathwise
from .model import ControlSchedule, ModelSpec, StatePath, TimeGrid, simulate_forward
from .particle_filter import ParticleCloud

Array = np.ndarray

# gradient_fn signature used by optimize_at_time (returns the gradient table
# only; the generic implementation wraps sgd_gradient_sample)
GradientFn = Callable[[ControlSchedule, Array, np.random.Generator], Array]


@dataclass(frozen=True)
class StepSchedule:
    """Step size eta_l = r0 / (1 + l / l0); l0 = None means constant r0."""

    r0: float
    l0: Optional[float] = None

    def __post_init__(self):
        if self.r0 <= 0:
            raise ValueError("r0 must be positive")
        if self.l0 is not None and self.l0 <= 0:
            raise ValueError("l0 must be positive")

    def __call__(self, l: int) -> float:
        if self.l0 is None:
            return self.r0
        return self.r0 / (1.0 + l / self.l0)


@dataclass(frozen=True)
class SgdConfig:
    """Inner-loop settings for one time step's control optimization."""

    L: int
    step_schedule: StepSchedule = field(default_factory=lambda: StepSchedule(0.1, 100.0))
    projection_bounds: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.projection_bounds is not None:
            lo, hi = self.projection_bounds
            if not lo < hi:
                raise ValueError("projection bounds must satisfy lo < hi")


def sgd_gradient_sample(
    model: ModelSpec,
    grid: TimeGrid,
    ctrl: ControlSchedule,
    x_init: Array,
    rng: np.random.Generator,
) -> tuple[Array, StatePath]:
    """One unbiased sample of the gradient table along the schedule.

    Simulates a single path from x_init, solves the pathwise adjoint along it
    (reusing the identical noises), and returns the integrand at every node
    i >= start paired with (X_i, u_i, Y_i, Z_i), plus the path itself.
    """
    path = simulate_forward(model, grid, ctrl, x_init, rng)
    adj = solve_adjoint_pathwise(model, grid, path, ctrl)
    nodes = grid.nodes
    start = ctrl.start_index
    grad = np.empty_like(ctrl.values)
    for i in range(len(ctrl.values)):
        grad[i] = gradient_integrand(
            model, nodes[start + i], path.states[i], ctrl.values[i], adj.Y[i], adj.Z[i]
        )
    return grad, path


def sgd_update(
    ctrl: ControlSchedule,
    grad: Array,
    eta: float,
    projection_bounds: Optional[tuple[float, float]] = None,
) -> ControlSchedule:
    """One descent step on every schedule entry, with optional box projection."""
    values = ctrl.values - eta * np.asarray(grad, dtype=float)
    if projection_bounds is not None:
        values = np.clip(values, projection_bounds[0], projection_bounds[1])
    return ControlSchedule(ctrl.start_index, values)


def optimize_at_time(
    model: ModelSpec,
    grid: TimeGrid,
    cloud: ParticleCloud,
    init_ctrl: ControlSchedule,
    cfg: SgdConfig,
    rng: np.random.Generator,
    gradient_fn: Optional[GradientFn] = None,
) -> ControlSchedule:
    """L stochastic gradient steps on the schedule from the current cloud.

    Each iteration draws one particle uniformly (the cloud is post-resampling,
    so uniform draws sample the filtering distribution), samples one gradient
    table, and descends with eta_l.  `gradient_fn` may supply a fused
    model-specific sampler; it must consume the rng exactly like the generic
    one (one index draw, then one (steps, q) Gaussian block).
    """
    if cloud.time_index != init_ctrl.start_index:
        raise ValueError("cloud time index must match the schedule start")
    if gradient_fn is None:
        def gradient_fn(c, x, r):
            g, _ = sgd_gradient_sample(model, grid, c, x, r)
            return g

    ctrl = ControlSchedule(init_ctrl.start_index, init_ctrl.values.copy())
    for l in range(cfg.L):
        j = int(rng.integers(cloud.size))
        grad = gradient_fn(ctrl, cloud.particles[j], rng)
        ctrl = sgd_update(ctrl, grad, cfg.step_schedule(l), cfg.projection_bounds)
    return ctrl


def _simulate_paths_batch(
    model: ModelSpec,
    grid: TimeGrid,
    ctrl: ControlSchedule,
    x_init: Array,
    rng: np.random.Generator,
) -> tuple[Array, Array]:
    """Forward paths for a batch of starting states; returns (states, noises).

    states has shape (steps+1, B, d), noises (steps, B, q).  Used by the
    brute-force oracle; per-path draws happen step by step so one stream
    serves the whole batch deterministically.
    """
    start = ctrl.start_index
    steps = grid.N - start
    x = np.atleast_2d(np.asarray(x_init, dtype=float))
    B = len(x)
    dt, sqdt = grid.dt, np.sqrt(grid.dt)
    nodes = grid.nodes
    states = np.empty((steps + 1, B, model.dim_x))
    noises = np.empty((steps, B, model.dim_w))
    states[0] = x
    for i in range(steps):
        u = ctrl.values[i]
        dW = sqdt * rng.standard_normal((B, model.dim_w))
        noises[i] = dW
        drift = np.asarray(model.b(nodes[start + i], states[i], u), dtype=float)
        sig = np.asarray(model.sigma(nodes[start + i], states[i], u), dtype=float)
        if sig.ndim == 2:
            noise_term = dW @ sig.T
        else:
            noise_term = np.einsum("bdq,bq->bd", sig, dW)
        states[i + 1] = states[i] + drift * dt + noise_term
    return states, noises


def full_gradient_oracle(
    model: ModelSpec,
    grid: TimeGrid,
    ctrl: ControlSchedule,
    cloud: ParticleCloud,
    paths_per_particle: int,
    rng: np.random.Generator,
) -> tuple[Array, Array]:
    """Brute-force mean gradient table over cloud x paths.

    Runs paths_per_particle independent paths from every particle, assembles
    the per-sample gradient tables in one batch, and returns (mean, std error)
    per schedule entry, weighting particles by the cloud weights.  This is the
    expensive estimator the single-sample SGD gradient must be unbiased for.
    """
    if paths_per_particle < 1:
        raise ValueError("paths_per_particle must be >= 1")
    S = cloud.size
    Lam = paths_per_particle
    B = S * Lam
    x0 = np.repeat(cloud.particles, Lam, axis=0)
    w = np.repeat(cloud.weights / Lam, Lam)
    states, noises = _simulate_paths_batch(model, grid, ctrl, x0, rng)
    steps = len(noises)
    start = ctrl.start_index
    nodes = grid.nodes
    dt = grid.dt
    d, q = model.dim_x, model.dim_w

    # batched backward sweep, bracket at (t_{i+1}, X_{i+1}, u_{t_i})
    Y = np.asarray(model.h_x(states[steps]), dtype=float)
    Y = np.broadcast_to(Y, (B, d)).copy()
    Z = np.zeros((B, d, q))
    grads = np.empty((steps + 1, B, model.dim_u))
    grads[steps] = gradient_integrand(
        model, nodes[start + steps], states[steps], ctrl.values[steps], Y, Z
    )
    for i in range(steps - 1, -1, -1):
        t_next = nodes[start + i + 1]
        x_next = states[i + 1]
        u_here = ctrl.values[i]
        Z_new = np.einsum("bd,bq->bdq", Y, noises[i]) / dt
        bx = np.broadcast_to(np.asarray(model.b_x(t_next, x_next, u_here), dtype=float), (B, d, d))
        sx = np.broadcast_to(
            np.asarray(model.sigma_x(t_next, x_next, u_here), dtype=float), (B, d, q, d)
        )
        fx = np.broadcast_to(np.asarray(model.f_x(t_next, x_next, u_here), dtype=float), (B, d))
        Y = Y + (np.einsum("bde,bd->be", bx, Y) + np.einsum("bdqe,bdq->be", sx, Z) + fx) * dt
        Z = Z_new
        grads[i] = gradient_integrand(model, nodes[start + i], states[i], ctrl.values[i], Y, Z)

    mean = np.einsum("b,ibm->im", w, grads)
    centered = grads - mean[:, None, :]
    var = np.einsum("b,ibm->im", w, centered**2)
    se = np.sqrt(var / B)
    return mean, se
