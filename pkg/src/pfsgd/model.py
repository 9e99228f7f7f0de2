"""Controlled diffusion models on a uniform time grid.

Holds the data types shared by the whole package (model callbacks, control
schedules, simulated paths, observation records) plus the basic operations:
explicit Euler stepping, forward path simulation, synthetic observation
generation, and Monte Carlo cost evaluation.

State/coefficient callbacks follow a batching convention: every callback must
accept the state `x` either as a single vector of shape (d,) or as a stack of
shape (B, d), returning outputs with the matching leading axis.  The control
argument is always a single vector (m,); time is a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


class NumericOverflowError(RuntimeError):
    """A coefficient or state update produced a non-finite value."""


class DegenerateUpdateError(RuntimeError):
    """Bayesian reweighting underflowed: no particle carries any likelihood."""


def make_rng(base_seed, *key) -> np.random.Generator:
    """Counter-mode substream: identical (seed, key) yields an identical stream.

    Used to split independent streams hierarchically, e.g. by (trial,) or
    (study row, trial, role) without any sequential coupling between them.
    """
    key = tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(int(base_seed), spawn_key=key))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [t0, T] = [0, T] into N steps of width dt."""

    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"grid needs at least one step, got N={self.N}")
        if not self.T > 0.0:
            raise ValueError(f"horizon must be positive, got T={self.T}")

    @property
    def t0(self) -> float:
        return 0.0

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> Array:
        return np.linspace(0.0, self.T, self.N + 1)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficient bundle for a controlled SDE with partial observations.

    dX = b(t, X, u) dt + sigma(t, X, u) dW,   dim X = dim_x, dim W = dim_w
    cost = E[ sum_i f(t_{i+1}, X_{i+1}, u_i) dt + h(X_N) ]
    observations through g_obs, see `generate_observations`.

    Derivative layouts (single-state case):
      b_x     (d, d)     entry [i, j] = d b_i / d x_j
      b_u     (d, m)
      sigma_x (d, q, d)  entry [i, j, k] = d sigma_ij / d x_k
      sigma_u (d, q, m)
      f_x (d,), f_u (m,), h_x (d,)
    Batched states prepend an axis to every state-dependent output.

    Observation kernel: by default the recorded datum for a step is
    g_obs(x) * dt + noise with noise variance dt per component (the exact
    transition density of the discretized observation SDE).  Models that
    observe g_obs(x) directly with fixed-variance noise set
    obs_scale_by_dt=False and obs_noise_variance to that variance.
    """

    dim_x: int
    dim_u: int
    dim_w: int
    dim_obs: int
    b: Callable
    sigma: Callable
    b_x: Callable
    b_u: Callable
    sigma_x: Callable
    sigma_u: Callable
    f: Callable
    f_x: Callable
    f_u: Callable
    h: Callable
    h_x: Callable
    g_obs: Callable
    obs_scale_by_dt: bool = True
    obs_noise_variance: Optional[float] = None

    def obs_kernel(self, dt: float) -> tuple[float, float]:
        """(mean scale, noise variance) of the per-step observation kernel."""
        scale = dt if self.obs_scale_by_dt else 1.0
        var = dt if self.obs_noise_variance is None else float(self.obs_noise_variance)
        return scale, var

    def probe(self, t: float, x: Array, u: Array) -> None:
        """Evaluate every callback once and check output shapes/finiteness."""
        d, m, q, p = self.dim_x, self.dim_u, self.dim_w, self.dim_obs
        expected = {
            "b": (self.b(t, x, u), (d,)),
            "sigma": (self.sigma(t, x, u), (d, q)),
            "b_x": (self.b_x(t, x, u), (d, d)),
            "b_u": (self.b_u(t, x, u), (d, m)),
            "sigma_x": (self.sigma_x(t, x, u), (d, q, d)),
            "sigma_u": (self.sigma_u(t, x, u), (d, q, m)),
            "f": (self.f(t, x, u), ()),
            "f_x": (self.f_x(t, x, u), (d,)),
            "f_u": (self.f_u(t, x, u), (m,)),
            "h": (self.h(x), ()),
            "h_x": (self.h_x(x), (d,)),
            "g_obs": (self.g_obs(x), (p,)),
        }
        for name, (val, shape) in expected.items():
            arr = np.asarray(val, dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} returned shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericOverflowError(f"{name} returned non-finite values at probe point")


@dataclass
class ControlSchedule:
    """Piecewise-constant control u_{t_i} on grid nodes start_index..N."""

    start_index: int
    values: Array  # (n_entries, m)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.start_index < 0:
            raise ValueError("start_index must be non-negative")

    def entry(self, i: int) -> Array:
        """Control at global node index i."""
        return self.values[i - self.start_index]

    def last_index(self) -> int:
        return self.start_index + len(self.values) - 1

    def tail(self, new_start: int) -> "ControlSchedule":
        """Restriction to nodes new_start..last, values copied."""
        if new_start < self.start_index:
            raise ValueError("cannot extend a schedule backwards")
        return ControlSchedule(new_start, self.values[new_start - self.start_index :].copy())

    @staticmethod
    def zeros(start_index: int, last_index: int, dim_u: int) -> "ControlSchedule":
        return ControlSchedule(start_index, np.zeros((last_index - start_index + 1, dim_u)))


@dataclass
class StatePath:
    """States at nodes start_index..start_index+len-1 plus the driving noises.

    noises[i] is the Brownian increment used to move states[i] -> states[i+1];
    replaying them through euler_step reproduces states bitwise.
    """

    start_index: int
    states: Array  # (L, d)
    noises: Array  # (L-1, q)


@dataclass
class ObservationRecord:
    """Per-step observation data for a full-grid run.

    increments[k] is the datum assimilated at node k+1; it is generated from
    the truth state at node k+1 so that the filter's Gaussian reweighting
    kernel is the exact density of the generator.
    """

    increments: Array  # (N, p)


def _diffusion_apply(sigma_val: Array, dW: Array) -> Array:
    """sigma @ dW across the supported shape combinations."""
    sigma_val = np.asarray(sigma_val, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if sigma_val.ndim == 2 and dW.ndim == 1:  # (d,q) @ (q,)
        return sigma_val @ dW
    if sigma_val.ndim == 2 and dW.ndim == 2:  # shared (d,q), batched (B,q)
        return dW @ sigma_val.T
    if sigma_val.ndim == 3 and dW.ndim == 2:  # per-state (B,d,q), (B,q)
        return np.einsum("bdq,bq->bd", sigma_val, dW)
    raise ValueError(f"unsupported sigma/dW shapes {sigma_val.shape}, {dW.shape}")


def euler_step(model: ModelSpec, t: float, x: Array, u: Array, dt: float, dW: Array) -> Array:
    """One explicit Euler-Maruyama step x + b dt + sigma dW.

    Accepts a single state (d,) with dW (q,) or a batch (B, d) with dW (B, q).
    Raises NumericOverflowError naming the offending coefficient if the drift,
    the diffusion, or the updated state is non-finite.
    """
    x = np.asarray(x, dtype=float)
    drift = np.asarray(model.b(t, x, u), dtype=float)
    if not np.all(np.isfinite(drift)):
        raise NumericOverflowError(f"drift produced non-finite values at t={t}")
    noise = _diffusion_apply(model.sigma(t, x, u), dW)
    if not np.all(np.isfinite(noise)):
        raise NumericOverflowError(f"diffusion produced non-finite values at t={t}")
    out = x + drift * dt + noise
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(f"state update produced non-finite values at t={t}")
    return out


def simulate_forward(
    model: ModelSpec,
    grid: TimeGrid,
    ctrl: ControlSchedule,
    x0: Array,
    rng: np.random.Generator,
) -> StatePath:
    """Simulate X from node ctrl.start_index to node N under the schedule.

    Draws one Gaussian increment per step from `rng` in step order, so a
    path is reproducible from (x0, rng state) alone.
    """
    start = ctrl.start_index
    steps = grid.N - start
    if ctrl.last_index() < grid.N:
        raise ValueError("control schedule must reach the final node")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.dim_x,):
        raise ValueError(f"x0 shape {x0.shape} does not match dim_x={model.dim_x}")
    dt = grid.dt
    sqdt = np.sqrt(dt)
    nodes = grid.nodes
    states = np.empty((steps + 1, model.dim_x))
    noises = np.empty((steps, model.dim_w))
    states[0] = x0
    for i in range(steps):
        dW = sqdt * rng.standard_normal(model.dim_w)
        noises[i] = dW
        states[i + 1] = euler_step(model, nodes[start + i], states[i], ctrl.values[i], dt, dW)
    return StatePath(start, states, noises)


def generate_observations(
    model: ModelSpec,
    grid: TimeGrid,
    truth: StatePath,
    rng: np.random.Generator,
) -> ObservationRecord:
    """Observation data along a full-grid truth path, one datum per step.

    Datum k is generated from the arrival state of step k (the truth at node
    k+1), matching the kernel the particle filter reweights with.  Noise
    variance follows the model's observation kernel; variance 0 is allowed
    and yields noiseless data.
    """
    if truth.start_index != 0 or len(truth.states) != grid.N + 1:
        raise ValueError("truth path must span the full grid")
    scale, var = model.obs_kernel(grid.dt)
    means = scale * np.asarray(model.g_obs(truth.states[1:]), dtype=float)
    if means.shape != (grid.N, model.dim_obs):
        raise ValueError(f"g_obs returned shape {means.shape}, expected {(grid.N, model.dim_obs)}")
    noise = np.sqrt(var) * rng.standard_normal((grid.N, model.dim_obs))
    return ObservationRecord(means + noise)


def evaluate_cost(
    model: ModelSpec,
    grid: TimeGrid,
    ctrl: ControlSchedule,
    x0: Array,
    n_mc: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte Carlo estimate (mean, std error) of the discrete cost.

    The running integral is sampled at each step's arrival state with the
    control applied over that step, sum_i f(t_{i+1}, X_{i+1}, u_i) dt, which
    is the discrete functional whose exact pathwise gradient the adjoint
    recursion of `fbsde` computes; h(X_N) closes the sum.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    start = ctrl.start_index
    if ctrl.last_index() < grid.N:
        raise ValueError("control schedule must reach the final node")
    dt = grid.dt
    sqdt = np.sqrt(dt)
    nodes = grid.nodes
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n_mc, model.dim_x)).copy()
    total = np.zeros(n_mc)
    for i in range(grid.N - start):
        u = ctrl.values[i]
        dW = sqdt * rng.standard_normal((n_mc, model.dim_w))
        x = euler_step(model, nodes[start + i], x, u, dt, dW)
        total += dt * np.asarray(model.f(nodes[start + i + 1], x, u), dtype=float)
    total += np.asarray(model.h(x), dtype=float)
    if not np.all(np.isfinite(total)):
        raise NumericOverflowError("cost accumulation produced non-finite values")
    mean = float(np.mean(total))
    se = 0.0 if n_mc == 1 else float(np.std(total, ddof=1) / np.sqrt(n_mc))
    return mean, se
