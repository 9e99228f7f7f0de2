"""Closed-loop runner: per-step control optimization fused with filtering.

At every grid node the controller optimizes the remaining schedule against
its current particle cloud, applies the first entry to the hidden system,
receives one observation datum, and assimilates it (predict, reweight,
resample).  The hidden system is simulated here by default (twin experiment);
`ReplayTruth` substitutes a recorded stream so the algorithm side can be
re-run against fixed data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import (
    ControlSchedule,
    DegenerateUpdateError,
    ModelSpec,
    ObservationRecord,
    StatePath,
    TimeGrid,
    euler_step,
)
from .particle_filter import (
    ParticleCloud,
    effective_sample_size,
    log_likelihoods,
    predict,
    resample,
    update_weights,
)
from .sgd import GradientFn, SgdConfig, optimize_at_time

Array = np.ndarray


class SimulatedTruth:
    """Hidden state advanced one step at a time under the applied controls.

    Consumes its own rng (one Brownian block then one observation-noise block
    per step), so the truth realization is a function of that stream and the
    applied controls only.
    """

    def __init__(self, model: ModelSpec, grid: TimeGrid, x0: Array, rng: np.random.Generator):
        self.model = model
        self.grid = grid
        self.rng = rng
        self._states = [np.array(x0, dtype=float)]
        self._noises: list[Array] = []
        self._increments: list[Array] = []

    @property
    def state(self) -> Array:
        return self._states[-1]

    def step(self, n: int, u: Array) -> Array:
        """Advance one node under control u; returns the new observation datum."""
        grid, model = self.grid, self.model
        dW = np.sqrt(grid.dt) * self.rng.standard_normal(model.dim_w)
        x_next = euler_step(model, grid.nodes[n], self._states[-1], u, grid.dt, dW)
        scale, var = model.obs_kernel(grid.dt)
        mean = scale * np.asarray(model.g_obs(x_next), dtype=float)
        datum = mean + np.sqrt(var) * self.rng.standard_normal(model.dim_obs)
        self._states.append(x_next)
        self._noises.append(dW)
        self._increments.append(datum)
        return datum

    def path(self) -> StatePath:
        return StatePath(0, np.array(self._states), np.array(self._noises))

    def record(self) -> ObservationRecord:
        return ObservationRecord(np.array(self._increments))


class ReplayTruth:
    """Plays back a recorded truth path and observation stream verbatim.

    Controls are ignored: the replayed states were generated by whatever was
    applied during the recording run, so realized cost against different
    controls mixes a fixed path with new control effort.  Intended for
    causality and determinism checks on the algorithm side, not for
    performance comparisons.
    """

    def __init__(self, path: StatePath, record: ObservationRecord):
        if path.start_index != 0:
            raise ValueError("replay requires a full-grid truth path")
        if len(record.increments) != len(path.states) - 1:
            raise ValueError("observation count must match path steps")
        self._path = path
        self._record = record
        self._cursor = 0

    @property
    def state(self) -> Array:
        return self._path.states[self._cursor]

    def step(self, n: int, u: Array) -> Array:
        if n != self._cursor:
            raise ValueError(f"replay is at step {self._cursor}, got {n}")
        self._cursor += 1
        return self._record.increments[n]

    def path(self) -> StatePath:
        return self._path

    def record(self) -> ObservationRecord:
        return self._record


@dataclass
class RunResult:
    """One closed-loop run: what was applied, what happened, what it cost."""

    applied_controls: Array  # (N, m)
    truth_path: StatePath
    observations: ObservationRecord
    realized_cost: float
    initial_mean: Array  # (d,) prior cloud mean at node 0
    cloud_means: Array  # (N, d); cloud_means[n] estimates the state at node n+1
    ess: Array  # (N,) effective sample size before each resampling
    like_ratio_min: Array  # (N,) min/max normalized likelihood per update
    step_ms: Array  # (N,)
    final_schedule: ControlSchedule
    initial_cloud: Optional[ParticleCloud] = None
    predicted_clouds: Optional[list[ParticleCloud]] = None
    filtered_clouds: Optional[list[ParticleCloud]] = None


def run_pf_sgd(
    model: ModelSpec,
    grid: TimeGrid,
    filter_size: int,
    sgd_cfg: SgdConfig,
    x0_sampler: Callable[[int, np.random.Generator], Array],
    truth_rng: np.random.Generator,
    algo_rng: np.random.Generator,
    gradient_fn: Optional[GradientFn] = None,
    warm_start: bool = True,
    retain_clouds: bool = False,
    resample_method: str = "multinomial",
    truth_system=None,
) -> RunResult:
    """Full closed-loop run over the grid.

    Per node n: optimize the schedule on [t_n, T] against the current cloud,
    apply its first entry to the hidden system, assimilate the resulting
    datum, accumulate running cost along the truth.  Warm starting seeds step
    n+1 with the tail of the schedule optimized at n; warm_start=False
    re-initializes to zeros each step.  truth_rng drives the hidden system
    only and algo_rng everything the controller does, so the truth path is
    invariant to the controller's seed (given the same applied controls).
    """
    if filter_size < 1:
        raise ValueError("filter_size must be >= 1")
    N, m, d = grid.N, model.dim_u, model.dim_x

    cloud = ParticleCloud.from_samples(x0_sampler(filter_size, algo_rng), time_index=0)
    initial_mean = cloud.mean()
    if truth_system is None:
        truth_system = SimulatedTruth(model, grid, x0_sampler(1, truth_rng)[0], truth_rng)

    schedule = ControlSchedule.zeros(0, N, m)
    applied = np.empty((N, m))
    cloud_means = np.empty((N, d))
    ess = np.empty(N)
    like_ratio_min = np.empty(N)
    step_ms = np.empty(N)
    initial_cloud = cloud if retain_clouds else None
    predicted_clouds: Optional[list[ParticleCloud]] = [] if retain_clouds else None
    filtered_clouds: Optional[list[ParticleCloud]] = [] if retain_clouds else None
    running_cost = 0.0

    for n in range(N):
        tic = time.perf_counter()
        seed_schedule = schedule if warm_start else ControlSchedule.zeros(n, N, m)
        optimized = optimize_at_time(model, grid, cloud, seed_schedule, sgd_cfg, algo_rng, gradient_fn)
        u_hat = optimized.entry(n)
        applied[n] = u_hat

        datum = truth_system.step(n, u_hat)
        running_cost += grid.dt * float(model.f(grid.nodes[n + 1], truth_system.state, u_hat))

        cloud = predict(model, grid, cloud, u_hat, algo_rng)
        if retain_clouds:
            predicted_clouds.append(cloud)
        log_like = log_likelihoods(model, grid, cloud, datum)
        spread = float(np.min(log_like)) - float(np.max(log_like))
        like_ratio_min[n] = float(np.exp(spread)) if np.isfinite(spread) else 0.0
        try:
            weighted = update_weights(model, grid, cloud, datum)
        except DegenerateUpdateError as exc:
            raise DegenerateUpdateError(f"step {n}: {exc}") from exc
        ess[n] = effective_sample_size(weighted)
        cloud_means[n] = weighted.mean()
        cloud = resample(weighted, algo_rng, resample_method)
        if retain_clouds:
            filtered_clouds.append(cloud)

        schedule = optimized.tail(n + 1)
        step_ms[n] = 1e3 * (time.perf_counter() - tic)

    realized_cost = running_cost + float(model.h(truth_system.state))
    return RunResult(
        applied_controls=applied,
        truth_path=truth_system.path(),
        observations=truth_system.record(),
        realized_cost=realized_cost,
        initial_mean=initial_mean,
        cloud_means=cloud_means,
        ess=ess,
        like_ratio_min=like_ratio_min,
        step_ms=step_ms,
        final_schedule=schedule,
        initial_cloud=initial_cloud,
        predicted_clouds=predicted_clouds,
        filtered_clouds=filtered_clouds,
    )
