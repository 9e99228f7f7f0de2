"""Bootstrap particle filter over the controlled diffusion.

Prediction pushes every particle through one Euler-Maruyama step with its own
Brownian increment; reweighting uses the Gaussian kernel matching the
observation generator exactly; resampling is multinomial by default with a
systematic variant available.  Weights live in log space during the update so
near-degenerate clouds stay usable until the likelihood underflows entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .model import DegenerateUpdateError, ModelSpec, TimeGrid, euler_step

Array = np.ndarray


@dataclass
class ParticleCloud:
    """Weighted particle approximation of the filtering distribution."""

    particles: Array  # (S, d)
    weights: Array  # (S,), non-negative, sums to 1
    time_index: int

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.particles),):
            raise ValueError("one weight per particle required")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()!r}")

    @property
    def size(self) -> int:
        return len(self.particles)

    def mean(self) -> Array:
        return self.weights @ self.particles

    @staticmethod
    def from_samples(particles: Array, time_index: int = 0) -> "ParticleCloud":
        particles = np.atleast_2d(np.asarray(particles, dtype=float))
        S = len(particles)
        return ParticleCloud(particles, np.full(S, 1.0 / S), time_index)


def predict(
    model: ModelSpec,
    grid: TimeGrid,
    cloud: ParticleCloud,
    u: Array,
    rng: np.random.Generator,
) -> ParticleCloud:
    """Advance a uniformly weighted cloud one step under control u.

    Every particle receives an independent Gaussian increment.  Call after
    resampling: prediction of a non-uniform cloud would silently discard the
    weight information.
    """
    w = cloud.weights
    if np.max(w) - np.min(w) > 1e-12:
        raise ValueError("predict expects uniform weights; resample first")
    t = grid.nodes[cloud.time_index]
    dW = np.sqrt(grid.dt) * rng.standard_normal((cloud.size, model.dim_w))
    moved = euler_step(model, t, cloud.particles, np.asarray(u, dtype=float), grid.dt, dW)
    return ParticleCloud(moved, w.copy(), cloud.time_index + 1)


def log_likelihoods(model: ModelSpec, grid: TimeGrid, cloud: ParticleCloud, datum: Array) -> Array:
    """Per-particle observation log-likelihood of one datum, up to a shared
    additive constant (the Gaussian normalizer cancels in reweighting)."""
    scale, var = model.obs_kernel(grid.dt)
    if var <= 0:
        raise ValueError("observation kernel variance must be positive for reweighting")
    datum = np.asarray(datum, dtype=float)
    means = scale * np.asarray(model.g_obs(cloud.particles), dtype=float)
    return -0.5 * np.sum((datum - means) ** 2, axis=1) / var


def update_weights(model: ModelSpec, grid: TimeGrid, cloud: ParticleCloud, datum: Array) -> ParticleCloud:
    """Bayes reweighting of a predicted cloud against one observation datum.

    The likelihood is Gaussian with mean g_obs(x) * scale and the kernel
    variance from the model's observation settings (scale = dt and variance
    = dt by default).  Log-weights are shifted by their maximum before
    exponentiation; if every particle still underflows to zero the update is
    meaningless and DegenerateUpdateError is raised.
    """
    log_like = log_likelihoods(model, grid, cloud, datum)
    log_w = np.log(cloud.weights, out=np.full(cloud.size, -np.inf), where=cloud.weights > 0)
    log_w = log_w + log_like
    peak = np.max(log_w)
    if not np.isfinite(peak):
        raise DegenerateUpdateError("all particles have zero posterior weight")
    w = np.exp(log_w - peak)
    total = w.sum()
    if total <= 0 or not np.isfinite(total):
        raise DegenerateUpdateError("likelihood underflowed across the whole cloud")
    return ParticleCloud(cloud.particles, w / total, cloud.time_index)


def resample(
    cloud: ParticleCloud,
    rng: np.random.Generator,
    method: str = "multinomial",
) -> ParticleCloud:
    """Draw S particles by weight and reset to uniform weights.

    "multinomial" draws i.i.d. indices; "systematic" uses a single uniform
    offset against the cumulative weights (lower resampling variance).
    """
    S = cloud.size
    if method == "multinomial":
        idx = rng.choice(S, size=S, p=cloud.weights)
    elif method == "systematic":
        positions = (rng.random() + np.arange(S)) / S
        idx = np.searchsorted(np.cumsum(cloud.weights), positions)
        idx = np.minimum(idx, S - 1)  # guard cumsum rounding at the top
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    return ParticleCloud(cloud.particles[idx], np.full(S, 1.0 / S), cloud.time_index)


def effective_sample_size(cloud: ParticleCloud) -> float:
    """1 / sum(w^2): S for uniform weights, 1 for a fully collapsed cloud."""
    return float(1.0 / np.sum(cloud.weights**2))


def default_test_dictionary(dim: int, span: float = 4.0) -> list[Callable[[Array], Array]]:
    """Bounded test functions for empirical-measure comparisons.

    Coordinate-wise tanh ramps tanh(alpha (x_i - c)) for alpha in {0.5, 1, 2}
    and c on a 5-point grid per coordinate, plus smoothed radial indicators
    tanh(2 (r0 - |x|)).  All outputs lie in [-1, 1].
    """
    funcs: list[Callable[[Array], Array]] = []
    centers = np.linspace(-span, span, 5)
    for axis in range(dim):
        for alpha in (0.5, 1.0, 2.0):
            for c in centers:
                def ramp(x, axis=axis, alpha=alpha, c=c):
                    return np.tanh(alpha * (np.atleast_2d(x)[:, axis] - c))

                funcs.append(ramp)
    for r0 in (0.5 * span, span, 1.5 * span):
        def ball(x, r0=r0):
            return np.tanh(2.0 * (r0 - np.linalg.norm(np.atleast_2d(x), axis=1)))

        funcs.append(ball)
    return funcs


Reference = Union[Array, Callable[[Callable[[Array], Array]], float]]


def empirical_measure_error(
    cloud: ParticleCloud,
    reference: Reference,
    test_dictionary: Sequence[Callable[[Array], Array]],
) -> float:
    """Worst-case gap between cloud averages and reference averages.

    `reference` is either an array of samples (averaged uniformly) or a
    callable mapping a test function to its exact reference expectation.
    """
    if len(test_dictionary) == 0:
        raise ValueError("test dictionary must not be empty")
    worst = 0.0
    for fn in test_dictionary:
        cloud_avg = float(cloud.weights @ np.asarray(fn(cloud.particles), dtype=float))
        if callable(reference):
            ref_avg = float(reference(fn))
        else:
            ref_avg = float(np.mean(np.asarray(fn(np.atleast_2d(reference)), dtype=float)))
        worst = max(worst, abs(cloud_avg - ref_avg))
    return worst
