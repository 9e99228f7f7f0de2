"""Discrete adjoint (backward) solvers for the control gradient.

The gradient of the cost with respect to the control schedule is assembled
from an adjoint pair (Y, Z) solved backwards along forward paths:

    Y_i = Y_{i+1} + [ b_x^T Y_{i+1} + sigma_x^T Z_{i+1} + f_x ] dt
    Z_i = Y_{i+1} (dW_i / dt)^T                       (outer product, d x q)

with terminal values Y_N = h_x(X_N) and Z_N = 0 (storage convention: the
terminal slot carries no diffusion pairing).  The bracket in the Y update is
evaluated at the arrival node's time and state, t_{i+1} and X_{i+1}.  The
pathwise solver pairs that bracket with the departing control u_{t_i}; the
batch solver pairs it with u_{t_{i+1}}.  Both recursions are kept exactly in
those forms; do not symmetrize the indexing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ControlSchedule, ModelSpec, StatePath, TimeGrid

Array = np.ndarray


@dataclass
class AdjointPath:
    """Adjoint values at nodes start_index..N.

    Y has shape (L, d); Z has shape (L, d, q) with Z[-1] = 0 by convention.
    """

    start_index: int
    Y: Array
    Z: Array


def gradient_integrand(model: ModelSpec, t: float, x: Array, u: Array, Y: Array, Z: Array) -> Array:
    """Control-derivative of the Hamiltonian, b_u^T Y + sigma_u : Z + f_u.

    The diffusion term contracts column by column: each noise column j of
    sigma contributes (d sigma_{.j} / du)^T Z_{.j}.  Accepts batched x/Y/Z
    with a shared leading axis.
    """
    bu = np.asarray(model.b_u(t, x, u), dtype=float)
    su = np.asarray(model.sigma_u(t, x, u), dtype=float)
    fu = np.asarray(model.f_u(t, x, u), dtype=float)
    return (
        np.einsum("...dm,...d->...m", bu, np.asarray(Y, dtype=float))
        + np.einsum("...dqm,...dq->...m", su, np.asarray(Z, dtype=float))
        + fu
    )


def solve_adjoint_pathwise(
    model: ModelSpec,
    grid: TimeGrid,
    path: StatePath,
    ctrl: ControlSchedule,
) -> AdjointPath:
    """Single-sample backward solve along one forward path.

    Reuses the exact Brownian increments stored in `path` for the Z pairing.
    The drift bracket at step i is evaluated at (t_{i+1}, X_{i+1}, u_{t_i}).
    """
    if path.start_index != ctrl.start_index:
        raise ValueError("path and control schedule must start at the same node")
    L = len(path.states)
    d, q = model.dim_x, model.dim_w
    dt = grid.dt
    nodes = grid.nodes
    start = path.start_index
    Y = np.empty((L, d))
    Z = np.zeros((L, d, q))
    Y[L - 1] = np.asarray(model.h_x(path.states[L - 1]), dtype=float)
    for i in range(L - 2, -1, -1):
        t_next = nodes[start + i + 1]
        x_next = path.states[i + 1]
        u_here = ctrl.values[i]
        Z[i] = np.outer(Y[i + 1], path.noises[i]) / dt
        bx = np.asarray(model.b_x(t_next, x_next, u_here), dtype=float)
        sx = np.asarray(model.sigma_x(t_next, x_next, u_here), dtype=float)
        fx = np.asarray(model.f_x(t_next, x_next, u_here), dtype=float)
        Y[i] = Y[i + 1] + (bx.T @ Y[i + 1] + np.einsum("dqe,dq->e", sx, Z[i + 1]) + fx) * dt
    return AdjointPath(start, Y, Z)


def solve_adjoint_batch(
    model: ModelSpec,
    grid: TimeGrid,
    ctrl: ControlSchedule,
    x_start: Array,
    K: int,
    rng: np.random.Generator,
) -> AdjointPath:
    """K-sample estimate of the adjoint pair from a fixed starting state.

    Draws K independent forward paths from x_start under the schedule, runs
    the backward recursion along each (drift bracket at (t_{i+1}, X_{i+1},
    u_{t_{i+1}})), and reports the per-level sample means of Y and Z.  With
    K = 1 this reduces to the pathwise solve apart from that control index.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    start = ctrl.start_index
    steps = grid.N - start
    if ctrl.last_index() < grid.N:
        raise ValueError("control schedule must reach the final node")
    d, q = model.dim_x, model.dim_w
    dt = grid.dt
    sqdt = np.sqrt(dt)
    nodes = grid.nodes

    states = np.empty((steps + 1, K, d))
    noises = np.empty((steps, K, q))
    states[0] = np.broadcast_to(np.asarray(x_start, dtype=float), (K, d))
    for i in range(steps):
        dW = sqdt * rng.standard_normal((K, q))
        noises[i] = dW
        drift = np.asarray(model.b(nodes[start + i], states[i], ctrl.values[i]), dtype=float)
        sig = np.asarray(model.sigma(nodes[start + i], states[i], ctrl.values[i]), dtype=float)
        if sig.ndim == 2:
            noise_term = dW @ sig.T
        else:
            noise_term = np.einsum("kdq,kq->kd", sig, dW)
        states[i + 1] = states[i] + drift * dt + noise_term

    Yk = np.asarray(model.h_x(states[steps]), dtype=float)
    Yk = np.broadcast_to(Yk, (K, d)).copy()
    Zk = np.zeros((K, d, q))
    Y = np.empty((steps + 1, d))
    Z = np.zeros((steps + 1, d, q))
    Y[steps] = Yk.mean(axis=0)
    for i in range(steps - 1, -1, -1):
        t_next = nodes[start + i + 1]
        x_next = states[i + 1]
        u_next = ctrl.values[i + 1]
        Zk_new = np.einsum("kd,kq->kdq", Yk, noises[i]) / dt
        bx = np.asarray(model.b_x(t_next, x_next, u_next), dtype=float)
        sx = np.asarray(model.sigma_x(t_next, x_next, u_next), dtype=float)
        fx = np.asarray(model.f_x(t_next, x_next, u_next), dtype=float)
        bx = np.broadcast_to(bx, (K, d, d))
        sx = np.broadcast_to(sx, (K, d, q, d))
        fx = np.broadcast_to(fx, (K, d))
        Yk = Yk + (
            np.einsum("kde,kd->ke", bx, Yk) + np.einsum("kdqe,kdq->ke", sx, Zk) + fx
        ) * dt
        Zk = Zk_new
        Y[i] = Yk.mean(axis=0)
        Z[i] = Zk.mean(axis=0)
    return AdjointPath(start, Y, Z)
