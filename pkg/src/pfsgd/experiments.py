"""Study harness: repeated closed-loop trials, aggregation, CSV export, and
the second-moment audit of a retained run.

A study sweeps particle counts (with iterations either fixed or tied to S by
L = S^2), runs independent seeded trials per point, and reduces to rows plus
aggregates that are exactly recomputable from the rows.  Exports are plain
CSV with pinned headers and a gnuplot-friendly two-column variant.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dubins, lq
from .driver import RunResult, SimulatedTruth, run_pf_sgd
from .model import ControlSchedule, ModelSpec, TimeGrid, make_rng
from .sgd import SgdConfig

Array = np.ndarray

RAW_HEADER = "benchmark,S,L,trial,seed,error,cost,wall_ms"
AGG_HEADER = "S,L,mean_error,std_error,trials"


@dataclass(frozen=True)
class StudyConfig:
    """Sweep definition: which benchmark, which S grid, how L scales, trials."""

    benchmark: str
    particle_counts: tuple[int, ...]
    iteration_rule: str = "fixed"  # "fixed" | "squared"
    L: Optional[int] = None
    trials: int = 50
    base_seed: int = 0
    output_dir: Optional[str] = None
    retain_diagnostics: bool = False

    def __post_init__(self):
        if self.benchmark not in ("lq", "dubins"):
            raise ValueError(f"unknown benchmark {self.benchmark!r}")
        counts = tuple(int(s) for s in self.particle_counts)
        if not counts or any(s < 1 for s in counts):
            raise ValueError("particle_counts must be non-empty positive")
        if list(counts) != sorted(counts):
            raise ValueError("particle_counts must be ascending")
        object.__setattr__(self, "particle_counts", counts)
        if self.iteration_rule not in ("fixed", "squared"):
            raise ValueError(f"unknown iteration rule {self.iteration_rule!r}")
        if self.iteration_rule == "fixed" and (self.L is None or self.L < 1):
            raise ValueError("fixed iteration rule requires L >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    def iterations_for(self, S: int) -> int:
        return int(self.L) if self.iteration_rule == "fixed" else S * S


@dataclass(frozen=True)
class TrialRow:
    benchmark: str
    S: int
    L: int
    trial: int
    seed: int
    error: float
    cost: float
    wall_ms: float


@dataclass(frozen=True)
class Aggregate:
    S: int
    L: int
    mean_error: float
    std_error: float
    trials: int


@dataclass
class StudyResult:
    config: StudyConfig
    rows: list[TrialRow]

    @property
    def aggregates(self) -> list[Aggregate]:
        return aggregate_rows(self.rows)


def aggregate_rows(rows: list[TrialRow]) -> list[Aggregate]:
    """Per-(S, L) mean and standard error of the trial errors.

    Pure function of the rows (recomputable from a parsed raw.csv); order of
    rows never affects the result because rows are grouped by key and summed
    in sorted trial order.
    """
    groups: dict[tuple[int, int], list[TrialRow]] = {}
    for row in rows:
        groups.setdefault((row.S, row.L), []).append(row)
    out = []
    for (S, L), members in sorted(groups.items()):
        errs = np.array([r.error for r in sorted(members, key=lambda r: r.trial)])
        n = len(errs)
        std_err = float(np.std(errs, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        out.append(Aggregate(S, L, float(np.mean(errs)), std_err, n))
    return out


@dataclass(frozen=True)
class Benchmark:
    """Everything a study needs to run one benchmark configuration."""

    name: str
    model: ModelSpec
    grid: TimeGrid
    x0_sampler: Callable[[int, np.random.Generator], Array]
    gradient_fn: Callable
    sgd_config_for: Callable[[int], SgdConfig]
    error_fn: Callable[[RunResult], float]


def make_benchmark(name: str) -> Benchmark:
    """Default-settings benchmark bundle ("lq" or "dubins")."""
    if name == "lq":
        params = lq.LqParams()
        grid = TimeGrid(1.0, 50)
        model = lq.lq_model(params, grid)
        ustar = lq.analytic_control(params, grid).values[: grid.N]
        sqdt = np.sqrt(grid.dt)

        def error_fn(result: RunResult) -> float:
            return float(sqdt * np.linalg.norm(result.applied_controls - ustar))

        return Benchmark(
            name="lq",
            model=model,
            grid=grid,
            x0_sampler=lq.x0_sampler(params),
            gradient_fn=lq.make_gradient_kernel(params, grid),
            sgd_config_for=lambda L: lq.default_sgd_config(params, L),
            error_fn=error_fn,
        )
    if name == "dubins":
        params = dubins.DubinsParams()
        grid = params.grid()
        model = dubins.dubins_model(params, grid)
        ref = dubins.reference_circle_path(params, grid)

        def error_fn(result: RunResult) -> float:
            dev = result.truth_path.states[:, :2] - ref
            return float(grid.dt * np.sum(dev**2))

        return Benchmark(
            name="dubins",
            model=model,
            grid=grid,
            x0_sampler=dubins.x0_sampler(params),
            gradient_fn=dubins.make_gradient_kernel(params, grid),
            sgd_config_for=lambda L: dubins.default_sgd_config(params, L),
            error_fn=error_fn,
        )
    raise ValueError(f"unknown benchmark {name!r}")


def trial_seed(base_seed: int, S: int, L: int, trial: int) -> int:
    """Stable per-trial seed; depends on the point's own key only, so
    reordering the sweep or the trials never changes any stream."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(S, L, trial))
    return int(ss.generate_state(1, np.uint64)[0])


def run_trial(
    benchmark_name: str, S: int, L: int, trial: int, base_seed: int, retain: bool = False
) -> tuple[TrialRow, Optional[RunResult]]:
    """One independent seeded closed-loop run reduced to a result row."""
    bench = make_benchmark(benchmark_name)
    seed = trial_seed(base_seed, S, L, trial)
    tic = time.perf_counter()
    result = run_pf_sgd(
        bench.model,
        bench.grid,
        S,
        bench.sgd_config_for(L),
        bench.x0_sampler,
        truth_rng=make_rng(seed, 0),
        algo_rng=make_rng(seed, 1),
        gradient_fn=bench.gradient_fn,
        retain_clouds=retain,
    )
    wall_ms = 1e3 * (time.perf_counter() - tic)
    row = TrialRow(
        benchmark=benchmark_name,
        S=S,
        L=L,
        trial=trial,
        seed=seed,
        error=bench.error_fn(result),
        cost=result.realized_cost,
        wall_ms=wall_ms,
    )
    return row, (result if retain else None)


def _run_trial_task(args: tuple) -> TrialRow:
    return run_trial(*args)[0]


def run_study(cfg: StudyConfig, workers: int = 1) -> StudyResult:
    """Execute the full sweep; rows come back sorted by (S, L, trial).

    workers > 1 fans trials out to a process pool; the row order and all
    streams are identical either way.
    """
    tasks = [
        (cfg.benchmark, S, cfg.iterations_for(S), trial, cfg.base_seed)
        for S in cfg.particle_counts
        for trial in range(cfg.trials)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_trial_task, tasks))
    else:
        rows = [_run_trial_task(t) for t in tasks]
    rows.sort(key=lambda r: (r.S, r.L, r.trial))
    result = StudyResult(cfg, rows)
    if cfg.output_dir is not None:
        export_csv(result, cfg.output_dir)
    return result


def convergence_vs_particles(cfg: StudyConfig, workers: int = 1) -> StudyResult:
    """Error against particle count at fixed iteration budget."""
    if cfg.iteration_rule != "fixed":
        raise ValueError("convergence_vs_particles requires the fixed iteration rule")
    return run_study(cfg, workers)


def convergence_vs_iterations(cfg: StudyConfig, workers: int = 1) -> StudyResult:
    """Error against iteration budget tied to the particle count by L = S^2."""
    if cfg.iteration_rule != "squared":
        raise ValueError("convergence_vs_iterations requires the squared iteration rule")
    return run_study(cfg, workers)


def _fmt(x: float) -> str:
    return "%.17g" % float(x)


def export_csv(result: StudyResult, out_dir) -> list[Path]:
    """Write raw.csv, agg.csv, and agg.dat (gnuplot two-column) to out_dir.

    Headers, separators, and 17-significant-digit decimal formatting are
    pinned; files use UTF-8 with LF line endings regardless of platform.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_lines = [RAW_HEADER]
    for r in result.rows:
        raw_lines.append(
            ",".join(
                [
                    r.benchmark,
                    str(r.S),
                    str(r.L),
                    str(r.trial),
                    str(r.seed),
                    _fmt(r.error),
                    _fmt(r.cost),
                    _fmt(r.wall_ms),
                ]
            )
        )
    agg_lines = [AGG_HEADER]
    dat_lines = ["# S mean_error"]
    for a in result.aggregates:
        agg_lines.append(
            ",".join([str(a.S), str(a.L), _fmt(a.mean_error), _fmt(a.std_error), str(a.trials)])
        )
        dat_lines.append("%d %s" % (a.S, _fmt(a.mean_error)))
    paths = []
    for name, lines in (("raw.csv", raw_lines), ("agg.csv", agg_lines), ("agg.dat", dat_lines)):
        p = out / name
        p.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
        paths.append(p)
    return paths


def parse_raw_csv(path) -> list[TrialRow]:
    """Inverse of the raw.csv writer, for recomputation checks."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != RAW_HEADER:
        raise ValueError(f"unexpected raw.csv header in {path}")
    rows = []
    for line in lines[1:]:
        bench, S, L, trial, seed, error, cost, wall = line.split(",")
        rows.append(
            TrialRow(bench, int(S), int(L), int(trial), int(seed), float(error), float(cost), float(wall))
        )
    return rows


def fixed_control_cost(
    model: ModelSpec,
    grid: TimeGrid,
    ctrl: ControlSchedule,
    x0_sampler: Callable[[int, np.random.Generator], Array],
    truth_rng: np.random.Generator,
) -> float:
    """Realized cost of the hidden system under a fixed schedule.

    Consumes truth_rng exactly like a closed-loop run's hidden system does
    (Brownian block then observation block per step), so pairing it with a
    run on the same truth seed compares costs on the identical noise
    realization.
    """
    truth = SimulatedTruth(model, grid, x0_sampler(1, truth_rng)[0], truth_rng)
    cost = 0.0
    for n in range(grid.N):
        u = ctrl.entry(n)
        truth.step(n, u)
        cost += grid.dt * float(model.f(grid.nodes[n + 1], truth.state, u))
    return cost + float(model.h(truth.state))


@dataclass
class MomentAuditReport:
    """Empirical second moments of the cloud against the growth recursion.

    bound[n] instantiates C_{n+1} = kappa^{-2}((1 + dt) C_n + C dt) with the
    run's own measured constants; empirical[n] is the worse of the predicted
    and post-resampling cloud second moments at node n.  The tail estimate
    follows Chebyshev at the horizon: M solves bound[N] / M^2 = tail_target.
    """

    bound: Array  # (N+1,)
    empirical: Array  # (N+1,)
    kappa_hat: float
    c_drift2: float
    c_diffusion2: float
    max_ratio: float
    chebyshev_m: float
    tail_target: float
    escape_frequency: float

    @property
    def ok(self) -> bool:
        return bool(self.max_ratio <= 1.0 and self.escape_frequency <= 3.0 * self.tail_target)

    def summary(self) -> str:
        return (
            f"kappa_hat={self.kappa_hat:.6g} C_b^2={self.c_drift2:.6g} "
            f"C_sigma^2={self.c_diffusion2:.6g} max_ratio={self.max_ratio:.6g} "
            f"M={self.chebyshev_m:.6g} escape={self.escape_frequency:.6g} "
            f"(target {self.tail_target:.3g}, ok={self.ok})"
        )


def _second_moment(particles: Array) -> float:
    return float(np.mean(np.sum(particles**2, axis=1)))


def _sup_coefficient_sq(model: ModelSpec, t: float, particles: Array, u: Array) -> tuple[float, float]:
    bval = np.asarray(model.b(t, particles, u), dtype=float)
    sup_b2 = float(np.max(np.sum(bval**2, axis=-1)))
    sval = np.asarray(model.sigma(t, particles, u), dtype=float)
    if sval.ndim == 2:
        sup_s2 = float(np.sum(sval**2))
    else:
        sup_s2 = float(np.max(np.sum(sval**2, axis=(-2, -1))))
    return sup_b2, sup_s2


def moment_bound_audit(
    model: ModelSpec,
    grid: TimeGrid,
    run: RunResult,
    kappa_hat: Optional[float] = None,
    tail_target: float = 0.01,
) -> MomentAuditReport:
    """Audit one retained run against the second-moment growth recursion.

    The recursion constants are measured from the run itself: C_0 from the
    initial cloud, the drift/diffusion sups over every (step, particle), and
    kappa from the worst normalized likelihood ratio unless supplied.
    Requires retain_clouds=True on the run.
    """
    if run.initial_cloud is None or not run.predicted_clouds or not run.filtered_clouds:
        raise ValueError("moment audit requires a run with retained cloud snapshots")
    N = len(run.predicted_clouds)
    dt = grid.dt
    if kappa_hat is None:
        kappa_hat = float(np.min(run.like_ratio_min))
    if not 0 < kappa_hat <= 1:
        raise ValueError("kappa_hat must lie in (0, 1]")

    sup_b2 = 0.0
    sup_s2 = 0.0
    clouds_before = [run.initial_cloud] + list(run.filtered_clouds[:-1])
    for n, cl in enumerate(clouds_before):
        b2, s2 = _sup_coefficient_sq(model, grid.nodes[n], cl.particles, run.applied_controls[n])
        sup_b2 = max(sup_b2, b2)
        sup_s2 = max(sup_s2, s2)
    c_const = sup_b2 * (1.0 + dt) + sup_s2

    bound = np.empty(N + 1)
    empirical = np.empty(N + 1)
    bound[0] = max(_second_moment(run.initial_cloud.particles), np.finfo(float).tiny)
    empirical[0] = _second_moment(run.initial_cloud.particles)
    for n in range(N):
        bound[n + 1] = ((1.0 + dt) * bound[n] + c_const * dt) / kappa_hat**2
        empirical[n + 1] = max(
            _second_moment(run.predicted_clouds[n].particles),
            _second_moment(run.filtered_clouds[n].particles),
        )
    max_ratio = float(np.max(empirical[1:] / bound[1:]))

    M = float(np.sqrt(bound[N] / tail_target))
    worst_freq = 0.0
    for n in range(N):
        for cl in (run.predicted_clouds[n], run.filtered_clouds[n]):
            radii = np.linalg.norm(cl.particles, axis=1)
            worst_freq = max(worst_freq, float(np.mean(radii >= M)))

    return MomentAuditReport(
        bound=bound,
        empirical=empirical,
        kappa_hat=kappa_hat,
        c_drift2=sup_b2,
        c_diffusion2=sup_s2,
        max_ratio=max_ratio,
        chebyshev_m=M,
        tail_target=tail_target,
        escape_frequency=worst_freq,
    )
