"""Analytical cost model, instrumented counting, and the scaling harness.

The exact-count mode of the cost model mirrors the distributed solver's
iteration structure: one Gram all_reduce of k*k words plus, per relation
slice, one block-row product reduce (b*k words, b = ceil(n/sqrt(p))), one
k*k reduce and one b*k reduce, then one b*k broadcast per slice and a final
b*k broadcast of the updated factor block. Counted words from a run must
equal these numbers; the big-O forms (flops ~ m*density*n^2*k/p, words ~
m*k*n/sqrt(p)*log2 p) are reported alongside for trend checks.

Wall-clock phase timings are trend-only: in-process ranks share cores, so
speedup and efficiency are derived per the scaling-kind rules but absolute
times carry no hardware claim.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, GridError
from .grid import CollectiveStats, spawn_grid
from .rescal import SolverConfig
from .dist_rescal import dist_rescal_solve
from .synth import sparsify
from .tensor import RelTensor, block_dim, partition_block

COMPUTE_PHASES = ("gram_mul", "matrix_mul", "matrix_mul_sparse")
COMM_PHASES = ("row_reduce", "column_reduce", "row_broadcast", "column_broadcast")


@dataclass
class CostModelInput:
    n: int
    m: int
    k: int
    p: int
    density: float = 1.0
    r: int = 1
    max_iters: int = 10

    def __post_init__(self):
        if min(self.n, self.m, self.k, self.p, self.r, self.max_iters) < 1:
            raise DataError("all cost-model dimensions must be positive")
        g = math.isqrt(self.p)
        if g * g != self.p:
            raise DataError(f"p must be a perfect square, got {self.p}")
        if not 0 < self.density <= 1:
            raise DataError(f"density must be in (0, 1], got {self.density}")


@dataclass
class CostPrediction:
    flops_per_iter: float
    allreduce_words_per_iter: int
    broadcast_words_per_iter: int
    allreduce_events_per_iter: int
    broadcast_events_per_iter: int
    omodel_words_per_iter: float
    memory_words_per_rank: float

    @property
    def comm_words_per_iter(self) -> int:
        return self.allreduce_words_per_iter + self.broadcast_words_per_iter

    @property
    def comm_events_per_iter(self) -> int:
        return self.allreduce_events_per_iter + self.broadcast_events_per_iter


def predict_cost(inp: CostModelInput, include_trace: bool = False) -> CostPrediction:
    """Leading-term flops, exact per-iteration communication, memory model.

    ``include_trace`` adds the two scalar reductions per iteration used for
    relative-error tracking.
    """
    n, m, k, p = inp.n, inp.m, inp.k, inp.p
    g = math.isqrt(p)
    b = block_dim(n, g)
    flops = m * inp.density * n**2 * k / p
    if p == 1:
        ar_words = bc_words = ar_events = bc_events = 0
        omodel = 0.0
    else:
        ar_words = (m + 1) * k * k + 2 * m * b * k
        ar_events = 1 + 3 * m
        bc_words = (m + 1) * b * k
        bc_events = m + 1
        if include_trace:
            ar_words += 2
            ar_events += 2
        omodel = m * k * (n / g) * math.log2(p)
    memory = m * n**2 * inp.density / p + inp.r * k * n / g + inp.r * m * k**2
    return CostPrediction(
        flops_per_iter=flops,
        allreduce_words_per_iter=ar_words,
        broadcast_words_per_iter=bc_words,
        allreduce_events_per_iter=ar_events,
        broadcast_events_per_iter=bc_events,
        omodel_words_per_iter=omodel,
        memory_words_per_rank=memory,
    )


def isoefficiency(p: int, mode: str = "dense", density: float | None = None) -> float:
    """Problem size n that keeps parallel efficiency constant at p ranks.

    Dense systems need n ~ sqrt(p) * log2(p) (unit constant); sparse systems
    divide by the density. p = 1 reports the floor n = 1.
    """
    if p < 1:
        raise DataError(f"p must be >= 1, got {p}")
    if mode == "dense":
        scale = 1.0
    elif mode == "sparse":
        if density is None or not 0 < density <= 1:
            raise DataError("sparse isoefficiency needs density in (0, 1]")
        scale = 1.0 / density
    else:
        raise DataError(f"unknown mode {mode!r}")
    if p == 1:
        return 1.0
    return max(1.0, math.sqrt(p) * math.log2(p) * scale)


@dataclass
class InstrumentedRun:
    """Counted result of a fixed-iteration distributed solve."""

    p: int
    n: int
    m: int
    k: int
    density: float
    iters: int
    track_error: bool
    flops: int
    phase_flops: dict
    phase_seconds: dict
    stats: CollectiveStats
    wall_seconds: float
    trace: np.ndarray = field(repr=False, default=None)


def run_instrumented(x, k: int, cfg: SolverConfig, p: int,
                     timeout: float = 60.0) -> InstrumentedRun:
    """Solve on p ranks with counters on; verifies cross-rank symmetry."""

    def program(ctx):
        blk = partition_block(x, ctx.grid_dim, ctx.i, ctx.j)
        t0 = time.perf_counter()
        _, trace = dist_rescal_solve(blk, k, cfg, ctx)
        return ctx.stats, ctx.counters, time.perf_counter() - t0, trace

    results = spawn_grid(p, program, timeout=timeout, with_counters=True)
    stats0 = results[0][0]
    for rank, (st, _, _, _) in enumerate(results):
        if st != stats0:
            raise GridError(f"collective stats differ on rank {rank}")
    flops_by_rank = [sum(c.flops.values()) for _, c, _, _ in results]
    phase_flops = {}
    phase_seconds = {}
    for _, c, _, _ in results:
        for ph, v in c.flops.items():
            phase_flops[ph] = phase_flops.get(ph, 0) + v
        for ph, v in c.seconds.items():
            phase_seconds[ph] = phase_seconds.get(ph, 0.0) + v
    phase_flops = {ph: v / p for ph, v in phase_flops.items()}
    phase_seconds = {ph: v / p for ph, v in phase_seconds.items()}
    density = getattr(x, "density", 1.0)
    trace = results[0][3]
    iters = len(trace) if (cfg.track_error and len(trace)) else cfg.max_iters
    return InstrumentedRun(
        p=p, n=x.n, m=x.m, k=k, density=density, iters=iters,
        track_error=cfg.track_error,
        flops=int(round(sum(flops_by_rank) / p)),
        phase_flops=phase_flops,
        phase_seconds=phase_seconds,
        stats=stats0,
        wall_seconds=float(np.mean([w for _, _, w, _ in results])),
        trace=trace,
    )


def measure_counts(run: InstrumentedRun):
    """Exact multiply-add count (per-rank average) and the collective stats."""
    return run.flops, run.stats


def counts_match_prediction(run: InstrumentedRun) -> bool:
    """True when counted words equal the exact-count model for the run.

    Error tracking adds one scalar reduce pair per iteration (in the model)
    plus a one-time pair for the input norm, accounted here.
    """
    pred = predict_cost(
        CostModelInput(n=run.n, m=run.m, k=run.k, p=run.p, density=run.density),
        include_trace=run.track_error,
    )
    setup_words = 2 if (run.track_error and run.p > 1) else 0
    ar = run.stats.total_words("all_reduce")
    bc = run.stats.total_words("broadcast")
    return (
        ar == pred.allreduce_words_per_iter * run.iters + setup_words
        and bc == pred.broadcast_words_per_iter * run.iters
        and run.stats.total_count("all_reduce")
        == pred.allreduce_events_per_iter * run.iters + setup_words
        and run.stats.total_count("broadcast") == pred.broadcast_events_per_iter * run.iters
    )


# ---------------------------------------------------------------------------
# scaling harness


@dataclass
class HarnessConfig:
    """Base configuration; n scales with sqrt(p) for weak scaling runs."""

    n: int = 64
    m: int = 4
    k: int = 8
    p_list: tuple = (1, 4)
    k_list: tuple = (2, 4, 8)
    density: float = 1.0
    iters: int = 10
    seed: int = 0
    memory_budget_gb: float = 4.0


@dataclass
class ScalingRecord:
    kind: str
    p: int
    n: int
    m: int
    k: int
    density: float
    iters: int
    total_seconds: float
    compute_seconds: float
    comm_seconds: float
    phase_seconds: dict
    speedup: float
    efficiency: float
    flops: int
    phase_flops: dict
    allreduce_words: int
    broadcast_words: int
    words_predicted: int
    words_match: bool


def _harness_tensor(n: int, m: int, density: float, seed: int,
                    budget_gb: float):
    est_bytes = 3 * m * n * n * 8 * max(density, 1.0 / 3.0)
    if est_bytes > budget_gb * 2**30:
        raise DataError(
            f"configuration n={n}, m={m} needs ~{est_bytes/2**30:.1f} GiB, "
            f"over the {budget_gb} GiB budget"
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, 20, n, m)))
    x = RelTensor(rng.random((m, n, n)))
    if density < 1.0:
        return sparsify(x, density)
    return x


def _record_from_run(kind: str, run: InstrumentedRun, speedup: float,
                     efficiency: float) -> ScalingRecord:
    compute = sum(run.phase_seconds.get(ph, 0.0) for ph in COMPUTE_PHASES)
    comm = sum(run.phase_seconds.get(ph, 0.0) for ph in COMM_PHASES)
    pred = predict_cost(
        CostModelInput(n=run.n, m=run.m, k=run.k, p=run.p, density=run.density),
        include_trace=run.track_error,
    )
    return ScalingRecord(
        kind=kind, p=run.p, n=run.n, m=run.m, k=run.k, density=run.density,
        iters=run.iters,
        total_seconds=run.wall_seconds,
        compute_seconds=compute,
        comm_seconds=comm,
        phase_seconds=dict(run.phase_seconds),
        speedup=speedup,
        efficiency=efficiency,
        flops=run.flops,
        phase_flops=dict(run.phase_flops),
        allreduce_words=run.stats.total_words("all_reduce"),
        broadcast_words=run.stats.total_words("broadcast"),
        words_predicted=pred.comm_words_per_iter * run.iters,
        words_match=counts_match_prediction(run),
    )


def scaling_harness(kind: str, base: HarnessConfig) -> list:
    """Fixed-iteration runs across p (strong/weak) or k, with derived metrics.

    Strong scaling holds the tensor fixed and reports speedup T(1)/T(p);
    weak scaling grows n with sqrt(p) and reports efficiency as compute
    time over total time with speedup p * efficiency. k-scaling varies the
    rank at fixed n and p and reports counted components only.
    """
    if kind not in ("strong", "weak", "k"):
        raise DataError(f"unknown scaling kind {kind!r}")
    for p in base.p_list:
        g = math.isqrt(p)
        if g * g != p:
            raise DataError(f"p values must be perfect squares, got {p}")
    cfg = SolverConfig(max_iters=base.iters, seed=base.seed, track_error=False)
    records = []
    if kind == "k":
        p = base.p_list[0]
        x = _harness_tensor(base.n, base.m, base.density, base.seed, base.memory_budget_gb)
        for k in base.k_list:
            run = run_instrumented(x, k, cfg, p)
            records.append(_record_from_run("k", run, float("nan"), float("nan")))
        return records

    runs = []
    for p in base.p_list:
        n_p = base.n if kind == "strong" else int(base.n * math.isqrt(p))
        x = _harness_tensor(n_p, base.m, base.density, base.seed, base.memory_budget_gb)
        runs.append(run_instrumented(x, base.k, cfg, p))
    if kind == "strong":
        t1 = next((r.wall_seconds for r in runs if r.p == 1), None)
        for run in runs:
            s = t1 / run.wall_seconds if t1 is not None else float("nan")
            records.append(_record_from_run("strong", run, s, s / run.p))
    else:
        for run in runs:
            compute = sum(run.phase_seconds.get(ph, 0.0) for ph in COMPUTE_PHASES)
            e = min(compute / run.wall_seconds, 1.0) if run.wall_seconds > 0 else float("nan")
            records.append(_record_from_run("weak", run, run.p * e, e))
    return records


CSV_COLUMNS = (
    "kind", "p", "n", "m", "k", "density", "iters",
    "total_seconds", "compute_seconds", "comm_seconds",
    *(f"{ph}_seconds" for ph in COMPUTE_PHASES + COMM_PHASES),
    "speedup", "efficiency", "flops",
    *(f"{ph}_flops" for ph in COMPUTE_PHASES),
    "allreduce_words", "broadcast_words", "words_predicted", "words_match",
)


def write_scaling_csv(records, path) -> None:
    """One row per run; schema in CSV_COLUMNS (documented in the README)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in records:
            row = [
                r.kind, r.p, r.n, r.m, r.k, r.density, r.iters,
                f"{r.total_seconds:.6f}", f"{r.compute_seconds:.6f}", f"{r.comm_seconds:.6f}",
                *(f"{r.phase_seconds.get(ph, 0.0):.6f}" for ph in COMPUTE_PHASES + COMM_PHASES),
                f"{r.speedup:.4f}", f"{r.efficiency:.4f}", r.flops,
                *(r.phase_flops.get(ph, 0) for ph in COMPUTE_PHASES),
                r.allreduce_words, r.broadcast_words, r.words_predicted,
                "exact" if r.words_match else "mismatch",
            ]
            w.writerow(row)
