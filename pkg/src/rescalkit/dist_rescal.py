"""Distributed RESCAL on the 2D grid, plus resampling and factor gathering.

Data layout per rank (i, j): the local tensor block X[i,j] (all m slices),
the block-row A[i] of the entity factor, a replicated copy of block A[j]
for the column-axis products, and the full core stack R. Per iteration:

* A^T A: local Gram of A[i], summed across the column communicator.
* X_t A: local X[i,j] @ A[j], summed across the row communicator.
* A^T X_t A and X_t^T (A R_t): local products summed across the column
  communicator; the latter lands as block j and is re-broadcast from the
  diagonal rank along the row so every rank obtains block i.
* After the accumulated A update, diagonal ranks broadcast their new block
  down the column so A[j] copies stay exact.

Padding rows introduced by the block partition start at zero and stay zero
under multiplicative updates; gathering trims them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError, GridError, NumericalError
from .grid import GridContext
from .rescal import (
    RescalFactors,
    SolverConfig,
    _check_finite,
    _local_sq_norm,
    _local_sq_residual,
    _mu_iteration,
    random_init,
)
from .tensor import RelTensor, SparseRelTensor, TensorBlock

_SEED_TAG_PERTURB = 3


@dataclass
class PerturbConfig:
    """Resampling noise: elementwise multipliers uniform in [1-delta, 1+delta].

    The multiplier field is derived from (base_seed, perturbation index)
    alone, so the same logical tensor is produced for any grid size.
    """

    delta: float = 0.02
    base_seed: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise DataError(f"delta must be > 0, got {self.delta}")


@dataclass
class DistFactors:
    """Per-rank factor state: block-row of A, replicated column block, full R."""

    a_row: np.ndarray
    a_col: np.ndarray
    r: np.ndarray
    i: int
    j: int
    n_global: int

    @property
    def k(self) -> int:
        return self.a_row.shape[1]


class _GridHooks:
    """Communication hooks binding the update kernel to a grid rank."""

    def __init__(self, ctx: GridContext):
        self.ctx = ctx

    def reduce_row(self, arr):
        return self.ctx.row_comm.all_reduce_sum(arr)

    def reduce_col(self, arr):
        return self.ctx.col_comm.all_reduce_sum(arr)

    def bcast_diag_row(self, arr):
        ctx = self.ctx
        return ctx.row_comm.broadcast(arr if ctx.is_diagonal else None, root=ctx.i)

    def bcast_diag_col(self, arr):
        ctx = self.ctx
        return ctx.col_comm.broadcast(arr if ctx.is_diagonal else None, root=ctx.j)


def _global_sum(ctx: GridContext, value: float) -> float:
    """Scalar sum over all p ranks: row-axis stage then column-axis stage."""
    partial = ctx.row_comm.all_reduce_sum(np.array([value], dtype=np.float64))
    total = ctx.col_comm.all_reduce_sum(partial)
    return float(total[0])


def _padded_block(a_global: np.ndarray, block: int, b: int) -> np.ndarray:
    """Rows [block*b, (block+1)*b) of A, zero-padded past the true n."""
    n, k = a_global.shape
    out = np.zeros((b, k), dtype=a_global.dtype)
    r0 = block * b
    r1 = min(r0 + b, n)
    if r1 > r0:
        out[: r1 - r0] = a_global[r0:r1]
    return out


def dist_rescal_solve(xblock: TensorBlock, k: int, cfg: SolverConfig,
                      ctx: GridContext, initial: RescalFactors | None = None):
    """Collective RESCAL solve; every rank returns its DistFactors and the trace.

    Initialization reproduces the serial solver's seeded start: the global
    initial factors are generated from cfg.seed and each rank slices the
    block it owns.
    """
    n = xblock.n_global
    if not 1 <= k <= n:
        raise DataError(f"need 1 <= k <= n, got k={k}, n={n}")
    if xblock.block_dim * ctx.grid_dim < n:
        raise GridError(
            f"{ctx.grid_dim}x{ctx.grid_dim} grid of {xblock.block_dim}-blocks cannot cover n={n}"
        )
    if (xblock.i, xblock.j) != (ctx.i, ctx.j):
        raise GridError(
            f"block ({xblock.i},{xblock.j}) handed to rank ({ctx.i},{ctx.j})"
        )
    b = xblock.block_dim
    if cfg.init == "nndsvd" and initial is None:
        raise DataError("distributed solve needs explicit initial factors for nndsvd init")
    f0 = initial if initial is not None else random_init(n, k, xblock.m, cfg.seed, dtype=xblock.dtype)
    if f0.A.shape != (n, k) or f0.R.shape != (xblock.m, k, k):
        raise DataError("initial factors do not match tensor/k")
    a_row = _padded_block(f0.A, ctx.i, b)
    a_col = _padded_block(f0.A, ctx.j, b)
    r = f0.R.astype(xblock.dtype).copy()
    eps = np.dtype(xblock.dtype).type(cfg.epsilon)
    hooks = _GridHooks(ctx)
    x_ops = xblock.slice_ops()

    norm_sq = _global_sum(ctx, _local_sq_norm(x_ops)) if cfg.track_error else None
    if cfg.track_error and norm_sq == 0.0:
        raise DataError("cannot track relative error: tensor norm is zero")
    trace = []
    for _ in range(cfg.max_iters):
        a_row, a_col = _mu_iteration(x_ops, a_row, a_col, r, eps, hooks, ctx.counters)
        _check_finite(a_row, r)
        if cfg.track_error:
            res = _global_sum(ctx, _local_sq_residual(x_ops, a_row, a_col, r, ctx.counters))
            err = float(np.sqrt(res / norm_sq))
            if not np.isfinite(err):
                raise NumericalError("non-finite reconstruction error")
            trace.append(err)
            if cfg.tolerance is not None and err < cfg.tolerance:
                break
    df = DistFactors(a_row=a_row, a_col=a_col, r=r, i=ctx.i, j=ctx.j, n_global=n)
    return df, np.asarray(trace)


def perturbation_field(n: int, m: int, pcfg: PerturbConfig, q: int,
                       dtype=np.float64) -> np.ndarray:
    """The full (m, n, n) multiplier field for perturbation q."""
    rng = np.random.default_rng(
        np.random.SeedSequence((pcfg.base_seed, _SEED_TAG_PERTURB, q))
    )
    field = 1.0 + pcfg.delta * (2.0 * rng.random((m, n, n)) - 1.0)
    return field.astype(dtype)


def dist_perturb(xblock: TensorBlock, pcfg: PerturbConfig, q: int,
                 ctx: GridContext | None = None) -> TensorBlock:
    """Elementwise resampling of the local block; no communication.

    Sparse blocks keep their zero pattern: multipliers are applied to stored
    values only.
    """
    n, m = xblock.n_global, xblock.m
    field = perturbation_field(n, m, pcfg, q, dtype=xblock.dtype)
    r0, c0 = xblock.row_start, xblock.col_start
    r1, c1 = min(r0 + xblock.block_dim, n), min(c0 + xblock.block_dim, n)
    if xblock.is_sparse:
        slices = []
        for t, s in enumerate(xblock.slices):
            coo = s.tocoo()
            data = coo.data * field[t, r0 + coo.row, c0 + coo.col]
            blk = sp.csr_matrix(
                (data, (coo.row, coo.col)), shape=s.shape, dtype=s.dtype
            )
            blk.sort_indices()
            slices.append(blk)
    else:
        slices = xblock.slices.copy()
        if r1 > r0 and c1 > c0:
            slices[:, : r1 - r0, : c1 - c0] *= field[:, r0:r1, c0:c1]
    return TensorBlock(
        i=xblock.i, j=xblock.j, block_dim=xblock.block_dim, n_global=n, m=m,
        slices=slices, row_start=r0, col_start=c0,
    )


def perturb(x, pcfg: PerturbConfig, q: int):
    """Whole-tensor resampling with the same multiplier field the grid uses."""
    field = perturbation_field(x.n, x.m, pcfg, q, dtype=x.dtype)
    if isinstance(x, SparseRelTensor):
        slices = []
        for t, s in enumerate(x.slices):
            coo = s.tocoo()
            data = coo.data * field[t, coo.row, coo.col]
            slices.append(sp.csr_matrix((data, (coo.row, coo.col)), shape=s.shape, dtype=s.dtype))
        return SparseRelTensor(slices, n=x.n)
    return RelTensor(x.slices * field)


def gather_factors(df: DistFactors, ctx: GridContext) -> RescalFactors:
    """Assemble the global factors; collective over all ranks.

    Block-rows of A are stacked in grid order with padding trimmed; R is
    taken from rank 0 after a byte-level replication check.
    """
    payload = (ctx.i, ctx.j, df.a_row, df.r.tobytes())
    gathered = ctx.world_comm.all_gather(payload)
    r_ref = gathered[0][3]
    for rank, (_, _, _, r_bytes) in enumerate(gathered):
        if r_bytes != r_ref:
            raise GridError(f"core stack differs on rank {rank}: broken run")
    rows = {i: a for i, j, a, _ in gathered if j == 0}
    a_full = np.vstack([rows[i] for i in range(ctx.grid_dim)])
    a = a_full[: df.n_global]
    r = np.frombuffer(r_ref, dtype=df.r.dtype).reshape(df.r.shape).copy()
    return RescalFactors(a.copy(), r)


def solve_on_grid(x, k: int, cfg: SolverConfig, p: int,
                  initial: RescalFactors | None = None, timeout: float = 30.0,
                  with_counters: bool = False):
    """Partition ``x`` over p ranks, solve, and gather. Returns per-rank output
    of (gathered factors, trace, ctx) with identical factors on every rank."""
    from .grid import spawn_grid
    from .tensor import partition_block

    def program(ctx):
        blk = partition_block(x, ctx.grid_dim, ctx.i, ctx.j)
        df, trace = dist_rescal_solve(blk, k, cfg, ctx, initial=initial)
        factors = gather_factors(df, ctx)
        return factors, trace, ctx

    results = spawn_grid(p, program, timeout=timeout, with_counters=with_counters)
    return results[0]
