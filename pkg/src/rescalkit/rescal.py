"""Serial non-negative RESCAL via Frobenius multiplicative updates.

The model approximates each relation slice as X_t ~= A R_t A^T with A and
every R_t elementwise non-negative. One outer iteration updates every core
slice R_t in place and then applies a single accumulated update to A:

    R_t <- R_t * (A^T X_t A) / (A^T A R_t A^T A + eps)
    A   <- A * sum_t(X_t A R_t^T + X_t^T A R_t)
             / sum_t(A (R_t A^T A R_t^T + R_t^T A^T A R_t) + eps)

The update kernel is written against communication hooks so the distributed
solver can run the identical arithmetic on grid blocks; the serial path uses
identity hooks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NumericalError
from .grid import KernelCounters, counted_mm

_SEED_TAG_A = 1
_SEED_TAG_R = 2


@dataclass
class SolverConfig:
    """Multiplicative-update solver settings.

    ``epsilon`` guards denominators against division by zero. ``tolerance``
    stops early once the relative reconstruction error falls below it
    (checked every iteration); None runs all ``max_iters``. ``track_error``
    turns the per-iteration error trace off for pure-throughput runs.
    """

    max_iters: int = 200
    epsilon: float = 1e-16
    tolerance: float | None = None
    init: str = "random"  # "random" | "nndsvd"
    seed: int = 0
    track_error: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise DataError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.epsilon > 0:
            raise DataError(f"epsilon must be > 0, got {self.epsilon}")
        if self.init not in ("random", "nndsvd"):
            raise DataError(f"unknown init {self.init!r}")


@dataclass
class RescalFactors:
    """Factor pair: entity matrix A (n x k) and core stack R (m x k x k)."""

    A: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A)
        self.R = np.asarray(self.R)
        if self.A.ndim != 2 or self.R.ndim != 3:
            raise DataError(f"bad factor shapes {self.A.shape}, {self.R.shape}")
        if self.R.shape[1] != self.R.shape[2] or self.R.shape[1] != self.A.shape[1]:
            raise DataError(
                f"inconsistent latent dimension: A {self.A.shape}, R {self.R.shape}"
            )
        if (self.A.size and self.A.min() < 0) or (self.R.size and self.R.min() < 0):
            raise DataError("factors must be non-negative")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    def copy(self) -> "RescalFactors":
        return RescalFactors(self.A.copy(), self.R.copy())


class _SerialHooks:
    """Identity communication hooks: the whole tensor is one block."""

    @staticmethod
    def reduce_row(arr):
        return arr

    @staticmethod
    def reduce_col(arr):
        return arr

    @staticmethod
    def bcast_diag_row(arr):
        return arr

    @staticmethod
    def bcast_diag_col(arr):
        return arr


_SERIAL_HOOKS = _SerialHooks()


def _mu_iteration(x_ops, a_row, a_col, r, eps, hooks=_SERIAL_HOOKS,
                  counters: KernelCounters | None = None):
    """One fused outer iteration; mutates ``r`` in place, returns new A blocks.

    ``x_ops[t]`` is the local block of slice t; ``a_row``/``a_col`` are this
    rank's block-row of A and the replicated block needed on the column axis
    (the same array serially). The Gram matrix is formed once per iteration
    and reused by every slice update.
    """
    m = len(x_ops)
    ata = hooks.reduce_col(counted_mm(a_row.T, a_row, counters, phase="gram_mul"))
    num_a = np.zeros_like(a_row)
    deno_a = np.zeros_like(a_row)
    for t in range(m):
        xa = hooks.reduce_row(np.asarray(counted_mm(x_ops[t], a_col, counters)))
        atxa = hooks.reduce_col(counted_mm(a_row.T, xa, counters, phase="gram_mul"))
        rata = counted_mm(r[t], ata, counters)
        deno_r = counted_mm(ata, rata, counters) + eps
        r[t] = r[t] * atxa / deno_r
        xart = counted_mm(xa, r[t].T, counters)
        ar = counted_mm(a_row, r[t], counters)
        xtar = hooks.reduce_col(np.asarray(counted_mm(x_ops[t].T, ar, counters)))
        xtar = hooks.bcast_diag_row(xtar)
        num_a += xart + xtar
        atar = counted_mm(ata, r[t], counters)
        art = counted_mm(a_row, r[t].T, counters)
        artatar = counted_mm(art, atar, counters)
        atart = counted_mm(ata, r[t].T, counters)
        aratart = counted_mm(ar, atart, counters)
        deno_a += artatar + aratart + eps
    a_row = a_row * num_a / deno_a
    a_col = hooks.bcast_diag_col(a_row)
    return a_row, a_col


def _local_sq_residual(x_ops, a_row, a_col, r, counters=None) -> float:
    """Sum over slices of the squared residual on this rank's block."""
    total = 0.0
    for t in range(len(x_ops)):
        rec = counted_mm(counted_mm(a_row, r[t], counters), a_col.T, counters)
        x_t = x_ops[t]
        diff = (x_t.toarray() if sp.issparse(x_t) else x_t) - rec
        total += float(np.sum(diff.astype(np.float64) ** 2))
    return total


def _local_sq_norm(x_ops) -> float:
    total = 0.0
    for x_t in x_ops:
        vals = x_t.data if sp.issparse(x_t) else x_t
        total += float(np.sum(np.asarray(vals, dtype=np.float64) ** 2))
    return total


def _check_finite(a, r):
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(r))):
        raise NumericalError("non-finite value in factors; aborting")


def random_init(n: int, k: int, m: int, seed: int, dtype=np.float64) -> RescalFactors:
    """Seeded uniform initialization, independent of any block partitioning.

    The full A is drawn from one stream so a distributed rank can slice its
    block-row and reproduce exactly what the serial solver starts from.
    """
    rng_a = np.random.default_rng(np.random.SeedSequence((seed, _SEED_TAG_A)))
    rng_r = np.random.default_rng(np.random.SeedSequence((seed, _SEED_TAG_R)))
    a = rng_a.random((n, k), dtype=np.float64).astype(dtype)
    r = rng_r.random((m, k, k), dtype=np.float64).astype(dtype)
    return RescalFactors(a, r)


def rescal_solve(x, k: int, cfg: SolverConfig | None = None, initial=None,
                 counters: KernelCounters | None = None):
    """Factorize ``x`` at rank ``k``; returns (factors, error_trace).

    The trace holds the relative reconstruction error after each outer
    iteration; the loop stops at ``cfg.max_iters`` or as soon as the error
    drops below ``cfg.tolerance``.
    """
    cfg = cfg or SolverConfig()
    if not 1 <= k <= x.n:
        raise DataError(f"need 1 <= k <= n, got k={k}, n={x.n}")
    x_ops = x.slice_ops()
    if initial is not None:
        f = initial.copy()
        if f.A.shape != (x.n, k) or f.R.shape != (x.m, k, k):
            raise DataError("initial factors do not match tensor/k")
    elif cfg.init == "nndsvd":
        f = nndsvd_init(x, k, eps=cfg.epsilon)
    else:
        f = random_init(x.n, k, x.m, cfg.seed, dtype=x.dtype)
        if f.A.dtype != x.dtype:
            f = RescalFactors(f.A.astype(x.dtype), f.R.astype(x.dtype))
    a, r = f.A.copy(), f.R.copy()
    eps = x.dtype.type(cfg.epsilon)

    norm_sq = _local_sq_norm(x_ops) if cfg.track_error else None
    if cfg.track_error and norm_sq == 0.0:
        raise DataError("cannot track relative error: tensor norm is zero")
    trace = []
    for _ in range(cfg.max_iters):
        a, _ = _mu_iteration(x_ops, a, a, r, eps, counters=counters)
        _check_finite(a, r)
        if cfg.track_error:
            err = float(np.sqrt(_local_sq_residual(x_ops, a, a, r, counters) / norm_sq))
            if not np.isfinite(err):
                raise NumericalError("non-finite reconstruction error")
            trace.append(err)
            if cfg.tolerance is not None and err < cfg.tolerance:
                break
    return RescalFactors(a, r), np.asarray(trace)


def update_r(x, f: RescalFactors, cfg: SolverConfig | None = None) -> RescalFactors:
    """One multiplicative pass over all core slices, A held fixed."""
    cfg = cfg or SolverConfig()
    _check_shapes(x, f)
    a = f.A
    eps = a.dtype.type(cfg.epsilon)
    ata = a.T @ a
    r_new = f.R.copy()
    for t, x_t in enumerate(x.slice_ops()):
        atxa = a.T @ np.asarray(x_t @ a)
        deno = ata @ (r_new[t] @ ata) + eps
        r_new[t] = r_new[t] * atxa / deno
    return RescalFactors(a, r_new)


def update_a(x, f: RescalFactors, cfg: SolverConfig | None = None) -> RescalFactors:
    """One accumulated multiplicative update of A, core slices held fixed."""
    cfg = cfg or SolverConfig()
    _check_shapes(x, f)
    a, r = f.A, f.R
    eps = a.dtype.type(cfg.epsilon)
    ata = a.T @ a
    num = np.zeros_like(a)
    deno = np.zeros_like(a)
    for t, x_t in enumerate(x.slice_ops()):
        xa = np.asarray(x_t @ a)
        ar = a @ r[t]
        num += xa @ r[t].T + np.asarray(x_t.T @ ar)
        art = a @ r[t].T
        deno += art @ (ata @ r[t]) + ar @ (ata @ r[t].T) + eps
    return RescalFactors(a * num / deno, r)


def _check_shapes(x, f: RescalFactors) -> None:
    if f.A.shape[0] != x.n or f.R.shape[0] != x.m:
        raise DataError(
            f"shape mismatch: tensor (n={x.n}, m={x.m}) vs factors "
            f"A {f.A.shape}, R {f.R.shape}"
        )


def rel_error(x, f: RescalFactors) -> float:
    """Relative reconstruction error |X - A R A^T|_F / |X|_F."""
    _check_shapes(x, f)
    norm_sq = _local_sq_norm(x.slice_ops())
    if norm_sq == 0.0:
        raise DataError("relative error undefined: tensor norm is zero")
    res = _local_sq_residual(x.slice_ops(), f.A, f.A, f.R)
    return float(np.sqrt(res / norm_sq))


def finalize_normalize(f: RescalFactors) -> RescalFactors:
    """Rescale so columns of A have unit norm, compensating inside R.

    With D = diag of the original column norms, A becomes A D^-1 and each
    core slice becomes D R_t D, leaving every reconstruction A R_t A^T
    unchanged. Zero columns keep scale 1.
    """
    norms = np.linalg.norm(f.A, axis=0)
    scale = np.where(norms > 0, norms, 1.0).astype(f.A.dtype)
    a = f.A / scale
    r = f.R * scale[None, :, None] * scale[None, None, :]
    return RescalFactors(a, r)


def regress_r(x, a_fixed: np.ndarray, cfg: SolverConfig | None = None,
              max_iters: int = 500, tol: float | None = 1e-8) -> np.ndarray:
    """Fit the core stack to ``x`` with A frozen, by iterated R updates.

    Starts from all-ones slices and stops when the relative change of the
    stack drops below ``tol`` or after ``max_iters`` passes.
    """
    cfg = cfg or SolverConfig()
    a = np.asarray(a_fixed)
    if a.ndim != 2 or a.shape[0] != x.n:
        raise DataError(f"A must be (n, k) with n={x.n}, got {a.shape}")
    if a.size and a.min() < 0:
        raise DataError("A must be non-negative")
    k = a.shape[1]
    eps = a.dtype.type(cfg.epsilon)
    ata = a.T @ a
    atxa = np.stack([a.T @ np.asarray(x_t @ a) for x_t in x.slice_ops()])
    r = np.ones((x.m, k, k), dtype=a.dtype)
    for _ in range(max_iters):
        r_new = np.empty_like(r)
        for t in range(x.m):
            r_new[t] = r[t] * atxa[t] / (ata @ (r[t] @ ata) + eps)
        if tol is not None:
            denom = float(np.linalg.norm(r.astype(np.float64)))
            delta = float(np.linalg.norm((r_new - r).astype(np.float64)))
            r = r_new
            if denom == 0.0 or delta / denom < tol:
                break
        else:
            r = r_new
    _check_finite(a, r)
    return r


def nndsvd_init(x, k: int, r_update_iters: int = 20, eps: float = 1e-16) -> RescalFactors:
    """Deterministic initialization from an SVD of the stacked unfoldings.

    A comes from the non-negative left factors of [X_1 .. X_m | X_1^T .. X_m^T];
    the core stack is then fitted by a short run of R updates. Exact zeros
    (and rank-deficient columns) are filled with a small positive constant so
    multiplicative updates are not locked out of those entries.
    """
    if not 1 <= k <= x.n:
        raise DataError(f"need 1 <= k <= n, got k={k}, n={x.n}")
    ops = x.slice_ops()
    sparse_input = sp.issparse(ops[0])
    if sparse_input:
        m_mat = sp.hstack([*(o.tocsr() for o in ops), *(o.T.tocsr() for o in ops)], format="csr")
    else:
        m_mat = np.concatenate([*ops, *(o.T for o in ops)], axis=1)

    if sparse_input and k < x.n:
        u, s, vt = sp.linalg.svds(m_mat.astype(np.float64), k=k)
        order = np.argsort(s)[::-1]
        u, s, vt = u[:, order], s[order], vt[order]
    else:
        dense = m_mat.toarray() if sparse_input else np.asarray(m_mat, dtype=np.float64)
        u, s, vt = np.linalg.svd(dense, full_matrices=False)
        u, s, vt = u[:, :k], s[:k], vt[:k]

    a = np.zeros((x.n, k))
    lead = u[:, 0] if u[:, 0].sum() >= 0 else -u[:, 0]
    a[:, 0] = np.sqrt(s[0]) * np.maximum(lead, 0.0)
    for j in range(1, k):
        xu, yv = u[:, j], vt[j]
        xp, xm = np.maximum(xu, 0.0), np.maximum(-xu, 0.0)
        yp, ym = np.maximum(yv, 0.0), np.maximum(-yv, 0.0)
        mu_p = np.linalg.norm(xp) * np.linalg.norm(yp)
        mu_m = np.linalg.norm(xm) * np.linalg.norm(ym)
        if max(mu_p, mu_m) <= 0 or s[j] <= 0:
            continue  # rank-deficient direction, filled below
        part, norm = (xp, np.linalg.norm(xp)) if mu_p >= mu_m else (xm, np.linalg.norm(xm))
        a[:, j] = np.sqrt(s[j] * max(mu_p, mu_m)) * part / norm

    positives = _positive_mean(ops)
    fill = 1e-2 * positives if positives > 0 else 1e-2
    a[a == 0] = fill
    a = a.astype(x.dtype)
    r = regress_r(x, a, SolverConfig(epsilon=eps), max_iters=r_update_iters, tol=None)
    return RescalFactors(a, r)


def _positive_mean(ops) -> float:
    total, count = 0.0, 0
    for o in ops:
        vals = np.asarray(o.data) if sp.issparse(o) else np.asarray(o).ravel()
        vals = vals[vals > 0]
        total += float(vals.sum())
        count += vals.size
    return total / count if count else 0.0
