"""Latent-dimension selection from perturbation ensembles.

For each candidate k, the input tensor is resampled r times and factorized;
the r solutions' entity columns are aligned by a permutation-constrained
k-medians (each cluster takes exactly one column from every solution, cosine
similarity, Hungarian assignment), cluster stability is scored with
silhouette widths under cosine distance, and a core stack is re-fitted to
the median columns to measure reconstruction error. The chosen k_opt is the
largest k whose minimum silhouette stays above a threshold.

All steps run serially or on the 2D grid: entity rows are block-distributed,
so similarity matrices are assembled by summing local inner products across
the column communicator, and per-element medians need no communication.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .dist_rescal import (
    DistFactors,
    PerturbConfig,
    dist_perturb,
    dist_rescal_solve,
    perturb,
)
from .grid import GridContext
from .rescal import (
    RescalFactors,
    SolverConfig,
    finalize_normalize,
    nndsvd_init,
    random_init,
    regress_r,
    rel_error,
    rescal_solve,
)
from .tensor import partition_block

_SEED_TAG_ENSEMBLE = 4


# ---------------------------------------------------------------------------
# linear sum assignment (Hungarian method with potentials, O(k^3))


def lsa(cost: np.ndarray, mode: str = "minimize") -> np.ndarray:
    """Optimal row-to-column assignment of a square cost matrix.

    Returns ``perm`` with ``perm[row] = column`` minimizing (or maximizing)
    the sum of assigned entries.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DataError(f"cost matrix must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DataError("cost matrix has non-finite entries")
    if mode == "maximize":
        c = -c
    elif mode != "minimize":
        raise DataError(f"unknown mode {mode!r}")
    n = c.shape[0]

    # Shortest-augmenting-path formulation with dual potentials u, v.
    # match[j] is the row matched to column j; index 0 is a virtual column.
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    return perm


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class FactorEnsemble:
    """Stacked solutions from r resamplings.

    ``A_stack`` is (n, k, r) (block rows when grid-distributed); ``R_stack``
    is (k, k, m, r) and may be omitted where only columns are clustered.
    """

    A_stack: np.ndarray
    R_stack: np.ndarray | None = None

    def __post_init__(self):
        self.A_stack = np.asarray(self.A_stack)
        if self.A_stack.ndim != 3:
            raise DataError(f"A_stack must be (n, k, r), got {self.A_stack.shape}")
        if self.A_stack.size and self.A_stack.min() < 0:
            raise DataError("ensemble factors must be non-negative")

    @property
    def k(self) -> int:
        return self.A_stack.shape[1]

    @property
    def r(self) -> int:
        return self.A_stack.shape[2]


@dataclass
class ClusterResult:
    """Aligned ensemble, elementwise medians, and the applied permutations."""

    ensemble: FactorEnsemble
    medians: np.ndarray
    permutations: np.ndarray  # (r, k): aligned[:, c, q] = raw[:, permutations[q, c], q]
    iterations: int
    converged: bool


@dataclass
class SilhouetteStats:
    """Cosine-distance silhouette summary over r points in each of k clusters.

    ``I`` holds within-cluster mean distances (self-distance included,
    divisor r), ``J`` the smallest mean distance to any other cluster.
    ``G`` is the within-cluster distance tensor; ``Z``/``Y`` retain the last
    cross-cluster block and its row means. ``single_cluster`` flags the k=1
    convention s=1.
    """

    I: np.ndarray
    J: np.ndarray
    G: np.ndarray
    Z: np.ndarray | None
    Y: np.ndarray | None
    s_points: np.ndarray
    s_min: float
    s_avg: float
    single_cluster: bool = False


def _reduce_blockrows(ctx: GridContext | None, arr: np.ndarray) -> np.ndarray:
    """Sum a per-block-row partial across the grid (identity serially)."""
    if ctx is None:
        return arr
    return ctx.col_comm.all_reduce_sum(arr)


def _normalized_columns(a_stack: np.ndarray, ctx: GridContext | None) -> np.ndarray:
    """Scale every (column, perturbation) to unit global norm; zeros stay zero."""
    sq = _reduce_blockrows(ctx, np.sum(a_stack.astype(np.float64) ** 2, axis=0))
    norms = np.sqrt(sq)
    scale = np.where(norms > 0, norms, 1.0)
    return a_stack / scale[None, :, :]


def custom_cluster(ens: FactorEnsemble, ctx: GridContext | None = None,
                   max_iters: int = 100) -> ClusterResult:
    """Align ensemble columns so matching latent communities share an index.

    The medoid starts as the first solution; each sweep scores every
    solution's columns against the medoid by cosine similarity (one
    all_reduce of the k x k x r stack when distributed), permutes them by
    Hungarian assignment, and refreshes the medoid with elementwise medians.
    Stops when a sweep applies only identity permutations.
    """
    if ens.r < 2:
        raise DataError(f"need r >= 2 solutions, got {ens.r}")
    k, r = ens.k, ens.r
    a_hat = _normalized_columns(ens.A_stack, ctx)
    aligned = ens.A_stack.copy()
    aligned_hat = a_hat.copy()
    total = np.tile(np.arange(k), (r, 1))
    medoid = aligned[:, :, 0].copy()
    identity = np.arange(k)
    converged = False
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        local = np.einsum("nc,nlq->clq", medoid, aligned_hat)
        sim = _reduce_blockrows(ctx, local)
        perms = [lsa(sim[:, :, q], mode="maximize") for q in range(r)]
        if all(np.array_equal(p, identity) for p in perms):
            converged = True
            break
        for q, p in enumerate(perms):
            aligned[:, :, q] = aligned[:, p, q]
            aligned_hat[:, :, q] = aligned_hat[:, p, q]
            total[q] = total[q][p]
        medoid = np.median(aligned, axis=2)
    medians = np.median(aligned, axis=2)
    r_stack = None
    if ens.R_stack is not None:
        r_stack = ens.R_stack.copy()
        for q in range(r):
            p = total[q]
            r_stack[:, :, :, q] = r_stack[p][:, p][:, :, :, q]
    return ClusterResult(
        ensemble=FactorEnsemble(aligned, r_stack),
        medians=medians,
        permutations=total,
        iterations=iterations,
        converged=converged,
    )


def cluster_stability(ens: FactorEnsemble, ctx: GridContext | None = None) -> SilhouetteStats:
    """Silhouette widths of the aligned clusters under cosine distance.

    Inner products are summed across block rows first (distances are not
    additive), then converted to distances. The cross-cluster pass reduces
    one r x r x k block per cluster, mirroring the distributed schedule.
    """
    if ens.r < 2:
        raise DataError(f"need r >= 2 solutions, got {ens.r}")
    k, r = ens.k, ens.r
    a_hat = _normalized_columns(ens.A_stack, ctx)

    local_g = np.empty((r, r, k))
    for c in range(k):
        u = a_hat[:, c, :]
        local_g[:, :, c] = u.T @ u
    g_dist = 1.0 - _reduce_blockrows(ctx, local_g)
    i_mat = g_dist.mean(axis=1)  # (r, k)

    if k == 1:
        s_points = np.ones((r, 1))
        return SilhouetteStats(
            I=i_mat, J=np.ones((r, 1)), G=g_dist, Z=None, Y=None,
            s_points=s_points, s_min=1.0, s_avg=1.0, single_cluster=True,
        )

    j_mat = np.empty((r, k))
    z_dist = None
    y_mat = None
    for c in range(k):
        local_z = np.zeros((r, r, k))
        u = a_hat[:, c, :]
        for other in range(k):
            if other == c:
                continue
            local_z[:, :, other] = u.T @ a_hat[:, other, :]
        z_dist = 1.0 - _reduce_blockrows(ctx, local_z)
        y_mat = z_dist.mean(axis=1)  # (r, k)
        y_masked = y_mat.copy()
        y_masked[:, c] = np.inf
        j_mat[:, c] = y_masked.min(axis=1)

    peak = np.maximum(j_mat, i_mat)
    with np.errstate(invalid="ignore", divide="ignore"):
        s_points = np.where(peak > 0, (j_mat - i_mat) / peak, 0.0)
    return SilhouetteStats(
        I=i_mat, J=j_mat, G=g_dist, Z=z_dist, Y=y_mat,
        s_points=s_points,
        s_min=float(s_points.min()),
        s_avg=float(s_points.mean()),
    )


# ---------------------------------------------------------------------------
# selection driver


@dataclass
class SelectionEntry:
    k: int
    s_min: float
    s_avg: float
    rel_error: float
    medians: np.ndarray = field(repr=False)
    core: np.ndarray = field(repr=False)
    converged: bool = True


@dataclass
class SelectionReport:
    entries: list
    k_opt: int
    low_confidence: bool
    tau_s: float
    params: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def entry(self, k: int) -> SelectionEntry:
        for e in self.entries:
            if e.k == k:
                return e
        raise KeyError(k)

    def to_json_dict(self) -> dict:
        return {
            "k_opt": self.k_opt,
            "low_confidence": self.low_confidence,
            "tau_s": self.tau_s,
            "per_k": {
                str(e.k): {
                    "s_min": e.s_min,
                    "s_avg": e.s_avg,
                    "rel_error": e.rel_error,
                }
                for e in self.entries
            },
            "parameters": self.params,
            "timing": self.timing,
        }


def select_k(entries, tau_s: float = 0.75) -> int:
    """Largest k whose minimum silhouette clears the threshold.

    Falls back to the k with the best
    minimum silhouette when none qualifies (callers flag low confidence).
    """
    if not entries:
        raise DataError("no selection entries")
    qualified = [e.k for e in entries if e.s_min >= tau_s]
    if qualified:
        return max(qualified)
    return max(entries, key=lambda e: e.s_min).k


def _ensemble_seed(base_seed: int, k: int, q: int) -> tuple:
    return (base_seed, _SEED_TAG_ENSEMBLE, k, q)


def _dist_normalize(df: DistFactors, ctx: GridContext):
    """Unit global column norms for a block-distributed A, rescaling R."""
    sq = ctx.col_comm.all_reduce_sum(np.sum(df.a_row.astype(np.float64) ** 2, axis=0))
    norms = np.sqrt(sq)
    scale = np.where(norms > 0, norms, 1.0).astype(df.a_row.dtype)
    a_row = df.a_row / scale
    r = df.r * scale[None, :, None] * scale[None, None, :]
    return a_row, r


def _dist_regress(xblock, a_row_med: np.ndarray, ctx: GridContext, cfg: SolverConfig,
                  max_iters: int = 500, tol: float = 1e-8) -> np.ndarray:
    """Distributed twin of regress_r for a block-distributed fixed A."""
    a_col = ctx.col_comm.broadcast(
        a_row_med if ctx.is_diagonal else None, root=ctx.j
    )
    eps = a_row_med.dtype.type(cfg.epsilon)
    ata = ctx.col_comm.all_reduce_sum(a_row_med.T @ a_row_med)
    x_ops = xblock.slice_ops()
    atxa = np.stack([
        ctx.col_comm.all_reduce_sum(
            a_row_med.T @ ctx.row_comm.all_reduce_sum(np.asarray(x_t @ a_col))
        )
        for x_t in x_ops
    ])
    k = a_row_med.shape[1]
    r = np.ones((xblock.m, k, k), dtype=a_row_med.dtype)
    for _ in range(max_iters):
        r_new = np.empty_like(r)
        for t in range(xblock.m):
            r_new[t] = r[t] * atxa[t] / (ata @ (r[t] @ ata) + eps)
        denom = float(np.linalg.norm(r.astype(np.float64)))
        delta = float(np.linalg.norm((r_new - r).astype(np.float64)))
        r = r_new
        if denom == 0.0 or delta / denom < tol:
            break
    return r


def _dist_rel_error(xblock, a_row: np.ndarray, a_col: np.ndarray, r: np.ndarray,
                    ctx: GridContext) -> float:
    from .dist_rescal import _global_sum
    from .rescal import _local_sq_norm, _local_sq_residual

    x_ops = xblock.slice_ops()
    norm_sq = _global_sum(ctx, _local_sq_norm(x_ops))
    if norm_sq == 0.0:
        raise DataError("relative error undefined: tensor norm is zero")
    res = _global_sum(ctx, _local_sq_residual(x_ops, a_row, a_col, r))
    return float(np.sqrt(res / norm_sq))


def _gather_blockrows(ctx: GridContext, local: np.ndarray, n_global: int) -> np.ndarray:
    """Stack per-block-row arrays into the global matrix, trimming padding."""
    gathered = ctx.world_comm.all_gather((ctx.i, ctx.j, local))
    rows = {i: a for i, j, a in gathered if j == 0}
    return np.vstack([rows[i] for i in range(ctx.grid_dim)])[:n_global]


def rescalk(x, k_min: int, k_max: int, r: int, cfg: SolverConfig | None = None,
            pcfg: PerturbConfig | None = None, ctx: GridContext | None = None,
            tau_s: float = 0.75) -> SelectionReport:
    """Factorize r resamplings per k, score stability, and pick k_opt.

    ``x`` is the full tensor on every rank; grid mode slices the local block
    internally. The report carries per-k silhouette and error statistics plus
    the median factors and regressed core for each k.
    """
    cfg = cfg or SolverConfig()
    pcfg = pcfg or PerturbConfig()
    if not (1 <= k_min <= k_max <= x.n):
        raise DataError(f"need 1 <= k_min <= k_max <= n, got [{k_min}, {k_max}], n={x.n}")
    if r < 2:
        raise DataError(f"need r >= 2 perturbations, got {r}")

    t_start = time.perf_counter()
    xblock = None
    if ctx is not None:
        xblock = partition_block(x, ctx.grid_dim, ctx.i, ctx.j)

    entries = []
    timing = {"per_k_seconds": {}}
    for k in range(k_min, k_max + 1):
        t_k = time.perf_counter()
        a_cols, r_slabs, solved = [], [], True
        for q in range(1, r + 1):
            if ctx is None:
                xq = perturb(x, pcfg, (k, q))
                initial = (
                    None if cfg.init == "nndsvd"
                    else random_init(x.n, k, x.m, _ensemble_seed(cfg.seed, k, q), dtype=x.dtype)
                )
                factors, trace = rescal_solve(xq, k, cfg, initial=initial)
                factors = finalize_normalize(factors)
                a_cols.append(factors.A)
                r_slabs.append(factors.R)
            else:
                xq_block = dist_perturb(xblock, pcfg, (k, q), ctx)
                if cfg.init == "nndsvd":
                    initial = nndsvd_init(perturb(x, pcfg, (k, q)), k, eps=cfg.epsilon)
                else:
                    initial = random_init(x.n, k, x.m, _ensemble_seed(cfg.seed, k, q), dtype=x.dtype)
                df, trace = dist_rescal_solve(xq_block, k, cfg, ctx, initial=initial)
                a_row, r_core = _dist_normalize(df, ctx)
                a_cols.append(a_row)
                r_slabs.append(r_core)
            solved = solved and (len(trace) == 0 or np.isfinite(trace[-1]))
        a_stack = np.stack(a_cols, axis=2)  # (rows, k, r)
        r_stack = np.stack([np.transpose(s, (1, 2, 0)) for s in r_slabs], axis=3)
        ens = FactorEnsemble(a_stack, r_stack)
        clus = custom_cluster(ens, ctx)
        stats = cluster_stability(clus.ensemble, ctx)
        if ctx is None:
            core = regress_r(x, clus.medians, cfg)
            err = rel_error(x, RescalFactors(clus.medians, core))
            medians = clus.medians
        else:
            core = _dist_regress(xblock, clus.medians, ctx, cfg)
            med_col = ctx.col_comm.broadcast(
                clus.medians if ctx.is_diagonal else None, root=ctx.j
            )
            err = _dist_rel_error(xblock, clus.medians, med_col, core, ctx)
            medians = _gather_blockrows(ctx, clus.medians, x.n)
        entries.append(SelectionEntry(
            k=k, s_min=stats.s_min, s_avg=stats.s_avg, rel_error=err,
            medians=medians, core=core, converged=clus.converged and solved,
        ))
        timing["per_k_seconds"][str(k)] = time.perf_counter() - t_k

    k_opt = select_k(entries, tau_s)
    low_confidence = all(e.s_min < tau_s for e in entries)
    timing["total_seconds"] = time.perf_counter() - t_start
    params = {
        "k_min": k_min, "k_max": k_max, "r": r, "delta": pcfg.delta,
        "seed": cfg.seed, "max_iters": cfg.max_iters, "init": cfg.init,
        "tolerance": cfg.tolerance, "grid_p": None if ctx is None else ctx.p,
    }
    return SelectionReport(
        entries=entries, k_opt=k_opt, low_confidence=low_confidence,
        tau_s=tau_s, params=params, timing=timing,
    )


# ---------------------------------------------------------------------------
# ground-truth comparison


def pearson_correlation(a_est: np.ndarray, a_true: np.ndarray) -> np.ndarray:
    """Columnwise Pearson coefficients: entry (i, j) pairs est column i with
    true column j. Zero-variance columns produce 0 and a warning."""
    a_est = np.asarray(a_est, dtype=np.float64)
    a_true = np.asarray(a_true, dtype=np.float64)
    if a_est.shape != a_true.shape:
        raise DataError(f"shape mismatch: {a_est.shape} vs {a_true.shape}")
    e = a_est - a_est.mean(axis=0)
    t = a_true - a_true.mean(axis=0)
    se = np.sqrt(np.sum(e**2, axis=0))
    st = np.sqrt(np.sum(t**2, axis=0))
    if np.any(se == 0) or np.any(st == 0):
        warnings.warn("zero-variance column: correlation reported as 0", RuntimeWarning)
    denom = np.outer(se, st)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, (e.T @ t) / denom, 0.0)
    return corr


def best_match_diagonal(corr: np.ndarray) -> np.ndarray:
    """Matched correlation per column under the optimal column pairing."""
    perm = lsa(corr, mode="maximize")
    return corr[np.arange(corr.shape[0]), perm]
