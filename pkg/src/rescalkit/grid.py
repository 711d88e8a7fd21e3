"""In-process 2D process grid: rank identities, sub-communicators, collectives.

The backend runs p worker threads that rendezvous on shared slots, one slot
per sub-communicator. Reductions sum contributions in ascending comm-rank
order, so a distributed result is reproducible bit-for-bit across runs and
matches a sequential left-to-right sum over the same blocks. Collectives
are synchronous: a rank that calls a collective blocks until every member
of the communicator has called the matching one, and a configurable timeout
turns mismatched call sequences into a diagnosable error instead of a hang.
"""

from __future__ import annotations

import math
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import GridDeadlockError, GridError

COLLECTIVE_KINDS = ("all_reduce", "broadcast")
AXES = ("row", "col")


class CollectiveStats:
    """Per-rank counters: invocation count and payload words per (kind, axis).

    Payload words are the element count of the buffer seen by one rank for
    one call; single-rank communicators move nothing and record nothing.
    """

    def __init__(self):
        self.counts = {(k, a): 0 for k in COLLECTIVE_KINDS for a in AXES}
        self.words = {(k, a): 0 for k in COLLECTIVE_KINDS for a in AXES}

    def record(self, kind: str, axis: str, words: int) -> None:
        if axis not in AXES:
            return  # world-axis plumbing (gather/assembly) is not modeled
        self.counts[(kind, axis)] += 1
        self.words[(kind, axis)] += int(words)

    def total_words(self, kind=None) -> int:
        return sum(w for (k, _), w in self.words.items() if kind is None or k == kind)

    def total_count(self, kind=None) -> int:
        return sum(c for (k, _), c in self.counts.items() if kind is None or k == kind)

    def snapshot(self):
        return (dict(self.counts), dict(self.words))

    def __eq__(self, other):
        return (
            isinstance(other, CollectiveStats)
            and self.counts == other.counts
            and self.words == other.words
        )

    def __repr__(self):
        parts = [
            f"{k}/{a}: n={self.counts[(k, a)]} words={self.words[(k, a)]}"
            for k in COLLECTIVE_KINDS
            for a in AXES
            if self.counts[(k, a)]
        ]
        return "CollectiveStats(" + ", ".join(parts or ["empty"]) + ")"


class KernelCounters:
    """Multiply-add and wall-time accounting per kernel phase."""

    def __init__(self):
        self.flops = {}
        self.seconds = {}

    def add_flops(self, phase: str, n: int) -> None:
        self.flops[phase] = self.flops.get(phase, 0) + int(n)

    def add_time(self, phase: str, dt: float) -> None:
        self.seconds[phase] = self.seconds.get(phase, 0.0) + dt

    @contextmanager
    def timed(self, phase: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.add_time(phase, time.perf_counter() - t0)

    def total_flops(self) -> int:
        return sum(self.flops.values())


def counted_mm(a, b, counters: KernelCounters | None = None, phase: str = "matrix_mul"):
    """Matrix product with multiply-add counting.

    Dense (x,r)@(r,y) counts x*r*y; a sparse left operand counts nnz*y.
    """
    if counters is None:
        return a @ b
    cols = b.shape[1] if b.ndim == 2 else 1
    if sp.issparse(a):
        counters.add_flops("matrix_mul_sparse", a.nnz * cols)
        with counters.timed("matrix_mul_sparse"):
            return a @ b
    counters.add_flops(phase, a.shape[0] * a.shape[1] * cols)
    with counters.timed(phase):
        return a @ b


# ---------------------------------------------------------------------------
# message router


class _CommSlot:
    def __init__(self, size: int):
        self.size = size
        self.cond = threading.Condition()
        self.buffers = {}
        self.sigs = {}
        self.arrived = 0
        self.generation = 0
        self.result = None
        self.error = None


class _Router:
    """Shared state for one grid run: rendezvous slots and abort machinery."""

    def __init__(self, grid_dim: int, timeout: float):
        self.grid_dim = grid_dim
        self.timeout = timeout
        self.slots = {}
        for i in range(grid_dim):
            self.slots[("row", i)] = _CommSlot(grid_dim)
            self.slots[("col", i)] = _CommSlot(grid_dim)
        self.slots[("world",)] = _CommSlot(grid_dim * grid_dim)
        self._pending_lock = threading.Lock()
        self.pending = {}
        self.aborted = False

    def set_pending(self, rank: int, desc: str | None) -> None:
        with self._pending_lock:
            if desc is None:
                self.pending.pop(rank, None)
            else:
                self.pending[rank] = desc

    def pending_report(self) -> str:
        with self._pending_lock:
            items = sorted(self.pending.items())
        return "; ".join(f"rank {r}: {d}" for r, d in items) or "no pending operations"

    def abort(self) -> None:
        self.aborted = True
        for slot in self.slots.values():
            with slot.cond:
                slot.cond.notify_all()


class SubComm:
    """One rank's handle to a sub-communicator (row, column, or world)."""

    def __init__(self, axis, key, size, index, router, stats, ranks):
        self.axis = axis
        self.key = key
        self.size = size
        self.index = index
        self.router = router
        self.stats = stats
        self.ranks = ranks  # global rank ids, ascending comm order
        self.counters: KernelCounters | None = None

    def _phase(self, kind: str) -> str:
        op = "reduce" if kind == "all_reduce" else "broadcast"
        axis = {"row": "row", "col": "column"}.get(self.axis, self.axis)
        return f"{axis}_{op}"

    def _rendezvous(self, kind, payload, sig, compute):
        slot = self.router.slots[self.key]
        router = self.router
        rank = self.ranks[self.index]
        with slot.cond:
            if router.aborted:
                raise GridError("grid aborted by another rank")
            gen = slot.generation
            slot.buffers[self.index] = payload
            slot.sigs[self.index] = sig
            slot.arrived += 1
            router.set_pending(rank, f"{kind} on {self.key} {sig}")
            if slot.arrived == slot.size:
                try:
                    if len(set(slot.sigs.values())) != 1:
                        raise GridError(
                            f"mismatched collective on {self.key}: {sorted(slot.sigs.values())}"
                        )
                    slot.result = compute(slot.buffers)
                    slot.error = None
                except Exception as e:  # propagate to every member
                    slot.error = e
                slot.buffers = {}
                slot.sigs = {}
                slot.arrived = 0
                slot.generation += 1
                slot.cond.notify_all()
            else:
                deadline = time.monotonic() + router.timeout
                while slot.generation == gen and not router.aborted:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        router.set_pending(rank, None)
                        raise GridDeadlockError(
                            f"collective timed out after {router.timeout:.1f}s; "
                            f"pending: {router.pending_report()}"
                        )
                    slot.cond.wait(remaining)
            router.set_pending(rank, None)
            if router.aborted:
                raise GridError("grid aborted by another rank")
            if slot.error is not None:
                raise slot.error
            return slot.result

    def all_reduce_sum(self, local: np.ndarray) -> np.ndarray:
        """Elementwise sum over the communicator, in ascending comm-rank order."""
        local = np.ascontiguousarray(local)
        if self.size == 1:
            return local.copy()
        timer = self.counters.timed(self._phase("all_reduce")) if self.counters else None

        def compute(buffers):
            acc = buffers[0].copy()
            for idx in range(1, self.size):
                nxt = buffers[idx]
                if nxt.shape != acc.shape:
                    raise GridError(
                        f"all_reduce shape mismatch: {acc.shape} vs {nxt.shape}"
                    )
                acc = acc + nxt
            return acc

        sig = ("all_reduce", local.shape)
        if timer:
            with timer:
                result = self._rendezvous("all_reduce", local, sig, compute)
        else:
            result = self._rendezvous("all_reduce", local, sig, compute)
        self.stats.record("all_reduce", self.axis, result.size)
        return result.copy()

    def broadcast(self, buf, root: int) -> np.ndarray:
        """Every rank receives root's buffer bit-exactly."""
        if not 0 <= root < self.size:
            raise GridError(f"broadcast root {root} out of range for size {self.size}")
        if self.size == 1:
            return np.ascontiguousarray(buf).copy()
        payload = np.ascontiguousarray(buf) if self.index == root else None
        timer = self.counters.timed(self._phase("broadcast")) if self.counters else None

        def compute(buffers):
            return buffers[root]

        sig = ("broadcast", root)
        if timer:
            with timer:
                result = self._rendezvous("broadcast", payload, sig, compute)
        else:
            result = self._rendezvous("broadcast", payload, sig, compute)
        self.stats.record("broadcast", self.axis, result.size)
        return result.copy()

    def all_gather(self, obj):
        """Collect one object per rank; untracked plumbing for result assembly.

        Returned entries are shared references, treat them as read-only.
        """
        if self.size == 1:
            return [obj]

        def compute(buffers):
            return [buffers[idx] for idx in range(self.size)]

        return list(self._rendezvous("all_gather", obj, ("all_gather",), compute))


def dist_mm(a_local, b_local, comm: SubComm, counters: KernelCounters | None = None,
            phase: str = "matrix_mul"):
    """Distributed matrix product: local block multiply, then all_reduce.

    Every rank in ``comm`` receives the summed product of the per-rank
    block pairs.
    """
    if a_local.shape[-1] != b_local.shape[0]:
        raise GridError(
            f"dist_mm inner dimension mismatch: {a_local.shape} x {b_local.shape}"
        )
    local = counted_mm(a_local, b_local, counters, phase)
    return comm.all_reduce_sum(np.asarray(local))


@dataclass
class GridContext:
    """One rank's identity on the sqrt(p) x sqrt(p) grid."""

    p: int
    grid_dim: int
    i: int
    j: int
    router: _Router = field(repr=False)
    stats: CollectiveStats = field(repr=False)
    counters: KernelCounters | None = field(repr=False, default=None)

    def __post_init__(self):
        g = self.grid_dim
        self.rank = self.i * g + self.j
        row_ranks = tuple(self.i * g + jj for jj in range(g))
        col_ranks = tuple(ii * g + self.j for ii in range(g))
        self.row_comm = SubComm("row", ("row", self.i), g, self.j, self.router, self.stats, row_ranks)
        self.col_comm = SubComm("col", ("col", self.j), g, self.i, self.router, self.stats, col_ranks)
        world_ranks = tuple(range(self.p))
        self.world_comm = SubComm("world", ("world",), self.p, self.rank, self.router, self.stats, world_ranks)
        if self.counters is not None:
            self.row_comm.counters = self.counters
            self.col_comm.counters = self.counters
            self.world_comm.counters = self.counters

    @property
    def is_diagonal(self) -> bool:
        return self.i == self.j


def spawn_grid(p: int, program, *args, timeout: float = 10.0,
               with_counters: bool = False, **kwargs):
    """Run ``program(ctx, *args, **kwargs)`` on p in-process ranks.

    Returns the per-rank results in rank order. A failing rank aborts the
    whole grid and its exception is re-raised with the rank id attached.
    """
    g = math.isqrt(p)
    if g * g != p or p < 1:
        raise GridError(f"p must be a positive perfect square, got {p}")
    router = _Router(g, timeout)

    def make_ctx(i, j):
        return GridContext(
            p=p, grid_dim=g, i=i, j=j, router=router,
            stats=CollectiveStats(),
            counters=KernelCounters() if with_counters else None,
        )

    if p == 1:
        return [program(make_ctx(0, 0), *args, **kwargs)]

    results = [None] * p
    errors = [None] * p

    def runner(rank):
        ctx = make_ctx(rank // g, rank % g)
        try:
            results[rank] = program(ctx, *args, **kwargs)
        except BaseException as e:
            errors[rank] = e
            router.abort()

    threads = [
        threading.Thread(target=runner, args=(rank,), name=f"grid-rank-{rank}")
        for rank in range(p)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    failures = [(r, e) for r, e in enumerate(errors) if e is not None]
    primary = [(r, e) for r, e in failures if not _is_abort(e)]
    if primary:
        rank, exc = primary[0]
        raise GridError(f"rank {rank} failed: {exc!r}") from exc
    if failures:
        rank, exc = failures[0]
        raise GridError(f"rank {rank} failed: {exc!r}") from exc
    return results


def _is_abort(e) -> bool:
    return isinstance(e, GridError) and "aborted" in str(e)
