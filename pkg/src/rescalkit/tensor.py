"""Relational-tensor storage: dense and CSR slices, norms, file I/O, block partitioning.

A relational tensor holds m frontal slices of an n-by-n adjacency matrix,
one slice per relation. All stored values are non-negative. Two on-disk
formats are supported:

* dense binary: magic ``RSK1``, version u32, dtype u8 (0=float32,
  1=float64), n u64, m u64, all little-endian, followed by the m slices
  row-major.
* sparse text: header line ``%rescalk-coo n m nnz`` followed by one
  ``t i j value`` line per nonzero (0-based indices).

Factor matrices use a sibling binary layout with magic ``RSKM`` and a
rows/cols header instead of n/m.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError

_DENSE_MAGIC = b"RSK1"
_MATRIX_MAGIC = b"RSKM"
_SPARSE_HEADER = "%rescalk-coo"
_FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.float32, 1: np.float64}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _as_dtype(precision):
    """Map a precision spec (32/64 or a dtype) to float32/float64."""
    if precision in (32, "32", np.float32, np.dtype(np.float32)):
        return np.float32
    if precision in (64, "64", None, np.float64, np.dtype(np.float64)):
        return np.float64
    raise DataError(f"unsupported precision {precision!r}; use 32 or 64")


class RelTensor:
    """Dense relational tensor: m frontal n-by-n slices, all entries >= 0."""

    def __init__(self, slices):
        arr = np.asarray(slices)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise DataError(f"expected shape (m, n, n), got {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.size and arr.min() < 0:
            raise DataError("negative value in tensor")
        self.slices = arr
        self.m, self.n = arr.shape[0], arr.shape[1]

    @property
    def dtype(self):
        return self.slices.dtype

    @property
    def density(self) -> float:
        return 1.0

    def slice_ops(self):
        """Per-relation 2D operands for the update kernels."""
        return [self.slices[t] for t in range(self.m)]

    def astype(self, dtype) -> "RelTensor":
        return RelTensor(self.slices.astype(dtype))

    def __eq__(self, other):
        return (
            isinstance(other, RelTensor)
            and self.slices.dtype == other.slices.dtype
            and self.slices.shape == other.slices.shape
            and np.array_equal(self.slices, other.slices)
        )

    def __repr__(self):
        return f"RelTensor(n={self.n}, m={self.m}, dtype={self.dtype})"


class SparseRelTensor:
    """Relational tensor with CSR frontal slices.

    Stored values are strictly positive (explicit zeros are dropped) and
    column indices are sorted within each row.
    """

    def __init__(self, slices, n=None):
        if not slices:
            raise DataError("sparse tensor needs at least one slice")
        canon = []
        for s in slices:
            c = sp.csr_matrix(s)
            c.sum_duplicates()
            c.sort_indices()
            c.eliminate_zeros()
            if c.nnz and c.data.min() < 0:
                raise DataError("negative value in tensor")
            canon.append(c)
        shape = canon[0].shape
        if shape[0] != shape[1] or any(c.shape != shape for c in canon):
            raise DataError("all slices must be square with identical shape")
        if n is not None and n != shape[0]:
            raise DataError(f"dimension mismatch: header n={n}, slices are {shape[0]}")
        self.slices = canon
        self.n = shape[0]
        self.m = len(canon)

    @property
    def dtype(self):
        return self.slices[0].dtype

    @property
    def nnz(self) -> int:
        return sum(s.nnz for s in self.slices)

    @property
    def density(self) -> float:
        return self.nnz / (self.n * self.n * self.m)

    def slice_ops(self):
        return list(self.slices)

    def to_dense(self) -> RelTensor:
        return RelTensor(np.stack([np.asarray(s.todense()) for s in self.slices]))

    def astype(self, dtype) -> "SparseRelTensor":
        return SparseRelTensor([s.astype(dtype) for s in self.slices])

    def __repr__(self):
        return (
            f"SparseRelTensor(n={self.n}, m={self.m}, nnz={self.nnz}, "
            f"density={self.density:.3g}, dtype={self.dtype})"
        )


@dataclass
class TensorBlock:
    """One rank's sub-tensor on a grid_dim x grid_dim partition.

    Blocks are zero-padded to a common ``block_dim`` so every rank holds
    identical shapes; ``n_global`` records the unpadded entity count.
    """

    i: int
    j: int
    block_dim: int
    n_global: int
    m: int
    slices: object = field(repr=False)  # (m, b, b) ndarray or list of csr
    row_start: int = 0
    col_start: int = 0

    @property
    def is_sparse(self) -> bool:
        return not isinstance(self.slices, np.ndarray)

    @property
    def dtype(self):
        return self.slices.dtype if not self.is_sparse else self.slices[0].dtype

    def slice_ops(self):
        if self.is_sparse:
            return list(self.slices)
        return [self.slices[t] for t in range(self.m)]


def fro_norm(t) -> float:
    """Frobenius norm: sqrt of the sum of squares over all elements."""
    if isinstance(t, RelTensor):
        x = t.slices
        return float(np.sqrt(np.sum(x.astype(np.float64) ** 2)))
    if isinstance(t, SparseRelTensor):
        total = sum(float(np.sum(s.data.astype(np.float64) ** 2)) for s in t.slices)
        return float(np.sqrt(total))
    raise DataError(f"not a relational tensor: {type(t)!r}")


# ---------------------------------------------------------------------------
# file I/O


def save_tensor(t, path, format=None) -> None:
    """Write a tensor. Format defaults to the tensor's own representation."""
    if format is None:
        format = "sparse-coo" if isinstance(t, SparseRelTensor) else "dense-binary"
    if format == "dense-binary":
        if isinstance(t, SparseRelTensor):
            t = t.to_dense()
        _save_dense(t, path)
    elif format == "sparse-coo":
        if isinstance(t, RelTensor):
            raise DataError("convert to SparseRelTensor before sparse-coo save")
        _save_sparse(t, path)
    else:
        raise DataError(f"unknown format {format!r}")


def load_tensor(path, format=None):
    """Read a tensor. Format is inferred from the file when not given."""
    if format is None:
        with open(path, "rb") as f:
            head = f.read(4)
        format = "dense-binary" if head == _DENSE_MAGIC else "sparse-coo"
    if format == "dense-binary":
        return _load_dense(path)
    if format == "sparse-coo":
        return _load_sparse(path)
    raise DataError(f"unknown format {format!r}")


def _save_dense(t: RelTensor, path) -> None:
    code = _DTYPE_TO_CODE[t.slices.dtype]
    with open(path, "wb") as f:
        f.write(_DENSE_MAGIC)
        f.write(struct.pack("<IBQQ", _FORMAT_VERSION, code, t.n, t.m))
        f.write(np.ascontiguousarray(t.slices).tobytes())


def _load_dense(path) -> RelTensor:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _DENSE_MAGIC:
            raise DataError(f"malformed header: bad magic {magic!r}")
        header = f.read(struct.calcsize("<IBQQ"))
        if len(header) != struct.calcsize("<IBQQ"):
            raise DataError("malformed header: truncated")
        version, code, n, m = struct.unpack("<IBQQ", header)
        if version != _FORMAT_VERSION:
            raise DataError(f"unsupported format version {version}")
        if code not in _DTYPE_CODES:
            raise DataError(f"malformed header: unknown dtype code {code}")
        dtype = np.dtype(_DTYPE_CODES[code])
        payload = f.read()
    expected = m * n * n * dtype.itemsize
    if len(payload) != expected:
        raise DataError(
            f"dimension mismatch: expected {expected} payload bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(m, n, n).copy()
    return RelTensor(arr)


def _save_sparse(t: SparseRelTensor, path) -> None:
    lines = [f"{_SPARSE_HEADER} {t.n} {t.m} {t.nnz}\n"]
    for ti, s in enumerate(t.slices):
        coo = s.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            lines.append(f"{ti} {r} {c} {float(v)!r}\n")
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(lines)


def _load_sparse(path) -> SparseRelTensor:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != _SPARSE_HEADER:
            raise DataError("malformed header: expected '%rescalk-coo n m nnz'")
        try:
            n, m, nnz = int(header[1]), int(header[2]), int(header[3])
        except ValueError as e:
            raise DataError(f"malformed header: {e}") from e
        rows = [[] for _ in range(m)]
        cols = [[] for _ in range(m)]
        vals = [[] for _ in range(m)]
        count = 0
        for lineno, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"line {lineno}: expected 't i j value'")
            try:
                t, i, j = int(parts[0]), int(parts[1]), int(parts[2])
                v = float(parts[3])
            except ValueError as e:
                raise DataError(f"line {lineno}: {e}") from e
            if not 0 <= t < m:
                raise DataError(f"line {lineno}: relation index {t} out of bounds")
            if not (0 <= i < n and 0 <= j < n):
                raise DataError(f"line {lineno}: index ({i},{j}) out of bounds")
            if v < 0:
                raise DataError(f"line {lineno}: negative value {v}")
            rows[t].append(i)
            cols[t].append(j)
            vals[t].append(v)
            count += 1
    if count != nnz:
        raise DataError(f"dimension mismatch: header says nnz={nnz}, found {count}")
    slices = [
        sp.csr_matrix((vals[t], (rows[t], cols[t])), shape=(n, n), dtype=np.float64)
        for t in range(m)
    ]
    return SparseRelTensor(slices, n=n)


def save_matrix(a, path) -> None:
    """Write a 2D factor matrix in the RSKM binary layout."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise DataError(f"expected a 2D matrix, got shape {a.shape}")
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    with open(path, "wb") as f:
        f.write(_MATRIX_MAGIC)
        f.write(struct.pack("<IBQQ", _FORMAT_VERSION, _DTYPE_TO_CODE[a.dtype], *a.shape))
        f.write(np.ascontiguousarray(a).tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MATRIX_MAGIC:
            raise DataError("malformed header: bad magic")
        version, code, rows, cols = struct.unpack("<IBQQ", f.read(struct.calcsize("<IBQQ")))
        if version != _FORMAT_VERSION or code not in _DTYPE_CODES:
            raise DataError("malformed header")
        dtype = np.dtype(_DTYPE_CODES[code])
        payload = f.read()
    if len(payload) != rows * cols * dtype.itemsize:
        raise DataError("dimension mismatch in matrix payload")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# block partitioning


def block_dim(n: int, grid_dim: int) -> int:
    """Common padded block edge: ceil(n / grid_dim)."""
    return -(-n // grid_dim)


def partition_block(t, grid_dim: int, i: int, j: int) -> TensorBlock:
    """Extract the zero-padded (i, j) block of a grid_dim x grid_dim partition."""
    if grid_dim < 1:
        raise DataError(f"grid_dim must be >= 1, got {grid_dim}")
    if not (0 <= i < grid_dim and 0 <= j < grid_dim):
        raise DataError(f"block ({i},{j}) outside {grid_dim}x{grid_dim} grid")
    b = block_dim(t.n, grid_dim)
    r0, c0 = i * b, j * b
    r1, c1 = min(r0 + b, t.n), min(c0 + b, t.n)
    if isinstance(t, RelTensor):
        sub = np.zeros((t.m, b, b), dtype=t.dtype)
        if r1 > r0 and c1 > c0:
            sub[:, : r1 - r0, : c1 - c0] = t.slices[:, r0:r1, c0:c1]
        slices = sub
    else:
        slices = []
        for s in t.slices:
            blk = sp.csr_matrix(s[r0:r1, c0:c1]) if r1 > r0 and c1 > c0 else sp.csr_matrix((0, 0), dtype=t.dtype)
            blk.resize((b, b))
            blk.sort_indices()
            slices.append(blk)
    return TensorBlock(
        i=i, j=j, block_dim=b, n_global=t.n, m=t.m, slices=slices, row_start=r0, col_start=c0
    )


def partition(t, grid_dim: int):
    """All grid_dim**2 blocks, row-major by grid coordinates."""
    return [
        partition_block(t, grid_dim, i, j)
        for i in range(grid_dim)
        for j in range(grid_dim)
    ]


def reassemble(blocks):
    """Inverse of partition: stitch blocks and trim the zero padding."""
    grid_dim = max(b.i for b in blocks) + 1
    ordered = sorted(blocks, key=lambda b: (b.i, b.j))
    n, m = ordered[0].n_global, ordered[0].m
    if ordered[0].is_sparse:
        slices = []
        for t in range(m):
            grid = [
                [ordered[i * grid_dim + j].slices[t] for j in range(grid_dim)]
                for i in range(grid_dim)
            ]
            full = sp.bmat(grid, format="csr")
            slices.append(sp.csr_matrix(full[:n, :n]))
        return SparseRelTensor(slices, n=n)
    bdim = ordered[0].block_dim
    full = np.zeros((m, bdim * grid_dim, bdim * grid_dim), dtype=ordered[0].dtype)
    for blk in ordered:
        full[:, blk.i * bdim : (blk.i + 1) * bdim, blk.j * bdim : (blk.j + 1) * bdim] = blk.slices
    return RelTensor(full[:, :n, :n])
