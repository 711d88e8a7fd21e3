"""Synthetic relational tensors with planted latent structure.

Entity features are smooth Gaussian bumps over the index grid (center
spacing controls how correlated neighboring features are) or, optionally,
rectified iid Gaussian vectors. Core slices are drawn from an exponential
distribution with scale 1, and multiplicative uniform noise bounded by a
fraction of each element is added on top of the exact product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .tensor import RelTensor, SparseRelTensor, _as_dtype

_SEED_TAG_CENTERS = 10
_SEED_TAG_FEATURES = 11
_SEED_TAG_CORE = 12
_SEED_TAG_NOISE = 13

# Tensor shapes used for the reference correctness studies, (n, m).
PRESET_SHAPES = {
    "64x64x128": (64, 128),
    "128x128x32": (128, 32),
    "512x512x10": (512, 10),
    "1024x1024x20": (1024, 20),
    "2056x2056x25": (2056, 25),
    "128x128x128": (128, 128),
}


@dataclass
class SynthSpec:
    """Recipe for one planted tensor.

    ``sigma`` is the bump width and ``min_spacing`` the smallest allowed
    center distance, both in units of the [0, 1) index interval; the
    defaults scale with 1/k_true and give well-separated features.
    ``noise`` is the elementwise relative noise bound.
    """

    n: int
    m: int
    k_true: int
    sigma: float | None = None
    min_spacing: float | None = None
    noise: float = 0.01
    seed: int = 0
    feature_mode: str = "bumps"  # "bumps" | "iid"
    pedestal: float = 0.0
    precision: int = 64

    def __post_init__(self):
        if not 1 <= self.k_true <= self.n:
            raise DataError(f"need 1 <= k_true <= n, got {self.k_true}, n={self.n}")
        if self.sigma is not None and not 0 < self.sigma < 1:
            raise DataError(f"sigma must be in (0, 1), got {self.sigma}")
        if self.noise < 0:
            raise DataError(f"noise must be >= 0, got {self.noise}")
        if self.pedestal < 0:
            raise DataError(f"pedestal must be >= 0, got {self.pedestal}")
        if self.feature_mode not in ("bumps", "iid"):
            raise DataError(f"unknown feature mode {self.feature_mode!r}")


def _rng(spec: SynthSpec, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((spec.seed, tag)))


def _bump_centers(spec: SynthSpec) -> np.ndarray:
    """Evenly stratified centers with seeded jitter, at least min_spacing apart."""
    k = spec.k_true
    spacing = 1.0 / k
    min_spacing = spec.min_spacing if spec.min_spacing is not None else 0.6 * spacing
    if min_spacing >= spacing:
        raise DataError(
            f"min_spacing {min_spacing} leaves no room for {k} centers"
        )
    jitter = (spacing - min_spacing) / 2.0
    rng = _rng(spec, _SEED_TAG_CENTERS)
    offsets = rng.uniform(-jitter, jitter, size=k)
    return (np.arange(k) + 0.5) * spacing + offsets


def _features(spec: SynthSpec) -> np.ndarray:
    if spec.feature_mode == "iid":
        rng = _rng(spec, _SEED_TAG_FEATURES)
        a = np.abs(rng.normal(size=(spec.n, spec.k_true)))
    else:
        centers = _bump_centers(spec)
        sigma = spec.sigma if spec.sigma is not None else 0.2 / spec.k_true
        grid = (np.arange(spec.n) + 0.5) / spec.n
        a = np.exp(-((grid[:, None] - centers[None, :]) ** 2) / (2.0 * sigma**2))
    if spec.pedestal > 0:
        # Keeps every feature entry bounded away from zero, which moves the
        # planted optimum into the interior where multiplicative updates
        # converge geometrically instead of with the O(1/t) boundary tail.
        a = a + spec.pedestal * a.max()
    return a


def generate(spec: SynthSpec):
    """Build X = A R A^T plus bounded noise; returns (tensor, A_true, R_true).

    Noise is elementwise uniform in [-noise*X0, +noise*X0], so the result
    stays non-negative and |X - X0|_F <= noise * |X0|_F.
    """
    dtype = _as_dtype(spec.precision)
    a = _features(spec)
    r = _rng(spec, _SEED_TAG_CORE).exponential(scale=1.0, size=(spec.m, spec.k_true, spec.k_true))
    x0 = np.einsum("nk,mkl,jl->mnj", a, r, a)
    if spec.noise > 0:
        noise_rng = _rng(spec, _SEED_TAG_NOISE)
        mult = 1.0 + spec.noise * (2.0 * noise_rng.random(x0.shape) - 1.0)
        x = x0 * mult
    else:
        x = x0
    return RelTensor(x.astype(dtype)), a.astype(dtype), r.astype(dtype)


def sparsify(t: RelTensor, density: float) -> SparseRelTensor:
    """Keep the largest entries of each slice until the target density is met.

    The global nonzero budget round(density * n * n * m) is split as evenly
    as possible across slices, so the realized count matches the target to
    within rounding (zero-valued entries are never stored and may leave the
    result below budget on very sparse inputs). Ties break toward the
    earlier row-major position.
    """
    if not 0 < density <= 1:
        raise DataError(f"density must be in (0, 1], got {density}")
    n, m = t.n, t.m
    budget = int(round(density * n * n * m))
    base, extra = divmod(budget, m)
    slices = []
    for ti in range(m):
        cnt = base + (1 if ti < extra else 0)
        flat = t.slices[ti].ravel()
        order = np.argsort(-flat, kind="stable")[:cnt]
        keep = order[flat[order] > 0]
        rows, cols = np.unravel_index(keep, (n, n))
        slices.append(
            sp.csr_matrix((flat[keep], (rows, cols)), shape=(n, n), dtype=t.dtype)
        )
    return SparseRelTensor(slices, n=n)
