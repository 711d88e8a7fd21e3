import numpy as np
import pytest

from rescalkit import RelTensor, RescalFactors, SynthSpec, generate


def naive_objective(x, f: RescalFactors) -> float:
    """Independent quadratic objective: explicit slice-by-slice residuals."""
    total = 0.0
    for t in range(x.m):
        rec = f.A @ f.R[t] @ f.A.T
        total += float(np.sum((np.asarray(x.slices[t].todense() if hasattr(x.slices[t], "todense") else x.slices[t]) - rec) ** 2))
    return total


def random_tensor(n, m, seed, dtype=np.float64) -> RelTensor:
    rng = np.random.default_rng(seed)
    return RelTensor(rng.random((m, n, n)).astype(dtype))


def planted_tensor(n, m, k, seed, noise=0.0, pedestal=0.0):
    """Exactly factorizable (or lightly noised) tensor with its ground truth."""
    return generate(SynthSpec(n=n, m=m, k_true=k, noise=noise, seed=seed, pedestal=pedestal))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
