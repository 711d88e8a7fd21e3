import numpy as np
import pytest

from conftest import naive_objective, planted_tensor, random_tensor

from rescalkit import (
    DataError,
    RelTensor,
    RescalFactors,
    SolverConfig,
    finalize_normalize,
    nndsvd_init,
    random_init,
    regress_r,
    rel_error,
    rescal_solve,
    update_a,
    update_r,
)


def exact_factors(n, k, m, seed):
    """Strictly positive ground-truth factors and their exact tensor."""
    rng = np.random.default_rng(seed)
    a = rng.random((n, k)) + 0.05
    r = rng.random((m, k, k)) + 0.05
    x = RelTensor(np.einsum("nk,mkl,jl->mnj", a, r, a))
    return x, RescalFactors(a, r)


class TestUpdateR:
    def test_fixed_point(self):
        x, f = exact_factors(8, 3, 2, seed=0)
        f2 = update_r(x, f)
        rel = np.abs(f2.R - f.R) / np.maximum(f.R, 1e-300)
        assert rel.max() <= 1e-10

    def test_zero_entry_stays_zero(self):
        x, f = exact_factors(6, 2, 2, seed=1)
        r = f.R.copy()
        r[0, 0, 1] = 0.0
        f2 = update_r(x, RescalFactors(f.A, r))
        assert f2.R[0, 0, 1] == 0.0

    def test_objective_non_increase(self):
        x = random_tensor(6, 2, seed=2)
        f = random_init(6, 3, 2, seed=3)
        before = naive_objective(x, f)
        after = naive_objective(x, update_r(x, f))
        assert after <= before + 1e-10 * max(before, 1.0)

    def test_shape_mismatch(self):
        x = random_tensor(6, 2, seed=2)
        f = random_init(5, 3, 2, seed=3)
        with pytest.raises(DataError, match="shape mismatch"):
            update_r(x, f)


class TestUpdateA:
    def test_fixed_point(self):
        x, f = exact_factors(8, 3, 2, seed=4)
        f2 = update_a(x, f)
        rel = np.abs(f2.A - f.A) / np.maximum(f.A, 1e-300)
        assert rel.max() <= 1e-10

    def test_zero_entry_stays_zero(self):
        x, f = exact_factors(6, 2, 2, seed=5)
        a = f.A.copy()
        a[2, 1] = 0.0
        f2 = update_a(x, RescalFactors(a, f.R))
        assert f2.A[2, 1] == 0.0

    def test_objective_non_increase(self):
        x = random_tensor(7, 3, seed=6)
        f = random_init(7, 2, 3, seed=7)
        before = naive_objective(x, f)
        after = naive_objective(x, update_a(x, f))
        assert after <= before + 1e-10 * max(before, 1.0)


class TestSolve:
    def test_all_ones_rank_one(self):
        x = RelTensor(np.ones((1, 2, 2)))
        f, trace = rescal_solve(x, 1, SolverConfig(max_iters=2000, tolerance=1e-8, seed=3))
        assert trace[-1] <= 1e-6
        assert f.A[0, 0] == pytest.approx(f.A[1, 0], rel=1e-5)
        norm = finalize_normalize(f)
        np.testing.assert_allclose(norm.A[:, 0], [1 / np.sqrt(2)] * 2, rtol=1e-5)
        assert norm.R[0, 0, 0] == pytest.approx(2.0, rel=1e-5)

    def test_exact_recovery_small(self):
        x, a_true, r_true = planted_tensor(16, 4, 3, seed=1, pedestal=0.15)
        f, trace = rescal_solve(x, 3, SolverConfig(max_iters=2000, tolerance=1e-4, seed=11))
        assert trace[-1] <= 1e-4

    def test_k_zero_rejected(self):
        x = random_tensor(4, 1, seed=8)
        with pytest.raises(DataError):
            rescal_solve(x, 0)

    def test_k_above_n_rejected(self):
        x = random_tensor(4, 1, seed=8)
        with pytest.raises(DataError):
            rescal_solve(x, 5)

    def test_trace_non_increasing(self):
        x = random_tensor(10, 2, seed=9)
        _, trace = rescal_solve(x, 3, SolverConfig(max_iters=100, seed=10))
        assert len(trace) == 100
        assert np.all(np.diff(trace) <= 1e-8 * np.maximum(trace[:-1], 1e-300))

    def test_tolerance_stops_early(self):
        x, _, _ = planted_tensor(16, 2, 2, seed=3, pedestal=0.15)
        _, trace = rescal_solve(x, 2, SolverConfig(max_iters=2000, tolerance=1e-3, seed=1))
        assert len(trace) < 2000 and trace[-1] < 1e-3

    def test_track_error_off(self):
        x = random_tensor(6, 2, seed=11)
        _, trace = rescal_solve(x, 2, SolverConfig(max_iters=5, track_error=False, seed=0))
        assert len(trace) == 0

    def test_float32_path(self):
        x = RelTensor(random_tensor(8, 2, seed=12).slices.astype(np.float32))
        f, trace = rescal_solve(x, 2, SolverConfig(max_iters=20, seed=1))
        assert f.A.dtype == np.float32 and f.R.dtype == np.float32
        assert np.all(np.diff(trace) <= 1e-5 * np.maximum(trace[:-1], 1e-30))


class TestRelError:
    def test_exact_factorization(self):
        x, f = exact_factors(8, 3, 2, seed=13)
        assert rel_error(x, f) <= 1e-12

    def test_zero_factors_give_one(self):
        x = random_tensor(5, 2, seed=14)
        f = RescalFactors(np.zeros((5, 2)), np.zeros((2, 2, 2)))
        assert rel_error(x, f) == pytest.approx(1.0, rel=1e-14)

    def test_matches_naive_oracle(self, rng):
        x = random_tensor(6, 3, seed=15)
        f = random_init(6, 2, 3, seed=16)
        oracle = np.sqrt(naive_objective(x, f)) / np.sqrt(float(np.sum(x.slices**2)))
        assert rel_error(x, f) == pytest.approx(oracle, rel=1e-10)

    def test_zero_tensor_rejected(self):
        x = RelTensor(np.zeros((1, 3, 3)))
        f = random_init(3, 1, 1, seed=0)
        with pytest.raises(DataError):
            rel_error(x, f)


class TestFinalizeNormalize:
    def test_known_scales(self):
        a = np.array([[2.0, 0.0], [0.0, 0.5]])
        r = np.array([[[1.0, 1.0], [1.0, 1.0]]])
        f = finalize_normalize(RescalFactors(a, r))
        np.testing.assert_allclose(np.linalg.norm(f.A, axis=0), [1.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(f.R[0], [[4.0, 1.0], [1.0, 0.25]], rtol=1e-12)

    def test_already_normalized_unchanged(self):
        a = np.eye(3)[:, :2]
        r = np.ones((1, 2, 2))
        f = finalize_normalize(RescalFactors(a, r))
        np.testing.assert_array_equal(f.A, a)
        np.testing.assert_array_equal(f.R, r)

    def test_zero_column_untouched(self):
        a = np.array([[3.0, 0.0], [4.0, 0.0]])
        f = finalize_normalize(RescalFactors(a, np.ones((1, 2, 2))))
        np.testing.assert_allclose(f.A[:, 0], [0.6, 0.8], rtol=1e-12)
        np.testing.assert_array_equal(f.A[:, 1], [0.0, 0.0])

    def test_reconstruction_invariant(self, rng):
        f = random_init(7, 3, 2, seed=17)
        g = finalize_normalize(f)
        for t in range(2):
            before = f.A @ f.R[t] @ f.A.T
            after = g.A @ g.R[t] @ g.A.T
            np.testing.assert_allclose(after, before, rtol=1e-10, atol=1e-12)


class TestNndsvdInit:
    def test_rank_one_matches_power_iteration(self):
        rng = np.random.default_rng(18)
        a_vec = rng.random(10)
        b_vec = rng.random(10)
        x = RelTensor(np.stack([np.outer(a_vec, b_vec)]))
        f = nndsvd_init(x, 1)
        # oracle: power iteration on M M^T for the stacked unfolding matrix
        m_mat = np.concatenate([x.slices[0], x.slices[0].T], axis=1)
        gram = m_mat @ m_mat.T
        v = np.ones(10)
        for _ in range(500):
            v = gram @ v
            v /= np.linalg.norm(v)
        cos = abs(v @ f.A[:, 0]) / np.linalg.norm(f.A[:, 0])
        assert cos >= 1 - 1e-8

    def test_identity_slices_invariants(self):
        x = RelTensor(np.stack([np.eye(6)]))
        f = nndsvd_init(x, 1)
        assert np.all(f.A >= 0) and np.all(f.R >= 0)
        assert np.linalg.norm(f.A[:, 0]) > 0

    def test_deficient_column_filled(self):
        rng = np.random.default_rng(19)
        v = rng.random(8)
        x = RelTensor(np.stack([np.outer(v, v)]))  # rank-1, k=2 requested
        f = nndsvd_init(x, 2)
        assert np.all(f.A >= 0)
        assert np.all(f.A[:, 1] > 0)  # filled, not left at zero

    def test_deterministic(self):
        x = random_tensor(8, 2, seed=20)
        f1 = nndsvd_init(x, 3)
        f2 = nndsvd_init(x, 3)
        assert np.array_equal(f1.A, f2.A) and np.array_equal(f1.R, f2.R)


class TestRegressR:
    def test_recovers_core_given_true_a(self):
        # well-separated planted features keep the Gram well conditioned,
        # so the default stopping rule reaches the true core
        x, a_true, r_true = planted_tensor(16, 3, 3, seed=21)
        r_fit = regress_r(x, a_true)
        assert np.linalg.norm(r_fit - r_true) / np.linalg.norm(r_true) <= 1e-4

    def test_zero_tensor_locks_to_zero(self):
        x = RelTensor(np.zeros((2, 4, 4)))
        a = np.abs(np.random.default_rng(22).random((4, 2)))
        r_fit = regress_r(x, a)
        np.testing.assert_array_equal(r_fit, np.zeros_like(r_fit))

    def test_improves_over_initialization(self):
        x = random_tensor(8, 2, seed=23)
        a = random_init(8, 3, 2, seed=24).A
        r_init = np.ones((2, 3, 3))
        before = rel_error(x, RescalFactors(a, r_init))
        after = rel_error(x, RescalFactors(a, regress_r(x, a)))
        assert after <= before


class TestProperties:
    def test_non_negativity_closure(self):
        for seed in range(10):
            x = random_tensor(6, 2, seed=100 + seed)
            f = random_init(6, 3, 2, seed=200 + seed)
            for _ in range(5):
                f = update_r(x, f)
                f = update_a(x, f)
            assert f.A.min() >= 0 and f.R.min() >= 0

    def test_zero_locking_through_sweeps(self):
        x = random_tensor(6, 2, seed=25)
        f = random_init(6, 3, 2, seed=26)
        a = f.A.copy()
        a[1, 2] = 0.0
        r = f.R.copy()
        r[1, 0, 0] = 0.0
        f = RescalFactors(a, r)
        for _ in range(10):
            f = update_r(x, f)
            f = update_a(x, f)
        assert f.A[1, 2] == 0.0 and f.R[1, 0, 0] == 0.0

    def test_split_equals_fused_iteration(self):
        # update_r followed by update_a reproduces one solver iteration exactly
        x = random_tensor(7, 3, seed=27)
        f0 = random_init(7, 2, 3, seed=28)
        f_split = update_a(x, update_r(x, f0))
        f_solver, _ = rescal_solve(x, 2, SolverConfig(max_iters=1, track_error=False), initial=f0)
        np.testing.assert_array_equal(f_split.A, f_solver.A)
        np.testing.assert_array_equal(f_split.R, f_solver.R)
