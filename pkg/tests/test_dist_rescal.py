import numpy as np
import pytest
import scipy.sparse as sp

from conftest import planted_tensor, random_tensor

from rescalkit import (
    DistFactors,
    PerturbConfig,
    RescalFactors,
    SolverConfig,
    dist_perturb,
    dist_rescal_solve,
    gather_factors,
    partition_block,
    perturb,
    rescal_solve,
    solve_on_grid,
    spawn_grid,
)
from rescalkit.dist_rescal import perturbation_field
from rescalkit.synth import sparsify


def max_rel_dev(a, b):
    scale = np.maximum(np.abs(b), 1e-300)
    return float(np.max(np.abs(a - b) / scale))


class TestSerialEquivalence:
    def test_p1_bit_exact(self):
        x = random_tensor(12, 2, seed=0)
        cfg = SolverConfig(max_iters=30, seed=5)
        fs, ts = rescal_solve(x, 3, cfg)
        fd, td, _ = solve_on_grid(x, 3, cfg, 1)
        np.testing.assert_array_equal(fd.A, fs.A)
        np.testing.assert_array_equal(fd.R, fs.R)
        np.testing.assert_array_equal(td, ts)

    def test_p4_small(self):
        x = random_tensor(8, 2, seed=1)
        cfg = SolverConfig(max_iters=60, seed=2)
        fs, ts = rescal_solve(x, 2, cfg)
        fd, td, _ = solve_on_grid(x, 2, cfg, 4)
        assert max_rel_dev(fd.A, fs.A) <= 1e-8
        assert max_rel_dev(fd.R, fs.R) <= 1e-8
        assert np.max(np.abs(td - ts)) <= 1e-8

    def test_p9_exact_rank_recovery(self):
        x, _, _ = planted_tensor(24, 3, 2, seed=0, pedestal=0.15)
        cfg = SolverConfig(max_iters=2000, tolerance=1e-4, seed=11)
        fd, trace, _ = solve_on_grid(x, 2, cfg, 9, timeout=60.0)
        assert trace[-1] <= 1e-4

    def test_padded_dimensions(self):
        # n=7 on a 2x2 grid forces zero padding; must still match serial
        x = random_tensor(7, 2, seed=3)
        cfg = SolverConfig(max_iters=40, seed=4)
        fs, ts = rescal_solve(x, 2, cfg)
        fd, td, _ = solve_on_grid(x, 2, cfg, 4)
        assert fd.A.shape == fs.A.shape
        assert max_rel_dev(fd.A, fs.A) <= 1e-8
        assert np.max(np.abs(td - ts)) <= 1e-8

    def test_r_replicated_byte_identical(self):
        x = random_tensor(8, 2, seed=5)

        def program(ctx):
            blk = partition_block(x, ctx.grid_dim, ctx.i, ctx.j)
            df, _ = dist_rescal_solve(blk, 2, SolverConfig(max_iters=10, seed=6), ctx)
            return df.r.tobytes(), df.a_col.tobytes() == df.a_row.tobytes(), ctx.is_diagonal

        results = spawn_grid(4, program)
        r_bytes = {r for r, _, _ in results}
        assert len(r_bytes) == 1
        for _, col_eq_row, diag in results:
            if diag:
                assert col_eq_row


class TestPerturb:
    def test_tiny_delta_is_identity(self):
        x = random_tensor(6, 2, seed=7)
        blk = partition_block(x, 1, 0, 0)
        out = dist_perturb(blk, PerturbConfig(delta=1e-15, base_seed=0), 1)
        assert max_rel_dev(out.slices, blk.slices) <= 1e-12

    def test_elementwise_bounds(self):
        delta = 0.02
        x = random_tensor(10, 3, seed=8)
        blk = partition_block(x, 1, 0, 0)
        out = dist_perturb(blk, PerturbConfig(delta=delta, base_seed=1), 4)
        lo = (1 - delta) * blk.slices
        hi = (1 + delta) * blk.slices
        assert np.all(out.slices >= lo - 1e-15) and np.all(out.slices <= hi + 1e-15)

    def test_scalar_mean_matches_uniform_moments(self):
        # mean of 2000 multiplicative perturbations of x=1 stays within
        # 3 sigma of 1, sigma = (delta/sqrt(3))/sqrt(2000)
        delta = 0.02
        x = np.ones((1, 1, 1))
        from rescalkit import RelTensor

        blk = partition_block(RelTensor(x), 1, 0, 0)
        pcfg = PerturbConfig(delta=delta, base_seed=3)
        samples = [float(dist_perturb(blk, pcfg, q).slices[0, 0, 0]) for q in range(2000)]
        bound = 3 * (delta / np.sqrt(3)) / np.sqrt(2000)
        assert abs(np.mean(samples) - 1.0) <= bound

    def test_sparse_zero_pattern_preserved(self):
        dense = random_tensor(12, 2, seed=9)
        xs = sparsify(dense, 0.2)
        blk = partition_block(xs, 2, 0, 1)
        out = dist_perturb(blk, PerturbConfig(delta=0.03, base_seed=2), 5)
        for s_in, s_out in zip(blk.slices, out.slices):
            assert np.array_equal(s_in.indices, s_out.indices)
            assert np.array_equal(s_in.indptr, s_out.indptr)
            assert np.all(s_out.data > 0)

    def test_no_collective_traffic(self):
        x = random_tensor(8, 2, seed=10)

        def program(ctx):
            blk = partition_block(x, ctx.grid_dim, ctx.i, ctx.j)
            before = ctx.stats.snapshot()
            dist_perturb(blk, PerturbConfig(delta=0.02, base_seed=4), 2, ctx)
            return before == ctx.stats.snapshot()

        assert all(spawn_grid(4, program))

    def test_grid_independent_field(self):
        # the same logical tensor results for any partitioning
        x = random_tensor(9, 2, seed=11)
        pcfg = PerturbConfig(delta=0.02, base_seed=5)
        whole = perturb(x, pcfg, 3)
        blk = partition_block(x, 3, 1, 2)
        out = dist_perturb(blk, pcfg, 3)
        rows = slice(blk.row_start, blk.row_start + 3)
        cols = slice(blk.col_start, blk.col_start + 3)
        np.testing.assert_array_equal(out.slices, whole.slices[:, rows, cols])

    def test_field_deterministic(self):
        f1 = perturbation_field(5, 2, PerturbConfig(delta=0.01, base_seed=6), 7)
        f2 = perturbation_field(5, 2, PerturbConfig(delta=0.01, base_seed=6), 7)
        np.testing.assert_array_equal(f1, f2)


class TestGather:
    def test_p1_identity(self):
        x = random_tensor(6, 2, seed=12)
        cfg = SolverConfig(max_iters=5, seed=0)
        factors, _, _ = solve_on_grid(x, 2, cfg, 1)
        fs, _ = rescal_solve(x, 2, cfg)
        np.testing.assert_array_equal(factors.A, fs.A)

    def test_round_trip_of_partitioned_factors(self):
        rng = np.random.default_rng(13)
        n, k, m, g = 10, 3, 2, 2
        a_global = rng.random((n, k))
        r_global = rng.random((m, k, k))
        b = -(-n // g)

        def program(ctx):
            pad = np.zeros((b * g, k))
            pad[:n] = a_global
            df = DistFactors(
                a_row=pad[ctx.i * b : (ctx.i + 1) * b].copy(),
                a_col=pad[ctx.j * b : (ctx.j + 1) * b].copy(),
                r=r_global.copy(),
                i=ctx.i, j=ctx.j, n_global=n,
            )
            return gather_factors(df, ctx)

        for factors in spawn_grid(4, program):
            np.testing.assert_array_equal(factors.A, a_global)
            np.testing.assert_array_equal(factors.R, r_global)

    def test_known_block_contents(self):
        def program(ctx):
            a_row = np.full((2, 1), float(ctx.i))
            df = DistFactors(a_row=a_row, a_col=a_row, r=np.ones((1, 1, 1)),
                             i=ctx.i, j=ctx.j, n_global=4)
            return gather_factors(df, ctx)

        factors = spawn_grid(4, program)[0]
        np.testing.assert_array_equal(factors.A[:, 0], [0.0, 0.0, 1.0, 1.0])


class TestSparseDistributed:
    def test_sparse_matches_dense_path(self):
        dense0 = random_tensor(12, 2, seed=14)
        xs = sparsify(dense0, 0.15)
        xd = xs.to_dense()
        cfg = SolverConfig(max_iters=40, seed=3)
        fd, td, _ = solve_on_grid(xd, 2, cfg, 4)
        fs, ts, _ = solve_on_grid(xs, 2, cfg, 4)
        assert np.max(np.abs(np.asarray(ts) - np.asarray(td))) <= 1e-10
        assert max_rel_dev(fs.A, fd.A) <= 1e-8
