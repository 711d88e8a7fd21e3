import numpy as np
import pytest

from rescalkit import GridError, dist_mm, spawn_grid
from rescalkit.errors import GridDeadlockError


class TestSpawn:
    def test_single_rank(self):
        assert spawn_grid(1, lambda ctx: ctx.rank * 10 + 7) == [7]

    def test_coords_p4(self):
        coords = spawn_grid(4, lambda ctx: (ctx.i, ctx.j))
        assert coords == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_rank_id_sum_p9(self):
        def program(ctx):
            return float(ctx.world_comm.all_reduce_sum(np.array([float(ctx.rank)]))[0])

        results = spawn_grid(9, program)
        assert results == [36.0] * 9

    def test_non_square_rejected(self):
        with pytest.raises(GridError):
            spawn_grid(2, lambda ctx: None)

    def test_rank_failure_propagates_with_rank_id(self):
        def program(ctx):
            if ctx.rank == 2:
                raise ValueError("boom")
            ctx.row_comm.all_reduce_sum(np.zeros(1))
            return ctx.rank

        with pytest.raises(GridError, match="rank 2"):
            spawn_grid(4, program, timeout=5.0)

    def test_diagonal_flag(self):
        flags = spawn_grid(4, lambda ctx: ctx.is_diagonal)
        assert flags == [True, False, False, True]


class TestAllReduce:
    def test_two_ranks_sum(self):
        def program(ctx):
            local = np.array([float(ctx.j) + 1.0])  # ranks hold [1], [2] per row
            return ctx.row_comm.all_reduce_sum(local)[0]

        results = spawn_grid(4, program)
        assert results == [3.0] * 4

    def test_single_rank_identity(self):
        def program(ctx):
            buf = np.array([4.0, 5.0])
            out = ctx.row_comm.all_reduce_sum(buf)
            assert out is not buf
            return out.tolist()

        assert spawn_grid(1, program) == [[4.0, 5.0]]

    def test_three_ranks_sequential_sum_oracle(self):
        # summation must be rank-ascending, bit-identical to a serial loop
        blocks = [np.random.default_rng(s).random((4, 4)) for s in range(3)]

        def program(ctx):
            return ctx.row_comm.all_reduce_sum(blocks[ctx.j])

        results = spawn_grid(9, program)
        expected = (blocks[0].copy() + blocks[1]) + blocks[2]
        for out in results:
            np.testing.assert_array_equal(out, expected)

    def test_shape_mismatch_detected(self):
        def program(ctx):
            return ctx.row_comm.all_reduce_sum(np.zeros((ctx.j + 1,)))

        with pytest.raises(GridError, match="mismatch"):
            spawn_grid(4, program, timeout=5.0)


class TestBroadcast:
    def test_root_payload_everywhere(self):
        def program(ctx):
            payload = np.array([5.0, 7.0]) if ctx.j == 0 else None
            return ctx.row_comm.broadcast(payload, root=0).tolist()

        results = spawn_grid(9, program)
        assert results == [[5.0, 7.0]] * 9

    def test_self_broadcast_identity(self):
        def program(ctx):
            return ctx.row_comm.broadcast(np.array([1.5]), root=0)[0]

        assert spawn_grid(1, program) == [1.5]

    def test_byte_equality_random_payload(self):
        payload = np.random.default_rng(3).random((5, 3))

        def program(ctx):
            buf = payload if ctx.i == 1 else None
            return ctx.col_comm.broadcast(buf, root=1).tobytes()

        results = spawn_grid(4, program)
        assert all(b == payload.tobytes() for b in results)

    def test_root_out_of_range(self):
        def program(ctx):
            return ctx.row_comm.broadcast(np.zeros(1), root=5)

        with pytest.raises(GridError, match="root"):
            spawn_grid(4, program, timeout=5.0)


class TestDistMM:
    @pytest.mark.parametrize("p", [1, 4, 9, 16])
    def test_gram_matches_serial(self, p):
        g = int(np.sqrt(p))
        a = np.random.default_rng(7).random((4 * g, 2))
        serial = a.T @ a

        def program(ctx):
            block = a[ctx.i * 4 : (ctx.i + 1) * 4]
            return dist_mm(block.T, block, ctx.col_comm)

        for out in spawn_grid(p, program):
            np.testing.assert_allclose(out, serial, rtol=1e-12, atol=1e-15)

    def test_identity_blocks_scale_with_comm(self):
        def program(ctx):
            return dist_mm(np.eye(3), np.eye(3), ctx.row_comm)

        for out in spawn_grid(9, program):
            np.testing.assert_array_equal(out, 3 * np.eye(3))

    def test_single_rank_plain_product(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(12.0).reshape(3, 4)

        def program(ctx):
            return dist_mm(a, b, ctx.row_comm)

        np.testing.assert_array_equal(spawn_grid(1, program)[0], a @ b)

    def test_inner_dim_mismatch(self):
        def program(ctx):
            return dist_mm(np.zeros((2, 3)), np.zeros((2, 3)), ctx.row_comm)

        with pytest.raises(GridError, match="dimension mismatch"):
            spawn_grid(1, program)


class TestDeterminismAndStats:
    def test_bit_identical_repeat_runs(self):
        def program(ctx):
            rng = np.random.default_rng(ctx.rank)
            local = rng.random((8, 8))
            out = ctx.col_comm.all_reduce_sum(local)
            out = ctx.row_comm.all_reduce_sum(out)
            return out.tobytes()

        first = spawn_grid(9, program)
        second = spawn_grid(9, program)
        assert first == second

    def test_stats_symmetric_across_ranks(self):
        def program(ctx):
            ctx.row_comm.all_reduce_sum(np.zeros((3, 3)))
            ctx.col_comm.broadcast(np.zeros(5) if ctx.i == 0 else None, root=0)
            return ctx.stats

        stats = spawn_grid(4, program)
        assert all(s == stats[0] for s in stats)
        assert stats[0].words[("all_reduce", "row")] == 9
        assert stats[0].counts[("broadcast", "col")] == 1
        assert stats[0].words[("broadcast", "col")] == 5

    def test_single_rank_comm_records_nothing(self):
        def program(ctx):
            ctx.row_comm.all_reduce_sum(np.zeros((4, 4)))
            return ctx.stats

        stats = spawn_grid(1, program)[0]
        assert stats.total_words() == 0 and stats.total_count() == 0


class TestDeadlockDetection:
    def test_mismatched_axes_time_out(self):
        def program(ctx):
            if ctx.rank == 0:
                ctx.row_comm.all_reduce_sum(np.zeros(1))
            else:
                ctx.col_comm.all_reduce_sum(np.zeros(1))
            return None

        with pytest.raises(GridError, match="pending"):
            spawn_grid(4, program, timeout=0.4)

    def test_mismatched_kind_same_comm(self):
        def program(ctx):
            if ctx.j == 0:
                ctx.row_comm.all_reduce_sum(np.zeros(1))
            else:
                ctx.row_comm.broadcast(np.zeros(1), root=0)
            return None

        with pytest.raises(GridError, match="mismatched collective"):
            spawn_grid(4, program, timeout=5.0)


def test_deadlock_error_is_grid_error():
    assert issubclass(GridDeadlockError, GridError)
