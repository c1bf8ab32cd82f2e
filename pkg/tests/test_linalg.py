import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alsrec.dataset import ingest, transpose
from alsrec.linalg import NumericalError, ShapeError, SpdSystem, cg_solve, cg_solve_rows, gram, loss
from oracles import dataset_from_dense, dense_matrix, loss_all_pairs, matmul_loops, random_dataset, random_spd


class TestGram:
    def test_identity(self):
        np.testing.assert_array_equal(gram(np.eye(2)), np.eye(2))

    def test_known_value(self):
        F = np.array([[1.0, 2.0], [3.0, 4.0]])
        expected = matmul_loops(F.T, F)
        np.testing.assert_array_equal(expected, [[10, 14], [14, 20]])
        np.testing.assert_array_equal(gram(F), expected)

    def test_zero_column(self):
        F = np.array([[1.0, 0.0, 2.0], [3.0, 0.0, 4.0]])
        G = gram(F)
        assert np.all(G[1] == 0) and np.all(G[:, 1] == 0)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalError):
            gram(np.array([[1.0, np.nan]]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 6)),
                  elements=st.floats(-10, 10)))
    def test_symmetric_psd(self, F):
        G = gram(F)
        assert np.array_equal(G, G.T)
        assert np.linalg.eigvalsh(G).min() >= -1e-10 * max(1.0, np.abs(G).max())
        np.testing.assert_allclose(G, matmul_loops(F.T, F), rtol=1e-12, atol=1e-10)

    @pytest.mark.parametrize("block_rows", [1, 3, 7, 64])
    def test_thread_count_does_not_change_bits(self, rng, block_rows):
        F = rng.standard_normal((200, 5))
        ref = gram(F, block_rows=block_rows, threads=1)
        for threads in (2, 4):
            assert np.array_equal(gram(F, block_rows=block_rows, threads=threads), ref)
        np.testing.assert_allclose(ref, F.T @ F, rtol=1e-12)


class TestCG:
    def test_identity_one_step(self):
        steps = []
        x = cg_solve(SpdSystem(np.eye(2)), np.array([3.0, 4.0]), np.zeros(2), 5,
                     callback=lambda k, x: steps.append(k))
        np.testing.assert_allclose(x, [3, 4])
        assert steps == [1]

    def test_symmetric_system(self):
        x = cg_solve(SpdSystem(np.array([[2.0, 1.0], [1.0, 2.0]])), np.array([3.0, 3.0]), np.zeros(2), 3)
        np.testing.assert_allclose(x, [1, 1], rtol=1e-14)

    def test_random_5x5_matches_direct(self, rng):
        A = random_spd(rng, 5)
        b = rng.standard_normal(5)
        direct = np.linalg.solve(A, b)
        x = cg_solve(SpdSystem(A), b, rng.standard_normal(5), 5)
        np.testing.assert_allclose(x, direct, rtol=1e-8)

    def test_shift_is_applied(self, rng):
        A = random_spd(rng, 4)
        b = rng.standard_normal(4)
        x = cg_solve(SpdSystem(A, 2.5), b, np.zeros(4), 4)
        np.testing.assert_allclose(x, np.linalg.solve(A + 2.5 * np.eye(4), b), rtol=1e-8)

    def test_exact_start_exits_without_dividing(self):
        A = np.array([[4.0]])
        steps = []
        x = cg_solve(SpdSystem(A), np.array([2.0]), np.array([0.5]), 3,
                     callback=lambda k, x: steps.append(k))
        assert x[0] == 0.5 and steps == []

    def test_semidefinite_warm_start(self):
        # singular A, b in its range: CG stays finite and converges
        A = np.diag([2.0, 0.0])
        x = cg_solve(SpdSystem(A), np.array([4.0, 0.0]), np.array([0.0, 1.0]), 3)
        np.testing.assert_allclose(x, [2.0, 1.0])

    def test_breakdown_raises(self):
        A = np.array([[1e308, 0.0], [0.0, 1e308]])
        with pytest.raises(NumericalError, match="step 1"):
            cg_solve(SpdSystem(A), np.array([1e308, 1e308]), np.array([1e10, 1e10]), 3)

    def test_validation(self):
        with pytest.raises(ValueError):
            cg_solve(SpdSystem(np.eye(2)), np.ones(2), np.zeros(2), 0)
        with pytest.raises(ShapeError):
            cg_solve(SpdSystem(np.eye(2)), np.ones(3), np.zeros(2), 1)
        with pytest.raises(ValueError):
            SpdSystem(np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            SpdSystem(np.eye(2), -1.0)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**32 - 1), st.floats(0, 5))
    def test_objective_never_increases(self, f, seed, shift):
        rng = np.random.default_rng(seed)
        system = SpdSystem(random_spd(rng, f, cond=1e3), shift)
        b = rng.standard_normal(f)
        x0 = rng.standard_normal(f)
        values = [system.objective(x0, b)]
        cg_solve(system, b, x0, max(3, f), callback=lambda k, x: values.append(system.objective(x, b)))
        scale = max(1.0, abs(values[0]))
        assert all(v1 <= v0 + 1e-12 * scale for v0, v1 in zip(values, values[1:]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_rows_match_single(self, f, n, steps, seed):
        rng = np.random.default_rng(seed)
        system = SpdSystem(random_spd(rng, f), float(rng.random()))
        B = rng.standard_normal((n, f))
        X0 = rng.standard_normal((n, f))
        X = cg_solve_rows(system, B, X0, steps)
        for r in range(n):
            single = cg_solve(system, B[r], X0[r], steps)
            # summation order differs between the batched and single paths
            np.testing.assert_allclose(X[r], single, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(single).max()))

    def test_rows_zero_rhs(self):
        system = SpdSystem(np.eye(3), 1.0)
        X = cg_solve_rows(system, np.zeros((2, 3)), np.ones((2, 3)), 1)
        np.testing.assert_allclose(X, 0, atol=1e-15)

    def test_rows_breakdown_names_row(self):
        system = SpdSystem(np.eye(2) * 1e308)
        B = np.array([[0.0, 0.0], [1e308, 1e308]])
        X0 = np.array([[0.0, 0.0], [1e10, 1e10]])
        with pytest.raises(NumericalError, match="row 1"):
            cg_solve_rows(system, B, X0, 2)


class TestLoss:
    def test_zero_factors(self, two_block):
        X = np.zeros((two_block.n_companies, 3))
        Y = np.zeros((two_block.n_investors, 3))
        assert loss(two_block, X, Y, 0.0) == two_block.nnz

    def test_single_pair(self):
        d = ingest([("i", "c")])
        assert loss(d, np.array([[1.0]]), np.array([[1.0]]), 2.0) == 4.0

    def test_small_instance_matches_double_loop(self, rng):
        d = random_dataset(rng, 4, 3, 0.5)
        X = rng.standard_normal((4, 2))
        Y = rng.standard_normal((3, 2))
        expected = loss_all_pairs(dense_matrix(d), X, Y, 0.7)
        assert loss(d, X, Y, 0.7) == pytest.approx(expected, rel=1e-10)

    def test_shape_mismatch(self, two_block):
        with pytest.raises(ShapeError):
            loss(two_block, np.zeros((3, 2)), np.zeros((two_block.n_investors, 2)), 0.0)
        with pytest.raises(ShapeError):
            loss(two_block, np.zeros((two_block.n_companies, 2)), np.zeros((two_block.n_investors, 3)), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        C, I, f = rng.integers(2, 12), rng.integers(2, 12), rng.integers(1, 5)
        d = random_dataset(rng, C, I, 0.3)
        X = rng.standard_normal((C, f))
        Y = rng.standard_normal((I, f))
        pc, pi = rng.permutation(C), rng.permutation(I)
        d2 = dataset_from_dense(dense_matrix(d)[pc][:, pi])
        assert loss(d2, X[pc], Y[pi], 0.3) == pytest.approx(loss(d, X, Y, 0.3), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_transpose_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        C, I, f = rng.integers(1, 10), rng.integers(1, 10), rng.integers(1, 5)
        d = random_dataset(rng, C, I, 0.4)
        X = rng.standard_normal((C, f))
        Y = rng.standard_normal((I, f))
        assert loss(transpose(d), Y, X, 1.5) == pytest.approx(loss(d, X, Y, 1.5), rel=1e-12)
