import numpy as np
import pytest

from flrq.errors import NumericalError
from flrq.linalg import (
    amax,
    as_matrix,
    fro_norm,
    gemv,
    gemv_t,
    rank1_subtract,
    svd_oracle,
)


class TestMatrixValidation:
    def test_accepts_nested_lists(self):
        a = as_matrix([[1.0, 2.0], [3.0, 4.0]])
        assert a.shape == (2, 2)
        assert a.dtype == np.float64

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            as_matrix([[1.0, np.nan]])

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            as_matrix([[np.inf, 0.0]])

    def test_rejects_1d(self):
        with pytest.raises(ValueError):
            as_matrix([1.0, 2.0])


class TestGemv:
    def test_identity(self):
        a = np.eye(3)
        x = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(gemv(a, x), x)

    def test_zeros(self):
        assert np.array_equal(gemv(np.zeros((2, 2)), np.array([5.0, 7.0])), np.zeros(2))

    def test_hand_case(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(gemv(a, np.array([1.0, 1.0])), np.array([3.0, 7.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gemv(np.zeros((2, 3)), np.zeros(2))


class TestGemvT:
    def test_identity(self):
        x = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(gemv_t(np.eye(3), x), x)

    def test_hand_case(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(gemv_t(a, np.array([1.0, 1.0])), np.array([4.0, 6.0]))

    def test_zeros(self):
        assert np.array_equal(gemv_t(np.zeros((3, 2)), np.zeros(3)), np.zeros(2))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gemv_t(np.zeros((2, 3)), np.zeros(3))

    def test_matches_transposed_gemv(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            m, n = rng.integers(1, 12, size=2)
            a = rng.standard_normal((m, n))
            x = rng.standard_normal(m)
            assert np.allclose(gemv_t(a, x), gemv(a.T.copy(), x), atol=1e-12)


class TestRank1Subtract:
    def test_exact_rank1_cancels(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal(6)
        v = rng.standard_normal(4)
        a = np.outer(u, v)
        out = rank1_subtract(a, u, v)
        assert np.abs(out).max() < 1e-12

    def test_zero_vectors_leave_unchanged(self):
        a = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(rank1_subtract(a, np.zeros(2), np.zeros(3)), a)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((4, 4))
        u = rng.standard_normal(4)
        v = rng.standard_normal(4)
        expected = a.copy()
        for i in range(4):
            for j in range(4):
                expected[i, j] -= u[i] * v[j]
        assert np.allclose(rank1_subtract(a, u, v), expected, atol=1e-14)

    def test_does_not_mutate_input(self):
        a = np.ones((2, 2))
        rank1_subtract(a, np.ones(2), np.ones(2))
        assert np.array_equal(a, np.ones((2, 2)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            rank1_subtract(np.zeros((2, 3)), np.zeros(3), np.zeros(3))


class TestAmaxFro:
    def test_amax_scan(self):
        assert amax(np.array([[-3.0, 1.0], [2.0, 0.0]])) == 3.0

    def test_amax_zero_matrix(self):
        assert amax(np.zeros((3, 3))) == 0.0

    def test_amax_single_element(self):
        assert amax(np.array([[-7.0]])) == 7.0

    def test_amax_empty_errors(self):
        with pytest.raises(ValueError):
            amax(np.zeros((0, 3)))

    def test_fro_identity(self):
        assert fro_norm(np.eye(2)) == pytest.approx(np.sqrt(2.0), rel=1e-15)

    def test_fro_zero(self):
        assert fro_norm(np.zeros((4, 5))) == 0.0

    def test_fro_hand_case(self):
        assert fro_norm(np.array([[3.0, 4.0]])) == pytest.approx(5.0, rel=1e-15)

    def test_amax_bounded_by_fro(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.standard_normal((rng.integers(1, 9), rng.integers(1, 9)))
            assert amax(a) <= fro_norm(a) + 1e-12

    def test_amax_equals_fro_iff_single_nonzero(self):
        a = np.zeros((3, 4))
        a[1, 2] = -5.0
        assert amax(a) == fro_norm(a)


class TestSvdOracle:
    def test_diagonal(self):
        res = svd_oracle(np.diag([3.0, 1.0]))
        assert np.allclose(res.singular_values, [3.0, 1.0], atol=1e-12)

    def test_rank1(self):
        rng = np.random.default_rng(4)
        u = rng.standard_normal(9)
        v = rng.standard_normal(5)
        res = svd_oracle(np.outer(u, v))
        expected = np.linalg.norm(u) * np.linalg.norm(v)
        assert res.singular_values[0] == pytest.approx(expected, rel=1e-12)
        assert res.singular_values[1] < 1e-12 * expected

    def test_sigma_matches_gram_eigendecomposition(self):
        # Independent route: eigenvalues of A^T A.
        a = np.random.default_rng(5).standard_normal((8, 5))
        res = svd_oracle(a)
        eig = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1]
        assert np.allclose(res.singular_values**2, eig, rtol=1e-8, atol=1e-10)

    def test_reconstruction_tight(self):
        rng = np.random.default_rng(6)
        for shape in [(12, 7), (7, 12), (20, 20)]:
            a = rng.standard_normal(shape)
            res = svd_oracle(a)
            recon = res.u @ np.diag(res.singular_values) @ res.v.T
            assert fro_norm(recon - a) <= 1e-9 * fro_norm(a)

    def test_descending_order(self):
        a = np.random.default_rng(7).standard_normal((15, 11))
        s = svd_oracle(a).singular_values
        assert np.all(np.diff(s) <= 1e-12)
        assert np.all(s >= 0)

    def test_orthonormal_factors(self):
        a = np.random.default_rng(8).standard_normal((10, 14))
        res = svd_oracle(a)
        k = res.singular_values.shape[0]
        assert np.abs(res.u.T @ res.u - np.eye(k)).max() < 1e-10
        assert np.abs(res.v.T @ res.v - np.eye(k)).max() < 1e-10

    def test_eckart_young(self):
        # Truncated reconstruction error equals the sigma tail for every r.
        a = np.random.default_rng(9).standard_normal((12, 9))
        res = svd_oracle(a)
        for r in range(res.singular_values.shape[0] + 1):
            left, right = res.low_rank(r)
            err = fro_norm(a - left @ right)
            tail = np.sqrt(np.sum(res.singular_values[r:] ** 2))
            assert err == pytest.approx(tail, rel=1e-8, abs=1e-10)

    def test_size_guard(self):
        with pytest.raises(NumericalError):
            svd_oracle(np.zeros((1025, 1025)))

    def test_zero_matrix(self):
        res = svd_oracle(np.zeros((4, 6)))
        assert np.all(res.singular_values == 0.0)
        assert np.abs(res.u.T @ res.u - np.eye(4)).max() < 1e-10

    def test_input_not_mutated(self):
        a = np.random.default_rng(10).standard_normal((5, 12))
        before = a.copy()
        svd_oracle(a)
        assert np.array_equal(a, before)
