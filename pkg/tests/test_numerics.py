"""Packed symmetric matrices, Cholesky with jitter, and the seeded RNG."""

import numpy as np
import pytest

from tsaseg.numerics import FactorizationError, Rng, SymMat, cholesky, quad_form, sample_gaussian


class TestSymMat:
    def test_dense_roundtrip(self):
        rng = np.random.default_rng(7)
        for d in (1, 2, 3, 8):
            a = rng.standard_normal((d, d))
            sym = 0.5 * (a + a.T)
            m = SymMat.from_dense(sym)
            np.testing.assert_array_equal(m.full(), sym)

    def test_from_dense_symmetrizes(self):
        """Asymmetric input and its transpose must land on the same packing."""
        a = np.array([[1.0, 5.0], [1.0, 2.0]])
        m1 = SymMat.from_dense(a)
        m2 = SymMat.from_dense(a.T)
        np.testing.assert_array_equal(m1.packed, m2.packed)
        np.testing.assert_array_equal(m1.full(), 0.5 * (a + a.T))

    def test_packed_length_checked(self):
        with pytest.raises(ValueError):
            SymMat(3, np.zeros(5))
        with pytest.raises(ValueError):
            SymMat(0)

    def test_trace(self):
        rng = np.random.default_rng(11)
        for d in (1, 4, 7):
            a = rng.standard_normal((d, d))
            m = SymMat.from_dense(a @ a.T)
            assert m.trace() == pytest.approx(np.trace(a @ a.T), rel=1e-12)

    def test_identity_zeros_helpers(self):
        assert SymMat.zeros(3).is_zero()
        np.testing.assert_array_equal(SymMat.identity(4).full(), np.eye(4))

    def test_copy_is_independent(self):
        m = SymMat.identity(2)
        c = m.copy()
        c.packed[0] = 99.0
        assert m.packed[0] == 1.0
        assert m != c

    def test_quad_form_matches_dense(self):
        rng = np.random.default_rng(3)
        for d in (1, 2, 6):
            a = rng.standard_normal((d, d))
            sym = a @ a.T
            v = rng.standard_normal(d)
            got = quad_form(SymMat.from_dense(sym), v)
            assert got == pytest.approx(float(v @ sym @ v), rel=1e-12)

    def test_quad_form_shape_check(self):
        with pytest.raises(ValueError):
            quad_form(SymMat.identity(3), np.zeros(2))


class TestCholesky:
    def test_reconstruction(self):
        rng = np.random.default_rng(5)
        for d in (1, 3, 8):
            a = rng.standard_normal((d, d))
            sym = a @ a.T + 0.5 * np.eye(d)
            m = SymMat.from_dense(sym)
            ell = cholesky(m)
            assert np.allclose(np.triu(ell, 1), 0.0)
            # jitter is scale-aware and tiny relative to the trace
            np.testing.assert_allclose(ell @ ell.T, sym, atol=1e-6 * np.abs(sym).max())

    def test_zero_matrix_factor_is_zero(self):
        ell = cholesky(SymMat.zeros(4))
        np.testing.assert_array_equal(ell, np.zeros((4, 4)))

    def test_indefinite_raises(self):
        m = SymMat.from_dense(np.diag([1.0, -1.0]))
        with pytest.raises(FactorizationError):
            cholesky(m)

    def test_error_carries_context(self):
        with pytest.raises(FactorizationError, match="target cov"):
            cholesky(SymMat.from_dense(np.diag([1.0, -1.0])), context="target cov")

    def test_near_singular_succeeds_with_jitter(self):
        """Rank-deficient PSD matrices factor after the jitter bump."""
        v = np.array([1.0, 2.0, 3.0])
        m = SymMat.from_dense(np.outer(v, v))
        ell = cholesky(m)
        np.testing.assert_allclose(ell @ ell.T, np.outer(v, v), atol=1e-5)


class TestSampleGaussian:
    def test_zero_factor_returns_mean(self):
        rng = Rng(0)
        mean = np.array([1.5, -2.0])
        out = sample_gaussian(mean, np.zeros((2, 2)), rng)
        np.testing.assert_array_equal(out, mean)
        out_n = sample_gaussian(mean, np.zeros((2, 2)), rng, n=5)
        np.testing.assert_array_equal(out_n, np.tile(mean, (5, 1)))

    def test_moments(self):
        rng = Rng(123)
        a = np.array([[2.0, 0.0], [1.0, 1.0]])
        cov = a @ a.T
        mean = np.array([3.0, -1.0])
        x = sample_gaussian(mean, a, rng, n=200000)
        np.testing.assert_allclose(x.mean(axis=0), mean, atol=0.02)
        np.testing.assert_allclose(np.cov(x.T, bias=True), cov, atol=0.05)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            sample_gaussian(np.zeros(3), np.zeros((2, 2)), Rng(0))


class TestRng:
    def test_deterministic_for_seed(self):
        a = Rng(42).standard_normal(100)
        b = Rng(42).standard_normal(100)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, Rng(43).standard_normal(100))

    def test_standard_normal_edge_counts(self):
        rng = Rng(0)
        assert rng.standard_normal(0).shape == (0,)
        assert rng.standard_normal(1).shape == (1,)
        assert rng.standard_normal(7).shape == (7,)
        with pytest.raises(ValueError):
            rng.standard_normal(-1)

    def test_standard_normal_distribution(self):
        x = Rng(9).standard_normal(200000)
        assert abs(x.mean()) < 0.01
        assert abs(x.std() - 1.0) < 0.01
        assert np.isfinite(x).all()

    def test_odd_n_is_prefix_of_even(self):
        """n and n+1 draws share the first n values (pair consumption)."""
        a = Rng(5).standard_normal(9)
        b = Rng(5).standard_normal(10)
        np.testing.assert_array_equal(a, b[:9])

    def test_state_roundtrip(self):
        rng = Rng(17)
        rng.standard_normal(13)
        state = rng.get_state()
        a = rng.standard_normal(20)
        rng2 = Rng(0)
        rng2.set_state(state)
        b = rng2.standard_normal(20)
        np.testing.assert_array_equal(a, b)

    def test_state_is_json_serializable(self):
        import json

        state = json.loads(json.dumps(Rng(3).get_state()))
        rng = Rng(0)
        rng.set_state(state)
        np.testing.assert_array_equal(rng.standard_normal(4), Rng(3).standard_normal(4))

    def test_from_key_streams_differ(self):
        a = Rng.from_key(1, 0, 0).standard_normal(50)
        b = Rng.from_key(1, 0, 1).standard_normal(50)
        c = Rng.from_key(1, 0, 0).standard_normal(50)
        np.testing.assert_array_equal(a, c)
        assert not np.array_equal(a, b)

    def test_integers_range(self):
        rng = Rng(2)
        x = rng.integers(0, 10, size=1000)
        assert x.min() >= 0 and x.max() <= 9
        assert len(np.unique(x)) == 10

    def test_uniform_range(self):
        u = Rng(8).random(1000)
        assert np.all((u >= 0.0) & (u < 1.0))
