from unittest import TestCase

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from sqftforge.errors import DataError, ShapeError
from sqftforge.tensor import (
    Rng,
    as_matrix,
    col_l2_norms,
    frobenius_sq,
    frozen,
    hadamard,
    matmul,
)


class MatmulTest(TestCase):
    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.integers(-9, 10, (7, 5)).astype(np.float64)
        b = rng.integers(-9, 10, (5, 3)).astype(np.float64)
        expected = np.zeros((7, 3))
        for i in range(7):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        assert_array_equal(matmul(a, b), expected)

    def test_identity(self):
        a = np.arange(12.0).reshape(3, 4)
        assert_array_equal(matmul(np.eye(3), a), a)
        assert_array_equal(matmul(a, np.eye(4)), a)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite(self):
        with self.assertRaises(DataError):
            matmul(np.array([[np.inf]]), np.array([[1.0]]))

    def test_overflow_is_caught(self):
        with np.errstate(over='ignore'), self.assertRaises(DataError):
            matmul(np.array([[1e200]]), np.array([[1e200]]))


class ElementwiseTest(TestCase):
    def test_hadamard(self):
        a = np.arange(6.0).reshape(2, 3)
        assert_array_equal(hadamard(a, a), a * a)
        with self.assertRaises(ShapeError):
            hadamard(a, a.T)

    def test_col_norms_match_loop(self):
        x = np.random.default_rng(2).normal(size=(6, 4))
        expected = [np.sqrt(sum(x[i, j] ** 2 for i in range(6))) for j in range(4)]
        assert_allclose(col_l2_norms(x), expected, rtol=1e-12)

    def test_col_norms_reject_empty(self):
        with self.assertRaises(ShapeError):
            col_l2_norms(np.zeros((0, 3)))

    def test_frobenius(self):
        self.assertEqual(frobenius_sq(np.array([[1.0, 2.0], [3.0, 4.0]])), 30.0)

    def test_as_matrix(self):
        self.assertEqual(as_matrix([[1, 2]]).dtype, np.float64)
        with self.assertRaises(ShapeError):
            as_matrix([1, 2])
        with self.assertRaises(DataError):
            as_matrix([[np.nan]])

    def test_frozen_is_read_only_copy(self):
        source = np.ones((2, 2))
        matrix = frozen(source)
        source[0, 0] = 5.0
        self.assertEqual(matrix[0, 0], 1.0)
        with self.assertRaises(ValueError):
            matrix[0, 0] = 2.0


class RngTest(TestCase):
    def test_same_seed_same_stream(self):
        assert_array_equal(Rng(7, 'a').normal(size=5), Rng(7, 'a').normal(size=5))

    def test_labels_separate_streams(self):
        self.assertFalse(np.array_equal(Rng(7, 'a').normal(size=5), Rng(7, 'b').normal(size=5)))

    def test_derive_ignores_parent_draws(self):
        parent = Rng(3)
        parent.normal(size=100)
        assert_array_equal(parent.derive('x').uniform(0, 1, 4), Rng(3, 'x').uniform(0, 1, 4))

    def test_choice_without_replacement(self):
        picked = Rng(0).choice(list('abcdef'), 6)
        self.assertEqual(sorted(picked), list('abcdef'))

    def test_repr(self):
        self.assertEqual(repr(Rng(0)), "Rng(0)")
        self.assertEqual(repr(Rng(5, 'search', 2)), "Rng(5, 'search', 2)")
