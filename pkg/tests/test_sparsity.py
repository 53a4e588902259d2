from unittest import TestCase

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from sqftforge.errors import ConfigError, ShapeError
from sqftforge.sparsity import (
    apply_mask,
    build_mask,
    check_group,
    check_level,
    mask_sparsity,
    measure_sparsity,
    prune,
    prune_count,
    score_magnitude,
    score_wanda,
)


class ScoreTest(TestCase):
    def test_sign_flip_invariance(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(5, 5))
        x = rng.normal(size=(10, 5))
        assert_array_equal(score_magnitude(w), score_magnitude(-w))
        assert_array_equal(score_wanda(w, x), score_wanda(-w, x))

    def test_wanda_weights_features(self):
        w = np.ones((1, 2))
        x = np.array([[3.0, 0.0], [4.0, 1.0]])
        assert_array_equal(score_wanda(w, x), [[5.0, 1.0]])
        _, mask = prune(w, 0.5, 'wanda', 'row', x)
        assert_array_equal(mask, [[True, False]])

    def test_wanda_shape_check(self):
        with self.assertRaises(ShapeError):
            score_wanda(np.ones((2, 3)), np.ones((4, 2)))


class MaskTest(TestCase):
    def test_row_counts(self):
        scores = np.random.default_rng(1).uniform(size=(6, 10))
        for level in (0.0, 0.1, 0.29, 0.5, 0.75, 0.99):
            mask = build_mask(scores, level, 'row')
            pruned = (~mask).sum(axis=1)
            assert_array_equal(pruned, [prune_count(level, 10)] * 6)

    def test_matrix_count(self):
        scores = np.random.default_rng(2).uniform(size=(4, 5))
        mask = build_mask(scores, 0.5, 'matrix')
        self.assertEqual(int((~mask).sum()), 10)
        self.assertTrue(scores[~mask].max() <= scores[mask].min())

    def test_ties_prune_in_reading_order(self):
        mask = build_mask(np.ones((2, 4)), 0.5, 'row')
        assert_array_equal(mask, [[False, False, True, True]] * 2)
        mask = build_mask(np.ones((2, 2)), 0.5, 'matrix')
        assert_array_equal(mask, [[False, False], [True, True]])

    def test_floor_guard(self):
        self.assertEqual(prune_count(0.29, 100), 29)
        self.assertEqual(prune_count(0.5, 3), 1)

    def test_lowest_scores_pruned(self):
        mask = build_mask(np.array([[4.0, 1.0, 3.0, 2.0]]), 0.5)
        assert_array_equal(mask, [[True, False, True, False]])

    def test_level_bounds(self):
        with self.assertRaises(ConfigError):
            check_level(1.0)
        with self.assertRaises(ConfigError):
            check_level(-0.1)
        self.assertEqual(check_level(0), 0.0)

    def test_group_aliases(self):
        self.assertEqual(check_group('per_row'), 'row')
        self.assertEqual(check_group('per_matrix'), 'matrix')
        with self.assertRaises(ConfigError):
            check_group('column')


class ApplyTest(TestCase):
    def test_measured_sparsity(self):
        w = np.arange(1.0, 17.0).reshape(4, 4)
        pruned, mask = prune(w, 0.5, 'magnitude')
        self.assertEqual(measure_sparsity(pruned), 0.5)
        self.assertEqual(mask_sparsity(mask), 0.5)

    def test_pruned_entries_are_positive_zero(self):
        w = -np.ones((2, 2))
        pruned = apply_mask(w, np.array([[True, False], [False, True]]))
        self.assertFalse(np.signbit(pruned[0, 1]))
        self.assertEqual(pruned[0, 0], -1.0)

    def test_existing_zeros_go_first(self):
        w = np.array([[0.0, 5.0, 1.0, 2.0]])
        _, mask = prune(w, 0.25, 'magnitude')
        assert_array_equal(mask, [[False, True, True, True]])

    def test_zero_level_keeps_everything(self):
        w = np.random.default_rng(3).normal(size=(3, 3))
        pruned, mask = prune(w, 0.0, 'magnitude')
        self.assertTrue(mask.all())
        assert_array_equal(pruned, w)

    def test_wanda_needs_calibration(self):
        with self.assertRaises(ConfigError):
            prune(np.ones((2, 2)), 0.5, 'wanda')

    def test_unknown_score(self):
        with self.assertRaises(ConfigError):
            prune(np.ones((2, 2)), 0.5, 'random')


class WorkedExampleTest(TestCase):
    w = np.array([[1.0, -4.0], [3.0, 2.0]])

    def test_wanda_scores(self):
        x = np.array([[2.0, 0.0], [0.0, 1.0]])
        scores = score_wanda(self.w, x)
        assert_array_equal(scores, [[2.0, 4.0], [6.0, 2.0]])
        mask = build_mask(scores, 0.5, 'row')
        assert_array_equal(mask, [[False, True], [True, False]])
        assert_array_equal(apply_mask(self.w, mask), [[0.0, -4.0], [3.0, 0.0]])

    def test_uniform_calibration(self):
        assert_array_equal(score_wanda(self.w, np.ones((4, 2))), 2.0 * np.abs(self.w))
        x = np.array([[1.0, 0.0], [2.0, 0.0]])
        assert_array_equal(score_wanda(self.w, x)[:, 1], [0.0, 0.0])

    def test_matrix_group(self):
        mask = build_mask(np.array([[1.0, 2.0], [3.0, 4.0]]), 0.5, 'matrix')
        assert_array_equal(mask, [[False, False], [True, True]])

    def test_identity_sparsity(self):
        self.assertEqual(measure_sparsity(np.eye(4)), 0.75)
        self.assertEqual(measure_sparsity(np.zeros((2, 3))), 1.0)


class MaskPropertyTest(TestCase):
    groups = ('row', 'matrix', 'per_row')

    def cases(self, count=20):
        rng = np.random.default_rng(11)
        for _ in range(count):
            rows, cols = (int(n) for n in rng.integers(1, 24, size=2))
            w = rng.normal(size=(rows, cols))
            x = rng.normal(size=(int(rng.integers(1, 16)), cols))
            yield w, x

    def test_higher_levels_prune_supersets(self):
        levels = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)
        for w, x in self.cases():
            scores = score_wanda(w, x)
            for group in self.groups:
                masks = [build_mask(scores, level, group) for level in levels]
                for lower, higher in zip(masks, masks[1:]):
                    # kept at the higher level implies kept at the lower one
                    self.assertFalse(np.any(higher & ~lower), msg=f"{group} {w.shape}")

    def test_calibration_scale_leaves_mask(self):
        for w, x in self.cases():
            scores = score_wanda(w, x)
            for scale in (0.25, 3.0, 8.0):
                scaled = score_wanda(w, scale * x)
                assert_allclose(scaled, scale * scores, rtol=1e-12)
                for group in self.groups:
                    assert_array_equal(build_mask(scaled, 0.5, group), build_mask(scores, 0.5, group))

    def test_apply_mask_is_idempotent(self):
        for w, x in self.cases():
            for group in self.groups:
                mask = build_mask(score_wanda(w, x), 0.5, group)
                once = apply_mask(w, mask)
                assert_array_equal(apply_mask(once, mask), once)
