"""Tests for TransE, ConvKB, the component-wise graph attention update and the classifier."""

import os
import sys
import unittest

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import scorers as sc


class TestTransE(unittest.TestCase):

    def test_all_zero_inputs(self):
        self.assertEqual(sc.transe_score(np.zeros(4), np.zeros(4), np.zeros(4)), 0.0)

    def test_exact_cancellation(self):
        self.assertEqual(sc.transe_score([1, 0], [0, 1], [1, 1], p=1), 0.0)

    def test_random_l2_distance(self):
        rng = np.random.default_rng(0)
        u, r, v = rng.normal(size=(3, 8))
        self.assertAlmostEqual(sc.transe_score(u, r, v, p=2), float(np.linalg.norm(u + r - v)), places=12)

    def test_length_mismatch(self):
        with self.assertRaises(ValueError):
            sc.transe_score(np.zeros(3), np.zeros(4), np.zeros(3))


class TestConvKB(unittest.TestCase):

    def test_zero_parameters_score_zero(self):
        params = sc.init_convkb(4, 2, seed=0)
        params.filters.value[...] = 0.0
        params.w1.value[...] = 0.0
        self.assertEqual(sc.convkb_score(np.ones(4), np.ones(4), np.ones(4), params), 0.0)

    def test_translation_filter_by_hand(self):
        rows = 6
        params = sc.init_convkb(rows, 1, seed=0)
        params.filters.value[...] = [[1.0, 1.0, -1.0]]
        params.bias.value[...] = 0.0
        params.w1.value[...] = 1.0
        self.assertEqual(sc.convkb_score(np.ones(rows), np.ones(rows), np.ones(rows), params), float(rows))

    def test_random_case_matches_recomputation(self):
        rng = np.random.default_rng(5)
        params = sc.init_convkb(4, 2, seed=1)
        params.bias.value[...] = rng.normal(size=2)
        u, r, v = rng.normal(size=(3, 4))
        stacked = np.stack([u, r, v], axis=1)                         # (L, 3)
        features = np.maximum(stacked @ params.filters.value.T + params.bias.value, 0.0)   # (L, M)
        expected = float(params.w1.value[0] @ features.reshape(-1))
        self.assertAlmostEqual(sc.convkb_score(u, r, v, params), expected, places=12)

    def test_scaling_w1_scales_the_score(self):
        rng = np.random.default_rng(9)
        params = sc.init_convkb(4, 3, seed=2)
        params.bias.value[...] = rng.normal(size=3)
        u, r, v = rng.normal(size=(3, 4))
        base = sc.convkb_score(u, r, v, params)
        for c in (0.5, 2.0, 7.0):
            scaled = sc.init_convkb(4, 3, seed=2)
            scaled.bias.value[...] = params.bias.value
            scaled.w1.value[...] = c * params.w1.value
            self.assertAlmostEqual(sc.convkb_score(u, r, v, scaled), c * base, places=10)

    def test_row_count_checked(self):
        params = sc.init_convkb(4, 2, seed=0)
        with self.assertRaises(ValueError):
            sc.convkb_score(np.ones(3), np.ones(3), np.ones(3), params)


class TestGraphAttentionUpdate(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(2)
        self.comps = rng.normal(size=(5, 3, 2))
        self.params = sc.init_gat(3, 2, seed=0)

    def test_single_neighbour(self):
        out = sc.gat_update_component(0, 1, [3], self.params, self.comps)
        np.testing.assert_allclose(out, self.params.w4.value[1] @ self.comps[3, 1], rtol=1e-12)

    def test_duplicate_neighbour_matches_single(self):
        single = sc.gat_update_component(0, 2, [4], self.params, self.comps)
        double = sc.gat_update_component(0, 2, [4, 4], self.params, self.comps)
        np.testing.assert_allclose(double, single, rtol=1e-12)

    def test_three_neighbours_match_recomputation(self):
        k, neighbors = 0, [0, 2, 3]
        w3, w4 = self.params.w3.value[0], self.params.w4.value[k]
        logits = np.array([w3 @ self.comps[j, k] for j in neighbors])
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        expected = sum(a * (w4 @ self.comps[j, k]) for a, j in zip(weights, neighbors))
        np.testing.assert_allclose(sc.gat_update_component(0, k, neighbors, self.params, self.comps),
                                   expected, rtol=1e-12)

    def test_neighbour_order_does_not_matter(self):
        rng = np.random.default_rng(4)
        neighbors = [0, 1, 3, 4]
        for k in range(3):
            expected = sc.gat_update_component(2, k, neighbors, self.params, self.comps)
            for _ in range(3):
                shuffled = list(rng.permutation(neighbors))
                np.testing.assert_allclose(sc.gat_update_component(2, k, shuffled, self.params, self.comps),
                                           expected, rtol=1e-12, atol=1e-14)

    def test_empty_neighbourhood(self):
        with self.assertRaises(ValueError):
            sc.gat_update_component(0, 0, [], self.params, self.comps)


class TestClassifier(unittest.TestCase):

    def test_zero_weights_give_uniform_probabilities(self):
        params = sc.init_classifier(3, 4, seed=0)
        params.w5.value[...] = 0.0
        logits = sc.classify_logits(1, np.ones((2, 2, 2)), params)
        probs = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(probs, 1.0 / 3.0)

    def test_one_hot_rows_read_coordinates(self):
        comps = np.arange(8, dtype=float).reshape(1, 2, 4)
        params = sc.init_classifier(2, 8, seed=0)
        params.w5.value[...] = 0.0
        params.w5.value[0, 1] = 1.0
        params.w5.value[1, 6] = 1.0
        np.testing.assert_array_equal(sc.classify_logits(0, comps, params), [1.0, 6.0])

    def test_random_case_matches_recomputation(self):
        rng = np.random.default_rng(8)
        comps = rng.normal(size=(4, 2, 3))
        params = sc.init_classifier(3, 6, seed=4)
        expected = comps[[1, 3]].reshape(2, 6) @ params.w5.value.T
        np.testing.assert_allclose(sc.classify_logits([1, 3], comps, params), expected, rtol=1e-12)

    def test_needs_two_classes(self):
        with self.assertRaises(ValueError):
            sc.init_classifier(1, 4, seed=0)

    def test_updated_width_must_match(self):
        params = sc.init_classifier(2, 4, seed=0)
        with self.assertRaises(ValueError):
            sc.classify_logits(0, np.zeros((1, 2, 2)), params, gat=sc.init_gat(2, 2, seed=0, h=3))


if __name__ == '__main__':
    unittest.main()
