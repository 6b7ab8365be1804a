import itertools

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from skimage.metrics import structural_similarity
from sklearn.metrics import average_precision_score

from trust.metrics import SSIMConfig, auprc, gaussian_window, normalize, pr_curve, roc_auc, ssim


def brute_force_auprc(scores, truth):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel() > 0
    total, previous_recall = 0.0, 0.0
    for threshold in sorted(set(scores), reverse=True):
        predicted = scores >= threshold
        tp = np.sum(predicted & truth)
        recall = tp / truth.sum()
        total += (recall - previous_recall) * tp / predicted.sum()
        previous_recall = recall
    return total


class TestPRCurve(SimpleTestCase):
    def test_first_point_hits_positive(self):
        curve = pr_curve(np.array([[0.9, 0.1], [0.2, 0.3]]), np.array([[1, 0], [0, 0]]))
        self.assertEqual((curve.precision[0], curve.recall[0]), (1.0, 1.0))

    def test_constant_map(self):
        curve = pr_curve(np.full((2, 2), 0.3), np.array([[1, 0], [0, 0]]))
        self.assertEqual(len(curve), 1)
        self.assertEqual((curve.precision[0], curve.recall[0]), (0.25, 1.0))
        self.assertAlmostEqual(auprc(curve), 0.25, places=9)

    def test_inverted_perfect_map(self):
        curve = pr_curve(np.array([[0.9, 0.1], [0.2, 0.3]]), np.array([[0, 1], [0, 0]]))
        np.testing.assert_array_equal(curve.precision[:3], np.zeros(3))
        self.assertEqual(curve.precision[-1], 0.25)
        self.assertEqual(curve.recall[-1], 1.0)

    def test_recall_nondecreasing(self):
        rng = np.random.default_rng(0)
        curve = pr_curve(rng.random((16, 16)), rng.random((16, 16)) > 0.8)
        self.assertTrue(np.all(np.diff(curve.recall) >= 0))
        self.assertEqual(curve.recall[-1], 1.0)

    def test_threshold_cap(self):
        rng = np.random.default_rng(1)
        truth = rng.random((64, 64)) > 0.9
        curve = pr_curve(rng.random((64, 64)), truth)
        self.assertLessEqual(len(curve), 512)
        self.assertEqual(curve.recall[-1], 1.0)
        self.assertAlmostEqual(curve.precision[-1], truth.mean(), places=12)

    def test_empty_truth(self):
        with self.assertRaisesMessage(ValidationError, 'no positive pixel'):
            pr_curve(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with self.assertRaises(ValidationError):
            pr_curve(np.zeros((2, 2)), np.ones((3, 3)))


class TestAUPRC(SimpleTestCase):
    def test_perfect_ranking(self):
        truth = np.array([[1, 1], [0, 0]])
        self.assertEqual(auprc(pr_curve(truth.astype(float), truth)), 1.0)

    def test_exhaustive_truths(self):
        rng = np.random.default_rng(2)
        for _ in range(3):
            scores = rng.random((3, 3))
            for bits in itertools.product((0, 1), repeat=9):
                if not any(bits):
                    continue
                truth = np.array(bits).reshape(3, 3)
                expected = brute_force_auprc(scores, truth)
                self.assertAlmostEqual(auprc(pr_curve(scores, truth)), expected, places=12)

    def test_matches_sklearn(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            scores = np.round(rng.random((12, 12)), 2)
            truth = rng.random((12, 12)) > 0.85
            truth[0, 0] = True
            self.assertAlmostEqual(
                auprc(pr_curve(scores, truth)), average_precision_score(truth.ravel(), scores.ravel()), places=12
            )

    def test_rank_invariance(self):
        rng = np.random.default_rng(4)
        for size in (16, 64):
            for _ in range(10):
                scores = rng.uniform(-1, 1, (size, size))
                truth = rng.random((size, size)) > 0.8
                base = auprc(pr_curve(scores, truth))
                self.assertAlmostEqual(auprc(pr_curve(scores ** 3, truth)), base, delta=1e-12)
                self.assertAlmostEqual(auprc(pr_curve(np.exp(scores), truth)), base, delta=1e-12)

    def test_swap_improves(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            scores = rng.random((2, 2)).ravel()
            truth = (rng.random(4) > 0.5).astype(int)
            if truth.sum() in (0, 4):
                continue
            before = auprc(pr_curve(scores.reshape(2, 2), truth.reshape(2, 2)))
            for neg, pos in itertools.product(np.flatnonzero(truth == 0), np.flatnonzero(truth == 1)):
                if scores[neg] > scores[pos]:
                    swapped = scores.copy()
                    swapped[neg], swapped[pos] = scores[pos], scores[neg]
                    after = auprc(pr_curve(swapped.reshape(2, 2), truth.reshape(2, 2)))
                    self.assertGreaterEqual(after, before - 1e-12)

    def test_random_map_near_prevalence(self):
        rng = np.random.default_rng(6)
        truth = np.zeros((32, 32), dtype=int)
        truth[:8] = 1
        values = [auprc(pr_curve(rng.random((32, 32)), truth)) for _ in range(100)]
        self.assertLess(abs(np.mean(values) - 0.25), 0.02)


class TestSSIM(SimpleTestCase):
    def test_window_sums_to_one(self):
        self.assertAlmostEqual(gaussian_window(11, 1.5).sum(), 1.0, places=12)

    def test_identity_and_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a, b = rng.random((32, 32)), rng.random((32, 32))
            self.assertAlmostEqual(ssim(a, a), 1.0, delta=1e-9)
            self.assertEqual(ssim(a, b), ssim(b, a))

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = rng.random((24, 24))
            b = 0.5 * a + 0.5 * rng.random((24, 24))
            expected = structural_similarity(
                normalize(a), normalize(b), gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                data_range=1.0,
            )
            self.assertAlmostEqual(ssim(a, b), expected, delta=1e-6)

    def test_independent_noise(self):
        rng = np.random.default_rng(2)
        values = [ssim(rng.random((64, 64)), rng.random((64, 64))) for _ in range(10)]
        self.assertLess(abs(np.mean(values)), 0.05)

    def test_affine_invariance(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        self.assertAlmostEqual(ssim(a, b), ssim(3 * a - 2, 3 * b - 2), places=9)

    def test_constant_maps(self):
        self.assertEqual(ssim(np.zeros((16, 16)), np.zeros((16, 16))), 1.0)
        np.testing.assert_array_equal(normalize(np.ones((3, 3))), np.full((3, 3), 0.5))

    def test_shape_mismatch(self):
        with self.assertRaises(ValidationError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))
        with self.assertRaises(ValidationError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), SSIMConfig())


class TestROCAUC(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]), 1.0)
        self.assertEqual(roc_auc([0.5] * 4, [0, 1, 0, 1]), 0.5)
        self.assertEqual(roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), 0.75)

    def test_matches_pairwise_count(self):
        rng = np.random.default_rng(0)
        scores = np.round(rng.random(200), 1)
        labels = (rng.random(200) > 0.7).astype(int)
        pos, neg = scores[labels == 1], scores[labels == 0]
        wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        self.assertAlmostEqual(roc_auc(scores, labels), wins / (pos.size * neg.size), places=12)
        with self.assertRaisesMessage(ValidationError, '3 scores for 2 labels'):
            roc_auc([0.1, 0.2, 0.3], [0, 1])

    def test_single_class(self):
        with self.assertRaisesMessage(ValidationError, 'both classes'):
            roc_auc([0.1, 0.2], [1, 1])
