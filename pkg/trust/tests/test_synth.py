import json
import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from rest_framework.exceptions import ValidationError as DRFValidationError

from trust.consts import DETECTION, HARD, SEGMENTATION, TEST, TRAIN, VAL
from trust.formats import write_pgm
from trust.metrics import roc_auc
from trust.synth import Sample, average_mask, export_dataset, generate, import_dataset, rasterize_boxes, split_sizes
from trust.tests.utils import make_dataset


class TestGenerate(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.dataset = generate(1000, 0.22, seed=3, size=16)

    def test_split_sizes(self):
        self.assertEqual(split_sizes(1000), {TRAIN: 810, VAL: 90, TEST: 100})
        self.assertEqual({name: len(ids) for name, ids in self.dataset.manifest.splits.items()},
                         {TRAIN: 810, VAL: 90, TEST: 100})
        ids = [i for ids in self.dataset.manifest.splits.values() for i in ids]
        self.assertEqual(len(set(ids)), 1000)

    def test_stratified_positive_fraction(self):
        counts = self.dataset.manifest.counts
        self.assertEqual(sum(c['positive'] for c in counts.values()), 220)
        for name in (TRAIN, VAL, TEST):
            total = counts[name]['positive'] + counts[name]['negative']
            self.assertLess(abs(counts[name]['positive'] / total - 0.22), 0.02)

    def test_masks_follow_labels(self):
        for sample in self.dataset.samples:
            self.assertEqual(sample.mask.shape, sample.image.shape)
            self.assertEqual(bool(sample.mask.any()), sample.label == 1)
            self.assertEqual(bool(sample.boxes), sample.label == 1)
            self.assertTrue(np.all((sample.image >= 0) & (sample.image <= 1)))

    def test_boxes_cover_mask(self):
        for sample in self.dataset.positives(TRAIN):
            raster = rasterize_boxes(sample.boxes, sample.mask.shape)
            self.assertTrue(np.all(raster[sample.mask > 0] == 1))

    def test_lesion_area_cap(self):
        dataset = generate(100, 0.5, seed=4, size=32, max_lesion_fraction=0.05)
        for sample in dataset.samples:
            self.assertLessEqual(int(sample.mask.sum()), int(0.05 * 32 * 32))

    def test_deterministic(self):
        other = generate(1000, 0.22, seed=3, size=16)
        self.assertEqual(other.manifest.to_dict(), self.dataset.manifest.to_dict())
        for a, b in zip(self.dataset.samples[:50], other.samples[:50]):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.mask, b.mask)
        changed = generate(1000, 0.22, seed=5, size=16)
        self.assertNotEqual(changed.manifest.splits, self.dataset.manifest.splits)

    def test_easy_lesions_are_visible(self):
        # negatives are scored on a borrowed positive mask
        dataset = generate(200, 0.5, seed=6, size=32)
        masks = [s.mask > 0 for s in dataset.samples if s.label == 1]
        scores, labels = [], []
        for i, sample in enumerate(dataset.samples):
            mask = sample.mask > 0 if sample.label == 1 else masks[i % len(masks)]
            scores.append(sample.image[mask].mean() - sample.image.mean())
            labels.append(sample.label)
        self.assertGreaterEqual(roc_auc(scores, labels), 0.95)

    def test_hard_is_fainter(self):
        easy = generate(100, 0.5, seed=8, size=32)
        hard = generate(100, 0.5, seed=8, size=32, difficulty=HARD)
        sample_easy, sample_hard = easy.positives(TRAIN)[0], hard.positives(TRAIN)[0]
        np.testing.assert_array_equal(sample_easy.mask, sample_hard.mask)
        self.assertGreater(sample_easy.image.sum(), sample_hard.image.sum())

    def test_detection_flavor(self):
        dataset = generate(100, 0.4, seed=9, size=32, flavor=DETECTION)
        self.assertEqual(dataset.flavor, DETECTION)
        sample = dataset.positives(TRAIN)[0]
        truth = sample.truth(DETECTION)
        self.assertGreaterEqual(truth.sum(), sample.mask.sum())
        np.testing.assert_array_equal(sample.truth(SEGMENTATION), sample.mask)

    def test_invalid_arguments(self):
        with self.assertRaisesMessage(ValidationError, 'at least 100'):
            generate(50, 0.2, seed=0)
        with self.assertRaisesMessage(ValidationError, 'positive_fraction'):
            generate(100, 1.0, seed=0)
        with self.assertRaisesMessage(ValidationError, 'Unknown flavor'):
            generate(100, 0.2, seed=0, flavor='boxes')
        with self.assertRaisesMessage(ValidationError, 'Unknown difficulty'):
            generate(100, 0.2, seed=0, difficulty='medium')


class TestAverageMask(SimpleTestCase):
    def test_mean_of_positive_masks(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        a[:2] = 1
        b = np.zeros((4, 4), dtype=np.uint8)
        b[:, :2] = 1
        blank = np.zeros((4, 4), dtype=np.float32)
        dataset = make_dataset(
            [Sample('p1', blank, 1, a), Sample('p2', blank, 1, b), Sample('n', blank, 0, 0 * a)],
            {TRAIN: ['p1', 'p2', 'n'], VAL: [], TEST: []}, 4, SEGMENTATION,
        )
        avg = average_mask(dataset.samples)
        self.assertEqual(avg.values[0, 0], 1.0)
        self.assertEqual(avg.values[0, 3], 0.5)
        self.assertEqual(avg.values[3, 3], 0.0)
        self.assertEqual(avg.method, 'AVG')

    def test_single_positive(self):
        dataset = generate(100, 0.2, seed=1, size=16)
        positive = dataset.positives(TRAIN)[0]
        others = [s for s in dataset.split(TRAIN) if s.label == 0] + [positive]
        np.testing.assert_array_equal(average_mask(others).values, positive.mask.astype(np.float32))

    def test_no_positives(self):
        dataset = generate(100, 0.2, seed=1, size=16)
        with self.assertRaises(ValidationError):
            average_mask([s for s in dataset.samples if s.label == 0])


class TestExportImport(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'data'
        self.dataset = generate(120, 0.3, seed=2, size=16, flavor=DETECTION)
        export_dataset(self.dataset, self.path, 'abc')

    def test_round_trip(self):
        loaded = import_dataset(self.path)
        self.assertEqual(loaded.manifest.config_hash, 'abc')
        self.assertEqual(loaded.flavor, DETECTION)
        for name in (TRAIN, VAL, TEST):
            self.assertEqual(list(loaded.manifest.splits[name]), self.dataset.manifest.splits[name])
        for sample in self.dataset.samples:
            other = loaded.get(sample.sample_id)
            np.testing.assert_array_equal(other.image, sample.image)
            np.testing.assert_array_equal(other.mask, sample.mask)
            self.assertEqual(other.boxes, sample.boxes)

    def test_mask_size_mismatch(self):
        sample_id = self.dataset.positives(TRAIN)[0].sample_id
        write_pgm(self.path / 'masks' / f'{sample_id}.pgm', np.zeros((8, 8), dtype=np.uint8))
        with self.assertRaises(ValidationError) as ctx:
            import_dataset(self.path)
        messages = ctx.exception.message_dict[str(self.path / 'images' / f'{sample_id}.pgm')]
        self.assertIn('(8, 8)', messages[0])
        self.assertIn('(16, 16)', messages[0])

    def test_label_disagrees_with_mask(self):
        sample_id = self.dataset.positives(TRAIN)[0].sample_id
        write_pgm(self.path / 'masks' / f'{sample_id}.pgm', np.zeros((16, 16), dtype=np.uint8))
        with self.assertRaisesMessage(ValidationError, 'disagrees with mask'):
            import_dataset(self.path)

    def test_missing_manifest(self):
        (self.path / 'manifest.json').unlink()
        with self.assertRaisesMessage(ValidationError, 'Manifest file is missing'):
            import_dataset(self.path)

    def test_counts_mismatch(self):
        manifest = json.loads((self.path / 'manifest.json').read_text())
        manifest['counts'][TRAIN]['positive'] += 1
        (self.path / 'manifest.json').write_text(json.dumps(manifest))
        with self.assertRaises(DRFValidationError) as ctx:
            import_dataset(self.path)
        self.assertIn('counts', ctx.exception.detail)
