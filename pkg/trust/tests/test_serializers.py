import json
import tempfile
from pathlib import Path

from django.conf import settings
from django.test import SimpleTestCase
from rest_framework.exceptions import ValidationError

from trust.consts import ARCH_A, ARCH_B, DETECTION, GGCAM, GRAD, METHODS, TEST, TRAIN, VAL
from trust.serializers import DatasetManifestSerializer, ModelSidecarSerializer, load_config


def manifest(**changes):
    data = {
        'flavor': 'segmentation',
        'image_size': 16,
        'splits': {TRAIN: ['a', 'b'], VAL: ['c'], TEST: ['d']},
        'labels': {'a': 1, 'b': 0, 'c': 1, 'd': 0},
        'counts': {
            TRAIN: {'positive': 1, 'negative': 1},
            VAL: {'positive': 1, 'negative': 0},
            TEST: {'positive': 0, 'negative': 1},
        },
    }
    data.update(changes)
    return data


def sidecar(**changes):
    data = {
        'name': 'arch_a_1', 'arch': ARCH_A, 'image_size': 64, 'seed': 1, 'auc_history': [0.7, 0.9, 0.8],
        'loss_history': [0.6, 0.5, 0.4], 'stopped_epoch': 3, 'best_epoch': 2, 'fingerprint': 'f00',
        'config_hash': '',
    }
    data.update(changes)
    return data


class TestExperimentConfig(SimpleTestCase):
    def test_defaults(self):
        config = load_config(data={})
        self.assertEqual(config.dataset['n'], 2000)
        self.assertEqual(config.dataset['positive_fraction'], 0.22)
        self.assertEqual(config.methods, METHODS)
        self.assertEqual(config.saliency.ig_steps, 25)
        self.assertEqual(config.ssim.window_size, 11)
        self.assertEqual(config.harness.bootstrap_resamples, 10000)
        self.assertEqual(config.classifier_training(ARCH_A).lr, 1e-4)
        self.assertEqual(config.classifier_training(ARCH_B).lr, 7e-5)
        self.assertEqual(config.segmenter_training.max_epochs, 75)
        self.assertEqual(config.models['segmenter_seeds'], [4, 5])

    def test_detection_default_fraction(self):
        config = load_config(data={'dataset': {'flavor': DETECTION}})
        self.assertEqual(config.dataset['positive_fraction'], 0.4)

    def test_shipped_config_is_valid(self):
        config = load_config(settings.TRUST_DEFAULT_CONFIG)
        self.assertEqual(config.dataset['image_size'], 64)

    def test_hash_is_stable(self):
        a = load_config(data={})
        self.assertEqual(a.hash, load_config(data={}).hash)
        self.assertEqual(a.hash, load_config(data={'dataset': {'n': 2000}, 'ssim': {}}).hash)
        self.assertEqual(len(a.hash), 64)
        self.assertNotEqual(a.hash, load_config(data={'ssim': {'window_size': 7}}).hash)

    def test_seed_override(self):
        base = load_config(data={'dataset': {'seed': 1}})
        overridden = load_config(data={'dataset': {'seed': 1}}, seed=9)
        self.assertEqual(overridden.dataset['seed'], 9)
        self.assertNotEqual(base.hash, overridden.hash)
        self.assertEqual(overridden.hash, load_config(data={'dataset': {'seed': 9}}).hash)

    def test_methods_in_report_order(self):
        config = load_config(data={'saliency': {'methods': [GGCAM, GRAD]}})
        self.assertEqual(config.methods, (GRAD, GGCAM))

    def test_unexpected_fields(self):
        with self.assertRaises(ValidationError) as ctx:
            load_config(data={'dataset': {'bogus': 1}, 'extra': True})
        self.assertIn('Unexpected field.', str(ctx.exception.detail['dataset']['bogus']))
        self.assertIn('Unexpected field.', str(ctx.exception.detail['extra']))

    def test_unexpected_and_invalid_reported_together(self):
        with self.assertRaises(ValidationError) as ctx:
            load_config(data={'ssim': {'window_size': 8, 'radius': 3}, 'harness': 'fast'})
        detail = ctx.exception.detail
        self.assertEqual(set(detail['ssim']), {'window_size', 'radius'})
        self.assertIn('harness', detail)

    def test_runs_without_database_apps(self):
        self.assertEqual(settings.DATABASES, {})
        self.assertNotIn('django.contrib.auth', settings.INSTALLED_APPS)
        config = load_config(data={})
        self.assertEqual(config.models['segmenter_seeds'], [4, 5])

    def test_errors_reported_together(self):
        with self.assertRaises(ValidationError) as ctx:
            load_config(data={'dataset': {'n': 10, 'image_size': 40}, 'ssim': {'window_size': 8}})
        detail = ctx.exception.detail
        self.assertEqual(set(detail['dataset']), {'n', 'image_size'})
        self.assertIn('window_size', detail['ssim'])

    def test_import_needs_path(self):
        with self.assertRaises(ValidationError) as ctx:
            load_config(data={'dataset': {'source': 'import'}})
        self.assertIn('import_path', ctx.exception.detail['dataset'])
        with self.assertRaises(ValidationError) as ctx:
            load_config(data={'dataset': {'source': 'import', 'import_path': '/nonexistent/data'}})
        self.assertIn('Directory does not exist', str(ctx.exception.detail['dataset']['import_path']))

    def test_cross_field_rules(self):
        with self.assertRaises(ValidationError) as ctx:
            load_config(data={'models': {'arch_a_seed': 3, 'arch_a_replicate_seed': 3}})
        self.assertIn('arch_a_replicate_seed', ctx.exception.detail['models'])
        with self.assertRaises(ValidationError) as ctx:
            load_config(data={'harness': {'randomization_sample': 10, 'threshold_pairs': 10}})
        self.assertIn('randomization_sample', ctx.exception.detail['harness'])
        with self.assertRaises(ValidationError):
            load_config(data={'saliency': {'sg_noise_sigma': 0}})
        with self.assertRaises(ValidationError):
            load_config(data={'saliency': {'methods': []}})

    def test_config_file_errors(self):
        with self.assertRaises(ValidationError) as ctx:
            load_config('/nonexistent/config.json')
        self.assertIn('config', ctx.exception.detail)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'config.json'
            path.write_text('{"dataset": ')
            with self.assertRaisesMessage(ValidationError, 'Invalid JSON'):
                load_config(path)
            path.write_text(json.dumps({'dataset': {'n': 500}}))
            self.assertEqual(load_config(path).dataset['n'], 500)

    def test_not_an_object(self):
        with self.assertRaises(ValidationError):
            load_config(data=[1, 2])


class TestDatasetManifestSerializer(SimpleTestCase):
    def test_valid(self):
        serializer = DatasetManifestSerializer(data=manifest())
        self.assertTrue(serializer.is_valid(), serializer.errors)

    def test_splits(self):
        serializer = DatasetManifestSerializer(data=manifest(splits={TRAIN: ['a'], VAL: ['b']}))
        self.assertFalse(serializer.is_valid())
        self.assertIn('splits', serializer.errors)
        serializer = DatasetManifestSerializer(data=manifest(splits={TRAIN: ['a', 'b'], VAL: ['c'], TEST: ['a']}))
        self.assertFalse(serializer.is_valid())
        self.assertIn('more than once', str(serializer.errors['splits']))

    def test_labels_cover_ids(self):
        serializer = DatasetManifestSerializer(data=manifest(labels={'a': 1, 'b': 0, 'c': 1}))
        self.assertFalse(serializer.is_valid())
        self.assertIn('labels', serializer.errors)

    def test_counts(self):
        data = manifest()
        data['counts'][TEST] = {'positive': 1, 'negative': 0}
        serializer = DatasetManifestSerializer(data=data)
        self.assertFalse(serializer.is_valid())
        self.assertIn('counts', serializer.errors)


class TestModelSidecarSerializer(SimpleTestCase):
    def test_valid(self):
        serializer = ModelSidecarSerializer(data=sidecar())
        self.assertTrue(serializer.is_valid(), serializer.errors)

    def test_history_length(self):
        serializer = ModelSidecarSerializer(data=sidecar(stopped_epoch=4))
        self.assertFalse(serializer.is_valid())
        self.assertIn('auc_history', serializer.errors)

    def test_best_epoch(self):
        serializer = ModelSidecarSerializer(data=sidecar(best_epoch=3))
        self.assertFalse(serializer.is_valid())
        self.assertIn('best_epoch', serializer.errors)

    def test_segmenter_best_epoch_follows_loss(self):
        serializer = ModelSidecarSerializer(data=sidecar(arch='SEGMENTER', best_epoch=3))
        self.assertTrue(serializer.is_valid(), serializer.errors)

    def test_unknown_arch(self):
        serializer = ModelSidecarSerializer(data=sidecar(arch='ARCH_C', extra=1))
        self.assertFalse(serializer.is_valid())
        self.assertEqual(set(serializer.errors), {'arch', 'extra'})
