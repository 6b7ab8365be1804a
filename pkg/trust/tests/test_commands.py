import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from trust.cli import cli_run
from trust.consts import BASE_LABELS, DETECTION, TEST, TRAIN, VAL
from trust.management.commands import gen_data
from trust.management.commands._base import format_errors
from trust.metrics import auprc, pr_curve
from trust.report import verify_report
from trust.synth import average_mask, import_dataset

TINY_CONFIG = {
    'dataset': {'n': 250, 'positive_fraction': 0.85, 'seed': 3, 'image_size': 16},
    'models': {
        'arch_a': {'lr': 0.003, 'max_epochs': 1, 'patience': 1},
        'arch_b': {'lr': 0.003, 'max_epochs': 1, 'patience': 1},
        'segmenter': {'lr': 0.001, 'max_epochs': 1, 'patience': 1, 'epoch_size': 40},
    },
    'saliency': {'ig_steps': 3, 'sg_samples': 2, 'xrai_segment_count': 6},
    'harness': {'bootstrap_resamples': 100, 'randomization_sample': 10, 'threshold_pairs': 5},
}
ARTIFACTS = ('report.json', 'report.txt', 'utility.csv', 'repeatability.csv', 'reproducibility.csv',
             'traces/GRAD.csv', 'utility.svg', 'repeatability.svg', 'reproducibility.svg')


def run(*argv):
    stdout, stderr = StringIO(), StringIO()
    code = cli_run(list(argv), stdout=stdout, stderr=stderr)
    return code, stdout.getvalue(), stderr.getvalue()


class TestFormatErrors(SimpleTestCase):
    def test_nested(self):
        detail = {'dataset': {'n': ['Too small.'], 'flavor': ['Bad.', 'Worse.']}, 'config': 'Missing.'}
        self.assertEqual(format_errors(detail), [
            'dataset.n: Too small.', 'dataset.flavor: Bad.', 'dataset.flavor: Worse.', 'config: Missing.',
        ])
        self.assertEqual(format_errors(['a', 'b']), ['a', 'b'])


class TestUsage(SimpleTestCase):
    def test_no_subcommand(self):
        code, _, err = run()
        self.assertEqual(code, 1)
        self.assertIn('usage:', err)

    def test_unknown_subcommand(self):
        code, _, err = run('explain')
        self.assertEqual(code, 1)
        self.assertIn('Unknown subcommand "explain"', err)

    def test_unknown_flag(self):
        code, _, err = run('audit', '--bogus')
        self.assertEqual(code, 1)
        self.assertIn('--bogus', err)

    def test_bad_flag_value(self):
        self.assertEqual(run('train', '--seed', 'seven')[0], 1)


class TestValidationErrors(SimpleTestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp)

    def write_config(self, data):
        path = self.tmp / 'config.json'
        path.write_text(json.dumps(data))
        return str(path)

    def test_import_without_path(self):
        config = self.write_config({'dataset': {'source': 'import'}})
        code, _, err = run('gen-data', '--config', config, '--out', str(self.tmp / 'out'))
        self.assertEqual(code, 1)
        self.assertIn('dataset.import_path', err)

    def test_missing_config(self):
        code, _, err = run('audit', '--config', str(self.tmp / 'none.json'), '--out', str(self.tmp / 'out'))
        self.assertEqual(code, 1)
        self.assertIn('config:', err)

    def test_stage_needs_previous_stage(self):
        config = self.write_config(TINY_CONFIG)
        code, _, err = run('train', '--config', config, '--out', str(self.tmp / 'out'))
        self.assertEqual(code, 1)
        self.assertIn('run gen-data first', err)

    def test_bad_workers(self):
        config = self.write_config(TINY_CONFIG)
        with self.assertRaisesMessage(CommandError, '--workers must be >= 1'):
            call_command('gen_data', config=config, out=str(self.tmp / 'out'), workers=-1, stdout=StringIO())

    def test_internal_error(self):
        config = self.write_config(TINY_CONFIG)

        def broken(config, out, workers):
            raise RuntimeError('boom')

        with mock.patch.object(gen_data.Command, 'stage', staticmethod(broken)):
            with self.assertLogs('trust.cli', 'ERROR'):
                code, _, _ = run('gen-data', '--config', config, '--out', str(self.tmp / 'out'))
        self.assertEqual(code, 2)


class TestPipeline(SimpleTestCase):
    """
    Runs the whole pipeline on a tiny configuration: once in one go, once more
    in one go and once stage by stage.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.config = cls.tmp / 'tiny.json'
        cls.config.write_text(json.dumps(TINY_CONFIG))
        cls.audit_dir = cls.tmp / 'audit'
        cls.results = run('audit', '--config', str(cls.config), '--out', str(cls.audit_dir), '--workers', '1')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)
        super().tearDownClass()

    def test_audit_succeeds(self):
        code, out, err = self.results
        self.assertEqual(code, 0, err)
        self.assertIn('Verdicts:', out)
        data = json.loads((self.audit_dir / 'report.json').read_text())
        verify_report(data)
        self.assertEqual(len(data['grid']), 8)
        self.assertEqual(data['utility']['image_ids'], data['repeatability']['image_ids'])
        names = [model['name'] for model in data['models']]
        self.assertEqual(names[:5], ['arch_a_1', 'arch_a_2', 'arch_b', 'segmenter_1', 'segmenter_2'])

    def test_artifacts(self):
        for name in ('data/manifest.json', 'models/arch_a_1.salw', 'models/segmenter_2.json', 'maps/index.json',
                     'traces/GGCAM.svg') + ARTIFACTS:
            self.assertTrue((self.audit_dir / name).is_file(), name)
        image_id = json.loads((self.audit_dir / 'maps' / 'index.json').read_text())['image_ids'][0]
        self.assertTrue((self.audit_dir / 'maps' / f'arch_b_XRAI_{image_id}.salf').is_file())
        self.assertTrue((self.audit_dir / 'maps' / f'segmenter_1_SEG_{image_id}.pgm').is_file())
        self.assertTrue((self.audit_dir / 'pr' / f'GRAD_{image_id}.csv').is_file())

    def test_audit_is_reproducible(self):
        again = self.tmp / 'again'
        code, _, err = run('audit', '--config', str(self.config), '--out', str(again), '--workers', '1')
        self.assertEqual(code, 0, err)
        for name in ARTIFACTS:
            self.assertEqual((again / name).read_bytes(), (self.audit_dir / name).read_bytes(), name)

    def test_stages_match_audit(self):
        staged = self.tmp / 'staged'
        for stage in ('gen-data', 'train', 'maps', 'report'):
            code, _, err = run(stage, '--config', str(self.config), '--out', str(staged), '--workers', '1')
            self.assertEqual(code, 0, f'{stage}: {err}')
        for name in ARTIFACTS:
            self.assertEqual((staged / name).read_bytes(), (self.audit_dir / name).read_bytes(), name)

    def test_report_refuses_other_config(self):
        code, _, err = run('report', '--config', str(self.config), '--out', str(self.audit_dir), '--seed', '99')
        self.assertEqual(code, 1)
        self.assertIn('config hash', err)


class TestDetectionPipeline(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        config = json.loads(json.dumps(TINY_CONFIG))
        config['dataset']['flavor'] = DETECTION
        path = cls.tmp / 'detection.json'
        path.write_text(json.dumps(config))
        cls.out = cls.tmp / 'audit'
        cls.results = run('audit', '--config', str(path), '--out', str(cls.out), '--workers', '1')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)
        super().tearDownClass()

    def test_audit_succeeds(self):
        code, _, err = self.results
        self.assertEqual(code, 0, err)
        data = json.loads((self.out / 'report.json').read_text())
        verify_report(data)
        self.assertEqual(data['flavor'], DETECTION)
        self.assertEqual(data['base_label'], BASE_LABELS[DETECTION])
        self.assertIn(BASE_LABELS[DETECTION], (self.out / 'report.txt').read_text())

    def test_utility_scored_against_boxes(self):
        dataset = import_dataset(self.out / 'data')
        self.assertEqual(dataset.flavor, DETECTION)
        data = json.loads((self.out / 'report.json').read_text())
        image_ids = data['utility']['image_ids']
        truths = [dataset.get(image_id).truth(DETECTION) for image_id in image_ids]
        avg = average_mask(dataset.split(TRAIN) + dataset.split(VAL), DETECTION)
        expected = [auprc(pr_curve(avg.values, truth)) for truth in truths]
        self.assertEqual(len(image_ids), len(dataset.positives(TEST)))
        for stored, value in zip(data['utility']['avg_mask']['auprc'], expected):
            self.assertAlmostEqual(stored, value)
