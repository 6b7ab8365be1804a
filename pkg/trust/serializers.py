import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

from rest_framework import serializers
from rest_framework.exceptions import ValidationError

from .consts import (
    ARCH_A, ARCH_B, ARCHITECTURES, CLASSIFIER_ARCHS, DATASET_SOURCES, DEFAULT_POSITIVE_FRACTIONS, DIFFICULTIES, EASY,
    FLAVORS, IMPORTED, METHODS, RANDOMIZATION_STDDEV, SEGMENTATION, SPLITS, SYNTHETIC,
)
from .harness import HarnessConfig
from .metrics import SSIMConfig
from .saliency import SaliencyConfig
from .training import CLASSIFIER_DEFAULTS, SegmenterConfig, TrainingConfig


class StrictSerializer(serializers.Serializer):
    """
    Rejects unknown keys next to the field errors, and lets a nested section
    left out of its parent fall back to the field defaults.
    """

    def validate_empty_values(self, data):
        if data is serializers.empty and self.parent is not None:
            data = {}
        return super().validate_empty_values(data)

    def to_internal_value(self, data):
        if not isinstance(data, Mapping):
            return super().to_internal_value(data)
        unknown = {key: ['Unexpected field.'] for key in sorted(set(data) - set(self.fields))}
        try:
            ret = super().to_internal_value(data)
        except ValidationError as exc:
            raise ValidationError({**exc.detail, **unknown})
        if unknown:
            raise ValidationError(unknown)
        return ret


class DatasetConfigSerializer(StrictSerializer):
    source = serializers.ChoiceField(choices=DATASET_SOURCES, default=SYNTHETIC)
    import_path = serializers.CharField(allow_blank=True, default='')
    n = serializers.IntegerField(min_value=100, default=2000)
    positive_fraction = serializers.FloatField(min_value=0, max_value=1, allow_null=True, default=None)
    seed = serializers.IntegerField(min_value=0, default=0)
    difficulty = serializers.ChoiceField(choices=DIFFICULTIES, default=EASY)
    flavor = serializers.ChoiceField(choices=FLAVORS, default=SEGMENTATION)
    image_size = serializers.IntegerField(min_value=16, default=64)
    max_lesion_fraction = serializers.FloatField(min_value=0, max_value=1, default=0.25)

    def validate_positive_fraction(self, value):
        if value is not None and not 0 < value < 1:
            raise ValidationError('Must lie strictly between 0 and 1.')
        return value

    def validate_image_size(self, value):
        if value % 16:
            raise ValidationError('Must be a multiple of 16.')
        return value

    def validate(self, attrs):
        if attrs['positive_fraction'] is None:
            attrs['positive_fraction'] = DEFAULT_POSITIVE_FRACTIONS[attrs['flavor']]
        if attrs['source'] == IMPORTED:
            if not attrs['import_path']:
                raise ValidationError({'import_path': ['This field is required when source is "import".']})
            if not Path(attrs['import_path']).is_dir():
                raise ValidationError({'import_path': [f'Directory does not exist: {attrs["import_path"]}.']})
        return attrs


def _training_section(arch):
    defaults = CLASSIFIER_DEFAULTS[arch]

    class ClassifierTrainingSerializer(StrictSerializer):
        lr = serializers.FloatField(min_value=0, default=defaults.lr)
        max_epochs = serializers.IntegerField(min_value=1, default=defaults.max_epochs)
        patience = serializers.IntegerField(min_value=1, default=defaults.patience)
        batch_size = serializers.IntegerField(min_value=1, default=defaults.batch_size)

    return ClassifierTrainingSerializer


class SegmenterTrainingSerializer(StrictSerializer):
    lr = serializers.FloatField(min_value=0, default=SegmenterConfig.lr)
    max_epochs = serializers.IntegerField(min_value=1, default=SegmenterConfig.max_epochs)
    patience = serializers.IntegerField(min_value=1, default=SegmenterConfig.patience)
    decay_patience = serializers.IntegerField(min_value=0, default=SegmenterConfig.decay_patience)
    decay_factor = serializers.FloatField(min_value=0, max_value=1, default=SegmenterConfig.decay_factor)
    batch_size = serializers.IntegerField(min_value=1, default=SegmenterConfig.batch_size)
    epoch_size = serializers.IntegerField(min_value=0, default=SegmenterConfig.epoch_size)


class ModelsConfigSerializer(StrictSerializer):
    arch_a_seed = serializers.IntegerField(min_value=0, default=1)
    arch_a_replicate_seed = serializers.IntegerField(min_value=0, default=2)
    arch_b_seed = serializers.IntegerField(min_value=0, default=3)
    segmenter_seeds = serializers.ListField(
        child=serializers.IntegerField(min_value=0), min_length=2, max_length=2, default=[4, 5]
    )
    arch_a = _training_section(ARCH_A)()
    arch_b = _training_section(ARCH_B)()
    segmenter = SegmenterTrainingSerializer()

    def validate(self, attrs):
        if attrs['arch_a_seed'] == attrs['arch_a_replicate_seed']:
            raise ValidationError({'arch_a_replicate_seed': ['Replicates need different seeds.']})
        if attrs['segmenter_seeds'][0] == attrs['segmenter_seeds'][1]:
            raise ValidationError({'segmenter_seeds': ['Replicates need different seeds.']})
        return attrs


class SaliencyConfigSerializer(StrictSerializer):
    methods = serializers.ListField(child=serializers.ChoiceField(choices=METHODS), default=list(METHODS))
    ig_steps = serializers.IntegerField(min_value=1, default=SaliencyConfig.ig_steps)
    sg_samples = serializers.IntegerField(min_value=1, default=SaliencyConfig.sg_samples)
    sg_noise_sigma = serializers.FloatField(min_value=0, max_value=1, default=SaliencyConfig.sg_noise_sigma)
    seed = serializers.IntegerField(min_value=0, default=SaliencyConfig.seed)
    gradcam_layer = serializers.CharField(allow_blank=True, default='')
    xrai_segment_count = serializers.IntegerField(min_value=2, default=SaliencyConfig.xrai_segment_count)
    batch_size = serializers.IntegerField(min_value=1, default=SaliencyConfig.batch_size)

    def validate_sg_noise_sigma(self, value):
        if not 0 < value < 1:
            raise ValidationError('Must lie strictly between 0 and 1.')
        return value

    def validate_methods(self, value):
        if not value:
            raise ValidationError('At least one method is required.')
        return [method for method in METHODS if method in value]


class SSIMConfigSerializer(StrictSerializer):
    window_size = serializers.IntegerField(min_value=3, default=SSIMConfig.window_size)
    sigma = serializers.FloatField(min_value=0, default=SSIMConfig.sigma)
    k1 = serializers.FloatField(min_value=0, default=SSIMConfig.k1)
    k2 = serializers.FloatField(min_value=0, default=SSIMConfig.k2)
    dynamic_range = serializers.FloatField(min_value=0, default=SSIMConfig.dynamic_range)

    def validate_window_size(self, value):
        if value % 2 == 0:
            raise ValidationError('Must be odd.')
        return value


class HarnessConfigSerializer(StrictSerializer):
    bootstrap_resamples = serializers.IntegerField(min_value=100, default=HarnessConfig.bootstrap_resamples)
    bootstrap_seed = serializers.IntegerField(min_value=0, default=HarnessConfig.bootstrap_seed)
    randomization_seed = serializers.IntegerField(min_value=0, default=HarnessConfig.randomization_seed)
    randomization_sample = serializers.IntegerField(min_value=2, default=HarnessConfig.randomization_sample)
    randomization_stddev = serializers.FloatField(min_value=0, default=RANDOMIZATION_STDDEV)
    sample_seed = serializers.IntegerField(min_value=0, default=HarnessConfig.sample_seed)
    threshold_pairs = serializers.IntegerField(min_value=1, default=HarnessConfig.threshold_pairs)
    threshold_seed = serializers.IntegerField(min_value=0, default=HarnessConfig.threshold_seed)

    def validate(self, attrs):
        if attrs['randomization_stddev'] <= 0:
            raise ValidationError({'randomization_stddev': ['Must be positive.']})
        if attrs['randomization_sample'] < attrs['threshold_pairs'] + 1:
            raise ValidationError({'randomization_sample': [
                f'Must exceed threshold_pairs ({attrs["threshold_pairs"]}) so the pairs can be drawn.'
            ]})
        return attrs


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    models: dict
    saliency: SaliencyConfig
    methods: tuple
    ssim: SSIMConfig
    harness: HarnessConfig
    data: dict

    @property
    def hash(self):
        canonical = json.dumps(self.data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def classifier_training(self, arch):
        return TrainingConfig(**self.models['arch_a' if arch == ARCH_A else 'arch_b'])

    @property
    def segmenter_training(self):
        return SegmenterConfig(**self.models['segmenter'])


class ExperimentConfigSerializer(StrictSerializer):
    dataset = DatasetConfigSerializer()
    models = ModelsConfigSerializer()
    saliency = SaliencyConfigSerializer()
    ssim = SSIMConfigSerializer()
    harness = HarnessConfigSerializer()

    def create(self, validated_data):
        data = json.loads(json.dumps(validated_data))
        saliency = dict(data['saliency'])
        methods = tuple(saliency.pop('methods'))
        return ExperimentConfig(
            dataset=data['dataset'],
            models=data['models'],
            saliency=SaliencyConfig(**saliency),
            methods=methods,
            ssim=SSIMConfig(**data['ssim']),
            harness=HarnessConfig(**data['harness']),
            data=data,
        )


def load_config(path=None, data=None, seed=None):
    """
    Validates a JSON config file (or an already parsed dict) into an ExperimentConfig.
    """
    if data is None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError({'config': [f'Config file does not exist: {path}.']})
        try:
            data = json.loads(path.read_text())
        except ValueError as exc:
            raise ValidationError({'config': [f'Invalid JSON in {path}: {exc}.']})
    if seed is not None and isinstance(data, Mapping):
        data = dict(data)
        data['dataset'] = {**data.get('dataset', {}), 'seed': seed}
    serializer = ExperimentConfigSerializer(data=data)
    serializer.is_valid(raise_exception=True)
    return serializer.save()


class DatasetManifestSerializer(StrictSerializer):
    flavor = serializers.ChoiceField(choices=FLAVORS)
    image_size = serializers.IntegerField(min_value=1)
    source = serializers.ChoiceField(choices=DATASET_SOURCES, default=IMPORTED)
    generator = serializers.DictField(allow_null=True, default=None)
    seed = serializers.IntegerField(allow_null=True, default=None)
    splits = serializers.DictField(child=serializers.ListField(child=serializers.CharField()))
    labels = serializers.DictField(child=serializers.IntegerField(min_value=0, max_value=1))
    counts = serializers.DictField(child=serializers.DictField(child=serializers.IntegerField(min_value=0)))
    config_hash = serializers.CharField(allow_blank=True, default='')

    def validate_splits(self, value):
        if set(value) != set(SPLITS):
            raise ValidationError(f'Expected exactly the splits {", ".join(SPLITS)}.')
        ids = [sample_id for name in SPLITS for sample_id in value[name]]
        if len(ids) != len(set(ids)):
            raise ValidationError('A sample id appears more than once across splits.')
        return value

    def validate(self, attrs):
        ids = {sample_id for name in SPLITS for sample_id in attrs['splits'][name]}
        if set(attrs['labels']) != ids:
            raise ValidationError({'labels': ['Labels must cover exactly the sample ids listed in splits.']})
        recomputed = {}
        for name in SPLITS:
            positive = sum(attrs['labels'][sample_id] for sample_id in attrs['splits'][name])
            recomputed[name] = {'positive': positive, 'negative': len(attrs['splits'][name]) - positive}
        stored = {name: dict(attrs['counts'].get(name, {})) for name in SPLITS}
        if stored != recomputed:
            raise ValidationError({'counts': [f'Stored counts {stored} differ from recomputed counts {recomputed}.']})
        return attrs


class ModelSidecarSerializer(StrictSerializer):
    name = serializers.CharField()
    arch = serializers.ChoiceField(choices=ARCHITECTURES)
    image_size = serializers.IntegerField(min_value=16)
    seed = serializers.IntegerField(min_value=0)
    auc_history = serializers.ListField(child=serializers.FloatField(min_value=0, max_value=1))
    loss_history = serializers.ListField(child=serializers.FloatField())
    stopped_epoch = serializers.IntegerField(min_value=0)
    best_epoch = serializers.IntegerField(min_value=0)
    fingerprint = serializers.CharField()
    config_hash = serializers.CharField(allow_blank=True, default='')

    def validate(self, attrs):
        history = attrs['auc_history']
        if len(history) != attrs['stopped_epoch']:
            raise ValidationError({'auc_history': [
                f'Holds {len(history)} epochs, the model stopped after {attrs["stopped_epoch"]}.'
            ]})
        if attrs['arch'] in CLASSIFIER_ARCHS and history:
            best = attrs['best_epoch']
            if not 1 <= best <= len(history) or history[best - 1] != max(history):
                raise ValidationError({'best_epoch': ['Best epoch must hold the maximum validation AUC.']})
        return attrs
