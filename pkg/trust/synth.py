"""
Synthetic chest-radiograph-like datasets with lesion masks and boxes, plus the
directory format used to export and import datasets.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from scipy.ndimage import gaussian_filter

from .consts import DETECTION, DIFFICULTIES, EASY, FLAVORS, IMPORTED, SEGMENTATION, SPLIT_RATIOS, SPLITS, SYNTHETIC, \
    TEST, TRAIN, VAL
from .formats import read_csv, read_pgm, write_csv, write_pgm
from .saliency import SaliencyMap

logger = logging.getLogger(__name__)

LESION_CONTRAST = {
    EASY: 0.30,
    'hard': 0.10,
}


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image: np.ndarray
    label: int
    mask: np.ndarray
    boxes: tuple = ()

    def truth(self, flavor):
        """
        Ground-truth positives: the lesion mask, or the rasterized boxes for the detection flavor.
        """
        if flavor == DETECTION:
            return rasterize_boxes(self.boxes, self.mask.shape)
        return self.mask


@dataclass(frozen=True)
class DatasetManifest:
    flavor: str
    image_size: int
    splits: dict
    labels: dict
    counts: dict
    source: str = SYNTHETIC
    generator: dict = None
    seed: int = None
    config_hash: str = ''

    def to_dict(self):
        return {
            'flavor': self.flavor,
            'image_size': self.image_size,
            'source': self.source,
            'generator': self.generator,
            'seed': self.seed,
            'splits': {name: list(ids) for name, ids in self.splits.items()},
            'labels': dict(self.labels),
            'counts': self.counts,
            'config_hash': self.config_hash,
        }


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    manifest: DatasetManifest
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, '_index', {sample.sample_id: sample for sample in self.samples})

    @property
    def flavor(self):
        return self.manifest.flavor

    def get(self, sample_id):
        return self._index[sample_id]

    def split(self, name):
        return [self._index[sample_id] for sample_id in self.manifest.splits[name]]

    def positives(self, name):
        return [sample for sample in self.split(name) if sample.label == 1]


def count_classes(labels, splits):
    counts = {}
    for name in SPLITS:
        positive = sum(1 for sample_id in splits[name] if labels[sample_id] == 1)
        counts[name] = {'positive': positive, 'negative': len(splits[name]) - positive}
    return counts


def split_sizes(n):
    train = int(round(n * SPLIT_RATIOS[TRAIN]))
    val = int(round(n * SPLIT_RATIOS[VAL]))
    return {TRAIN: train, VAL: val, TEST: n - train - val}


def rasterize_boxes(boxes, shape):
    raster = np.zeros(shape, dtype=np.uint8)
    for x, y, w, h in boxes:
        raster[y:y + h, x:x + w] = 1
    return raster


def average_mask(samples, flavor=SEGMENTATION):
    """
    Pixelwise mean of the positive ground truths, used as a constant map for every test image.
    """
    truths = [sample.truth(flavor) for sample in samples if sample.label == 1]
    if not truths:
        raise ValidationError('Average mask needs at least one positive sample.')
    values = np.mean(np.stack(truths).astype(np.float64), axis=0)
    return SaliencyMap(values.astype(np.float32), 'AVG', '', '*')


def _smooth_noise(rng, size, sigma):
    noise = gaussian_filter(rng.normal(size=(size, size)), sigma=sigma, mode='wrap')
    return noise / (np.abs(noise).max() + 1e-12)


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    period = rng.uniform(0.12, 0.18)
    bend = rng.uniform(0.5, 1.5) * 0.15 * (xx - 0.5) ** 2
    ribs = 0.5 * (1 + np.sin(2 * np.pi * (yy + bend) / period + rng.uniform(0, 2 * np.pi)))
    body = np.exp(-(((xx - 0.5) / 0.45) ** 4 + ((yy - 0.5) / 0.5) ** 4))
    return 0.30 + 0.10 * _smooth_noise(rng, size, size / 8) + 0.06 * ribs + 0.12 * body


def _lesion(rng, size, flavor, max_area):
    if flavor == DETECTION:
        radii = rng.uniform(0.10, 0.18, size=2) * size
    else:
        radii = np.array([rng.uniform(0.06, 0.14), rng.uniform(0.04, 0.12)]) * size
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    angle = rng.uniform(0, np.pi)
    wobble = _smooth_noise(rng, size, size / 16)
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    while True:
        distance = np.sqrt((u / radii[0]) ** 2 + (v / radii[1]) ** 2)
        support = distance < 1 + 0.35 * wobble
        support[int(cy), int(cx)] = True
        if support.sum() <= max_area:
            return support, distance
        radii = radii * 0.8


def _box(support):
    ys, xs = np.nonzero(support)
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def render_sample(index, label, seed, size=64, difficulty=EASY, flavor=SEGMENTATION, max_lesion_fraction=0.25):
    rng = np.random.default_rng([seed, 1, index])
    image = _background(rng, size)
    mask = np.zeros((size, size), dtype=bool)
    boxes = []
    if label == 1:
        max_area = max(1, int(max_lesion_fraction * size * size))
        for _ in range(int(rng.integers(1, 3))):
            support, distance = _lesion(rng, size, flavor, max_area)
            if (mask | support).sum() > max_area:
                continue
            profile = 0.7 + 0.3 * np.clip(1 - distance, 0, 1)
            image = image + np.where(support & ~mask, LESION_CONTRAST[difficulty] * profile, 0)
            mask |= support
            boxes.append(_box(support))
    image = np.clip(image, 0, 1)
    image = np.round(image * 255).astype(np.uint8).astype(np.float32) / np.float32(255)
    return Sample(f'{index:05d}', image, int(label), mask.astype(np.uint8), tuple(boxes))


def generate(n, positive_fraction, seed, difficulty=EASY, flavor=SEGMENTATION, size=64, max_lesion_fraction=0.25):
    """
    Deterministic dataset: labels and 81:9:10 splits are stratified so every
    split carries the target positive fraction.
    """
    if n < 100:
        raise ValidationError(f'Dataset size must be at least 100, got {n}.')
    if not 0 < positive_fraction < 1:
        raise ValidationError(f'positive_fraction must lie strictly between 0 and 1, got {positive_fraction}.')
    if difficulty not in dict(DIFFICULTIES):
        raise ValidationError(f'Unknown difficulty "{difficulty}".')
    if flavor not in dict(FLAVORS):
        raise ValidationError(f'Unknown flavor "{flavor}".')
    if not 0 < max_lesion_fraction <= 1:
        raise ValidationError(f'max_lesion_fraction must lie in (0, 1], got {max_lesion_fraction}.')

    sizes = split_sizes(n)
    n_pos = int(round(n * positive_fraction))
    slots = []
    remaining = n_pos
    for name in SPLITS:
        if name == TEST:
            positive = remaining
        else:
            positive = int(round(sizes[name] * n_pos / n))
            remaining -= positive
        slots += [(name, 1)] * positive + [(name, 0)] * (sizes[name] - positive)
    order = np.random.default_rng([seed, 0]).permutation(n)

    samples = []
    splits = {name: [] for name in SPLITS}
    labels = {}
    for index in range(n):
        name, label = slots[order[index]]
        sample = render_sample(index, label, seed, size, difficulty, flavor, max_lesion_fraction)
        samples.append(sample)
        splits[name].append(sample.sample_id)
        labels[sample.sample_id] = label
    manifest = DatasetManifest(
        flavor=flavor,
        image_size=size,
        splits=splits,
        labels=labels,
        counts=count_classes(labels, splits),
        generator={
            'n': n, 'positive_fraction': positive_fraction, 'difficulty': difficulty,
            'max_lesion_fraction': max_lesion_fraction,
        },
        seed=seed,
    )
    logger.info('Generated %d samples (%d positive, %s flavor, seed %d)', n, n_pos, flavor, seed)
    return Dataset(tuple(samples), manifest)


def export_dataset(dataset, directory, config_hash=''):
    directory = Path(directory)
    (directory / 'images').mkdir(parents=True, exist_ok=True)
    (directory / 'masks').mkdir(parents=True, exist_ok=True)
    rows = []
    for sample in dataset.samples:
        write_pgm(directory / 'images' / f'{sample.sample_id}.pgm', np.round(sample.image * 255).astype(np.uint8))
        write_pgm(directory / 'masks' / f'{sample.sample_id}.pgm', sample.mask.astype(np.uint8) * 255)
        rows += [(sample.sample_id, *box) for box in sample.boxes]
    write_csv(directory / 'boxes.csv', ('sample_id', 'x', 'y', 'w', 'h'), rows)
    manifest = dataset.manifest.to_dict()
    manifest['config_hash'] = config_hash
    (directory / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    logger.info('Exported %d samples to %s', len(dataset.samples), directory)


def import_dataset(directory):
    """
    Loads and validates a dataset directory; every file violation is reported
    together, keyed by file path.
    """
    from .serializers import DatasetManifestSerializer

    directory = Path(directory)
    manifest_path = directory / 'manifest.json'
    if not manifest_path.is_file():
        raise ValidationError({str(manifest_path): ['Manifest file is missing.']})
    try:
        raw = json.loads(manifest_path.read_text())
    except ValueError as exc:
        raise ValidationError({str(manifest_path): [f'Invalid JSON: {exc}.']})
    serializer = DatasetManifestSerializer(data=raw)
    serializer.is_valid(raise_exception=True)
    data = serializer.validated_data

    boxes = {}
    boxes_path = directory / 'boxes.csv'
    errors = {}
    if boxes_path.is_file():
        for row in read_csv(boxes_path):
            try:
                box = tuple(int(row[key]) for key in ('x', 'y', 'w', 'h'))
            except (KeyError, TypeError, ValueError):
                errors.setdefault(str(boxes_path), []).append(f'Malformed row: {row}.')
                continue
            boxes.setdefault(row['sample_id'], []).append(box)

    size = data['image_size']
    samples = []
    for name in SPLITS:
        for sample_id in data['splits'][name]:
            image_path = directory / 'images' / f'{sample_id}.pgm'
            mask_path = directory / 'masks' / f'{sample_id}.pgm'
            try:
                image = read_pgm(image_path)
                mask = read_pgm(mask_path)
            except ValidationError as exc:
                errors.setdefault(str(directory / sample_id), []).extend(exc.messages)
                continue
            problems = _sample_problems(image, mask, boxes.get(sample_id, []), data['labels'][sample_id], size)
            if problems:
                errors.setdefault(str(image_path), []).extend(problems)
                continue
            samples.append(Sample(
                sample_id,
                image.astype(np.float32) / np.float32(255),
                data['labels'][sample_id],
                (mask > 0).astype(np.uint8),
                tuple(boxes.get(sample_id, [])),
            ))
    if errors:
        raise ValidationError(errors)

    manifest = DatasetManifest(
        flavor=data['flavor'],
        image_size=size,
        splits={name: tuple(ids) for name, ids in data['splits'].items()},
        labels=dict(data['labels']),
        counts=data['counts'],
        source=data.get('source') or IMPORTED,
        generator=data.get('generator'),
        seed=data.get('seed'),
        config_hash=data.get('config_hash', ''),
    )
    _check_split_ratios(manifest)
    logger.info('Imported %d samples from %s', len(samples), directory)
    return Dataset(tuple(samples), manifest)


def _sample_problems(image, mask, boxes, label, size):
    problems = []
    if image.shape != (size, size):
        problems.append(f'Image shape {image.shape} differs from the manifest image size ({size}, {size}).')
    if mask.shape != image.shape:
        problems.append(f'Mask shape {mask.shape} differs from image shape {image.shape}.')
        return problems
    if not set(np.unique(mask)) <= {0, 255}:
        problems.append('Mask values must be 0 or 255.')
    if bool(mask.any()) != (label == 1):
        problems.append(f'Label {label} disagrees with mask (nonempty: {bool(mask.any())}).')
    if bool(boxes) != (label == 1):
        problems.append(f'Label {label} disagrees with box list ({len(boxes)} boxes).')
    for x, y, w, h in boxes:
        if x < 0 or y < 0 or w < 1 or h < 1 or x + w > image.shape[1] or y + h > image.shape[0]:
            problems.append(f'Box {(x, y, w, h)} lies outside the image.')
    return problems


def _check_split_ratios(manifest):
    n = sum(len(ids) for ids in manifest.splits.values())
    expected = split_sizes(n)
    for name in SPLITS:
        if abs(len(manifest.splits[name]) - expected[name]) > 1:
            logger.warning(
                'Split %s holds %d samples, the 81:9:10 discipline expects %d', name, len(manifest.splits[name]),
                expected[name],
            )
