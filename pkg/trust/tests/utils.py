import numpy as np

from trust.consts import SEGMENTATION, SPLITS, SYNTHETIC, TEST, TRAIN, VAL
from trust.engine import Network, WeightStore, conv2d, dense, globalavgpool, relu
from trust.synth import Dataset, DatasetManifest, Sample, count_classes
from trust.training import TrainedModel


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max())
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def random_weights(network, seed, scale=0.5, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return WeightStore({
        name: rng.normal(0, scale, size=shape).astype(dtype)
        for name, shape in network.parameter_shapes().items()
    })


def two_conv_net(size=8):
    return Network((1, size, size), [
        conv2d('conv1', 1, 3, 3, padding=1),
        relu('relu1'),
        conv2d('conv2', 3, 2, 3, padding=1),
        relu('relu2'),
        globalavgpool('gap'),
        dense('fc', 2, 1, block='logits'),
    ])


def linear_net(size=4):
    return Network((1, size, size), [dense('fc', size * size, 1, block='logits')])


def make_model(network, weights, arch='ARCH_A', seed=0):
    return TrainedModel(arch, network, weights, seed)


def make_dataset(samples, splits, size, flavor=SEGMENTATION):
    labels = {sample.sample_id: sample.label for sample in samples}
    manifest = DatasetManifest(
        flavor=flavor,
        image_size=size,
        splits={name: tuple(splits[name]) for name in SPLITS},
        labels=labels,
        counts=count_classes(labels, splits),
        source=SYNTHETIC,
    )
    return Dataset(tuple(samples), manifest)


def blob_samples(n, size, seed, prefix='s', positive_fraction=0.5, signal=True):
    """
    Noise images; positives carry a bright 4x4 blob (or, with signal=False, random labels only).
    """
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = int(rng.random() < positive_fraction)
        image = 0.2 + 0.05 * rng.standard_normal((size, size))
        mask = np.zeros((size, size), dtype=np.uint8)
        boxes = ()
        if label and signal:
            y, x = rng.integers(0, size - 4, size=2)
            image[y:y + 4, x:x + 4] += 0.5
            mask[y:y + 4, x:x + 4] = 1
            boxes = ((int(x), int(y), 4, 4),)
        elif label:
            mask[0, 0] = 1
            boxes = ((0, 0, 1, 1),)
        samples.append(Sample(f'{prefix}{i:04d}', np.clip(image, 0, 1).astype(np.float32), label, mask, boxes))
    return samples


def blob_dataset(n_train, n_val, seed, signal=True, n_test=20):
    train = blob_samples(n_train, 16, seed, 'tr', signal=signal)
    val = blob_samples(n_val, 16, seed + 1, 'va', signal=signal)
    test = blob_samples(n_test, 16, seed + 2, 'te', signal=signal)
    return make_dataset(
        train + val + test,
        {TRAIN: [s.sample_id for s in train], VAL: [s.sample_id for s in val], TEST: [s.sample_id for s in test]},
        16,
    )
