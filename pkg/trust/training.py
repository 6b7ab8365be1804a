"""
Classifier and segmenter training, inference helpers and model persistence.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from scipy.special import expit

from .consts import (
    ARCH_A, ARCH_B, CLASSIFIER_ARCHS, DICE_SMOOTHING, FOCAL_ALPHA, FOCAL_GAMMA, SEGMENTER, TRAIN, VAL,
)
from .engine import adam_step, backward_weights, bce_loss, forward, infer, init_weights
from .formats import load_weights, save_weights
from .metrics import roc_auc
from .networks import build

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    max_epochs: int = 20
    patience: int = 4
    batch_size: int = 16


@dataclass(frozen=True)
class SegmenterConfig:
    lr: float = 1e-4
    max_epochs: int = 75
    patience: int = 15
    decay_patience: int = 3
    decay_factor: float = 0.1
    batch_size: int = 4
    epoch_size: int = 0


CLASSIFIER_DEFAULTS = {
    ARCH_A: TrainingConfig(lr=1e-4, max_epochs=20, patience=4),
    ARCH_B: TrainingConfig(lr=7e-5, max_epochs=30, patience=5),
}


@dataclass(frozen=True)
class TrainedModel:
    arch: str
    network: object
    weights: object
    seed: int = 0
    auc_history: tuple = ()
    loss_history: tuple = ()
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def fingerprint(self):
        return self.weights.fingerprint()

    def with_weights(self, weights):
        return dataclasses.replace(self, weights=weights)


def _stack(samples):
    return np.stack([sample.image for sample in samples])[:, None].astype(np.float32)


def _labels(samples):
    return np.array([sample.label for sample in samples], dtype=np.float32)


def _require_both_classes(samples, split):
    labels = {sample.label for sample in samples}
    if labels != {0, 1}:
        raise ValidationError(f'The {split} split must contain both classes, found {sorted(labels)}.')


def predict_logits(model, images, batch_size=64):
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    scores = [forward(model.network, model.weights, images[i:i + batch_size])[0]
              for i in range(0, len(images), batch_size)]
    return np.concatenate(scores)


def predict_proba(model, images, batch_size=64):
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    return np.concatenate([infer(model.network, model.weights, images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def classify(model, image):
    return float(predict_proba(model, np.asarray(image)[None])[0])


def segmenter_score(probabilities):
    """
    Mean non-zero cell of the output image (sigmoid x 255, rounded), 0 if there is none.
    """
    quantized = np.round(np.asarray(probabilities, dtype=np.float64) * 255)
    nonzero = quantized[quantized > 0]
    return float(nonzero.mean() / 255) if nonzero.size else 0.0


def model_scores(model, samples):
    """
    Classification scores: probabilities for classifiers, mean non-zero output for the segmenter.
    """
    images = _stack(samples)
    if model.arch == SEGMENTER:
        return np.array([segmenter_score(p) for p in predict_proba(model, images)])
    return predict_proba(model, images)


def evaluate_auc(model, samples):
    return roc_auc(model_scores(model, samples), _labels(samples))


def train_classifier(dataset, arch, seed, lr=1e-4, max_epochs=20, patience=4, batch_size=16):
    """
    Adam on BCE-with-logit; stops when the validation AUC has not improved for
    `patience` epochs and returns the best-validation-AUC weights.
    """
    if arch not in CLASSIFIER_ARCHS:
        raise ValidationError(f'Unknown classifier architecture "{arch}".')
    train, val = dataset.split(TRAIN), dataset.split(VAL)
    _require_both_classes(train, TRAIN)
    _require_both_classes(val, VAL)
    network = build(arch, dataset.manifest.image_size)
    x, y = _stack(train), _labels(train)
    x_val, y_val = _stack(val), _labels(val)
    weights = init_weights(network, seed)
    rng = np.random.default_rng([seed, 2])
    state = None
    best = (-1.0, weights, 0)
    history, losses = [], []
    wait = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(x))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            score, tape = forward(network, weights, x[index])
            batch_losses.append(bce_loss(expit(score), y[index]))
            grads = backward_weights(tape, weights, labels=y[index])
            weights, state = adam_step(weights, grads, state, lr)
        model = TrainedModel(arch, network, weights, seed)
        auc = roc_auc(predict_logits(model, x_val), y_val)
        history.append(auc)
        losses.append(float(np.mean(batch_losses)))
        if auc > best[0]:
            best = (auc, weights, epoch)
            wait = 0
        else:
            wait += 1
        logger.info('%s seed %d epoch %d: loss %.4f, val AUC %.4f (best %.4f @ %d)',
                    arch, seed, epoch, losses[-1], auc, best[0], best[2])
        if wait >= patience:
            logger.info('%s seed %d: early stop after epoch %d', arch, seed, epoch)
            break
    return TrainedModel(arch, network, best[1], seed, tuple(history), tuple(losses), epoch, best[2])


class BalancedSampler:
    """
    Draws positive and negative cases with equal probability.
    """

    def __init__(self, labels, seed):
        labels = np.asarray(labels)
        self.positives = np.flatnonzero(labels == 1)
        self.negatives = np.flatnonzero(labels == 0)
        if not len(self.positives) or not len(self.negatives):
            raise ValidationError('Balanced sampling needs both positive and negative cases.')
        self.rng = np.random.default_rng(seed)

    def draw(self, count):
        positive = self.rng.random(count) < 0.5
        picks = np.where(
            positive,
            self.positives[self.rng.integers(0, len(self.positives), count)],
            self.negatives[self.rng.integers(0, len(self.negatives), count)],
        )
        return picks


def segmentation_loss(logits, targets):
    """
    0.5 * focal + 0.5 * soft Dice, with the gradient with respect to the logits.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    p = expit(z)
    log_p = -np.logaddexp(0, -z)
    log_q = -np.logaddexp(0, z)
    gamma, alpha = FOCAL_GAMMA, FOCAL_ALPHA
    focal = np.where(y > 0, -alpha * (1 - p) ** gamma * log_p, -(1 - alpha) * p ** gamma * log_q)
    focal_grad = np.where(
        y > 0,
        alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p)),
        -(1 - alpha) * p ** gamma * (gamma * (1 - p) * log_q - p),
    ) / z.size

    axes = tuple(range(1, z.ndim))
    intersection = (p * y).sum(axis=axes, keepdims=True)
    denominator = p.sum(axis=axes, keepdims=True) + y.sum(axis=axes, keepdims=True) + DICE_SMOOTHING
    dice = 1 - (2 * intersection + DICE_SMOOTHING) / denominator
    dice_grad = -(2 * y * denominator - (2 * intersection + DICE_SMOOTHING)) / denominator ** 2
    dice_grad = dice_grad * p * (1 - p) / len(z)

    loss = 0.5 * float(focal.mean()) + 0.5 * float(dice.mean())
    return loss, 0.5 * focal_grad + 0.5 * dice_grad


def _segmenter_validation(network, weights, x_val, t_val, batch_size):
    loss, probabilities = 0.0, []
    for start in range(0, len(x_val), batch_size):
        score, _ = forward(network, weights, x_val[start:start + batch_size])
        chunk_loss, _ = segmentation_loss(score, t_val[start:start + batch_size])
        loss += chunk_loss * len(score)
        probabilities.append(expit(score))
    return loss / len(x_val), np.concatenate(probabilities)


def train_segmenter(dataset, seed, lr=1e-4, max_epochs=75, patience=15, decay_patience=3, decay_factor=0.1,
                    batch_size=4, epoch_size=0):
    """
    Encoder-decoder trained on balanced batches with focal+Dice loss; the
    learning rate decays when the validation loss stalls for more than
    `decay_patience` epochs, and the best validation-loss weights are kept.
    """
    train, val = dataset.split(TRAIN), dataset.split(VAL)
    for sample in train + val:
        if sample.label == 1 and not sample.truth(dataset.flavor).any():
            raise ValidationError(f'Positive sample {sample.sample_id} has an empty ground truth.')
    _require_both_classes(val, VAL)
    sampler = BalancedSampler(_labels(train), [seed, 3])
    network = build(SEGMENTER, dataset.manifest.image_size)
    x = _stack(train)
    targets = np.stack([sample.truth(dataset.flavor) for sample in train]).astype(np.float32)
    x_val = _stack(val)
    t_val = np.stack([sample.truth(dataset.flavor) for sample in val]).astype(np.float32)
    y_val = _labels(val)
    weights = init_weights(network, seed)
    state = None
    best = (np.inf, weights, 0)
    history, losses = [], []
    wait = plateau = 0
    epoch = 0
    epoch_size = epoch_size or len(train)
    for epoch in range(1, max_epochs + 1):
        index = sampler.draw(epoch_size)
        for start in range(0, epoch_size, batch_size):
            batch = index[start:start + batch_size]
            score, tape = forward(network, weights, x[batch])
            _, grad = segmentation_loss(score, targets[batch])
            grads = backward_weights(tape, weights, grad_output=grad.astype(np.float32))
            weights, state = adam_step(weights, grads, state, lr)
        val_loss, probabilities = _segmenter_validation(network, weights, x_val, t_val, 16)
        losses.append(val_loss)
        history.append(roc_auc([segmenter_score(p) for p in probabilities], y_val))
        if val_loss < best[0]:
            best = (val_loss, weights, epoch)
            wait = plateau = 0
        else:
            wait += 1
            plateau += 1
        if plateau > decay_patience:
            lr *= decay_factor
            plateau = 0
            logger.info('Segmenter seed %d: learning rate decayed to %.2e', seed, lr)
        logger.info('Segmenter seed %d epoch %d: val loss %.4f, val AUC %.4f (best loss %.4f @ %d)',
                    seed, epoch, val_loss, history[-1], best[0], best[2])
        if wait >= patience:
            logger.info('Segmenter seed %d: early stop after epoch %d', seed, epoch)
            break
    return TrainedModel(SEGMENTER, network, best[1], seed, tuple(history), tuple(losses), epoch, best[2])


def save_model(model, directory, name, config_hash=''):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(model.weights, directory / f'{name}.salw')
    sidecar = {
        'name': name,
        'arch': model.arch,
        'image_size': model.network.input_shape[1],
        'seed': model.seed,
        'auc_history': list(model.auc_history),
        'loss_history': list(model.loss_history),
        'stopped_epoch': model.stopped_epoch,
        'best_epoch': model.best_epoch,
        'fingerprint': model.fingerprint,
        'config_hash': config_hash,
    }
    (directory / f'{name}.json').write_text(json.dumps(sidecar, indent=2, sort_keys=True) + '\n')


def load_model(directory, name, config_hash=None):
    from .serializers import ModelSidecarSerializer

    directory = Path(directory)
    path = directory / f'{name}.json'
    if not path.is_file():
        raise ValidationError(f'{path}: model sidecar is missing.')
    serializer = ModelSidecarSerializer(data=json.loads(path.read_text()))
    serializer.is_valid(raise_exception=True)
    data = serializer.validated_data
    if config_hash is not None and data['config_hash'] != config_hash:
        raise ValidationError(f'{path}: config hash {data["config_hash"]} does not match {config_hash}.')
    network = build(data['arch'], data['image_size'])
    weights = load_weights(directory / f'{name}.salw')
    weights.validate_for(network)
    if weights.fingerprint() != data['fingerprint']:
        raise ValidationError(f'{path}: weight file fingerprint does not match the sidecar.')
    return TrainedModel(
        data['arch'], network, weights, data['seed'], tuple(data['auc_history']), tuple(data['loss_history']),
        data['stopped_epoch'], data['best_epoch'],
    )
