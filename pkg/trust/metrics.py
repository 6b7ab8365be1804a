"""
Pixel-level precision-recall (AUPRC), windowed SSIM and ROC-AUC.

Metric accumulation is done in float64.
"""
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy.signal import convolve2d
from sklearn.metrics import roc_auc_score

from .consts import PR_THRESHOLD_CAP


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def __len__(self):
        return len(self.thresholds)

    def rows(self):
        return [(float(t), float(p), float(r)) for t, p, r in zip(self.thresholds, self.precision, self.recall)]


@dataclass(frozen=True)
class SSIMConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0


def pr_curve(saliency, truth, cap=PR_THRESHOLD_CAP):
    """
    Treats every pixel as a binary classifier output and sweeps thresholds over
    the unique map values, highest first; ties share a point.
    """
    scores = np.asarray(saliency, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape:
        raise ValidationError(f'Map shape {scores.shape} does not match truth shape {truth.shape}.')
    scores = scores.ravel()
    positives = truth.ravel() > 0
    total_positive = int(positives.sum())
    if total_positive == 0:
        raise ValidationError('Ground truth has no positive pixel; AUPRC is undefined.')

    order = np.argsort(-scores, kind='stable')
    sorted_scores = scores[order]
    true_positive = np.cumsum(positives[order])
    thresholds = np.unique(sorted_scores)[::-1]
    if len(thresholds) > cap:
        ascending = np.sort(scores)
        picks = np.round(np.linspace(0, len(ascending) - 1, cap)).astype(int)
        thresholds = np.unique(ascending[picks])[::-1]

    # number of pixels with score >= t, for each threshold t
    predicted = np.searchsorted(-sorted_scores, -thresholds, side='right')
    tp = true_positive[predicted - 1]
    return PRCurve(thresholds, tp / predicted, tp / total_positive)


def auprc(curve):
    """
    Average precision: sum of (R_k - R_{k-1}) * P_k over the sweep.
    """
    recall = np.concatenate([[0.0], curve.recall])
    return float(np.sum(np.diff(recall) * curve.precision))


def gaussian_window(size, sigma):
    m = (size - 1) / 2.0
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    window = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return window / window.sum()


def normalize(values):
    """
    Min-max scales to [0, 1]; constant maps become 0.5 everywhere.
    """
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high == low:
        return np.full(values.shape, 0.5)
    return (values - low) / (high - low)


def ssim(a, b, cfg=None):
    cfg = cfg or SSIMConfig()
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f'SSIM needs equal shapes, got {a.shape} and {b.shape}.')
    if a.ndim != 2 or min(a.shape) < cfg.window_size:
        raise ValidationError(f'SSIM needs 2-D maps of at least {cfg.window_size}x{cfg.window_size}, got {a.shape}.')
    a = normalize(a)
    b = normalize(b)
    window = gaussian_window(cfg.window_size, cfg.sigma)
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2

    def filt(x):
        return convolve2d(x, window, mode='valid')

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def roc_auc(scores, labels):
    """
    Mann-Whitney AUC: probability a random positive outranks a random negative, ties count 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValidationError(f'{scores.size} scores for {labels.size} labels.')
    if set(np.unique(labels).tolist()) != {0, 1}:
        raise ValidationError('ROC-AUC needs both classes.')
    return float(roc_auc_score(labels, scores))
