"""
The four trustworthiness tests: localization utility, cascading weight
randomization, repeatability and reproducibility.
"""
import itertools
import logging
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from .consts import LOW_SSIM_BASELINE, RANDOMIZATION_STDDEV
from .engine import randomize_block
from .metrics import SSIMConfig, auprc, pr_curve, roc_auc, ssim
from .saliency import SaliencyConfig, compute_maps
from .training import predict_proba

logger = logging.getLogger(__name__)

MIN_BOOTSTRAP_PAIRS = 20


@dataclass(frozen=True)
class HarnessConfig:
    bootstrap_resamples: int = 10000
    bootstrap_seed: int = 0
    randomization_seed: int = 0
    randomization_sample: int = 64
    randomization_stddev: float = RANDOMIZATION_STDDEV
    sample_seed: int = 0
    threshold_pairs: int = 50
    threshold_seed: int = 0


@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    ci_low: float
    ci_high: float
    better: bool
    n: int

    def to_dict(self):
        return {'mean': self.mean, 'ci_low': self.ci_low, 'ci_high': self.ci_high, 'better': self.better, 'n': self.n}


def paired_bootstrap(diffs, n_resamples=10000, seed=0):
    """
    `better` holds when the 95% percentile bootstrap CI of the mean paired
    difference lies strictly above zero.
    """
    diffs = np.asarray(diffs, dtype=np.float64).ravel()
    if len(diffs) < MIN_BOOTSTRAP_PAIRS:
        raise ValidationError(f'Paired bootstrap needs at least {MIN_BOOTSTRAP_PAIRS} pairs, got {len(diffs)}.')
    rng = np.random.default_rng(seed)
    means = np.empty(n_resamples)
    chunk = max(1, 2_000_000 // len(diffs))
    for start in range(0, n_resamples, chunk):
        size = min(chunk, n_resamples - start)
        means[start:start + size] = diffs[rng.integers(0, len(diffs), size=(size, len(diffs)))].mean(axis=1)
    low, high = np.percentile(means, [2.5, 97.5])
    return BootstrapResult(float(diffs.mean()), float(low), float(high), bool(low > 0), len(diffs))


@dataclass(frozen=True)
class UtilityResult:
    method: str
    image_ids: tuple
    auprc: np.ndarray
    avg_auprc: np.ndarray
    base_auprc: np.ndarray
    versus_avg: BootstrapResult
    versus_base: BootstrapResult


def auprc_per_image(maps, truths):
    return np.array([auprc(pr_curve(m, t)) for m, t in zip(maps, truths)])


def utility_test(method, model, samples, avg_mask, segmenter, flavor, saliency_cfg=None, harness_cfg=None,
                 maps=None, segmenter_maps=None, workers=1):
    """
    Per positive image AUPRC of the method's map, the constant average mask and
    the segmenter output, with paired-bootstrap verdicts against both baselines.
    """
    harness_cfg = harness_cfg or HarnessConfig()
    positives = [sample for sample in samples if sample.label == 1]
    if not positives:
        raise ValidationError('Utility test needs at least one positive test sample.')
    images = np.stack([sample.image for sample in positives])
    truths = [sample.truth(flavor) for sample in positives]
    if maps is None:
        maps = compute_maps(model, [method], images, saliency_cfg, workers)[method]
    if segmenter_maps is None:
        segmenter_maps = predict_proba(segmenter, images)
    avg_values = avg_mask.values if hasattr(avg_mask, 'values') else np.asarray(avg_mask)

    scores = auprc_per_image(maps, truths)
    avg_scores = auprc_per_image([avg_values] * len(truths), truths)
    base_scores = auprc_per_image(segmenter_maps, truths)
    result = UtilityResult(
        method,
        tuple(sample.sample_id for sample in positives),
        scores,
        avg_scores,
        base_scores,
        paired_bootstrap(scores - avg_scores, harness_cfg.bootstrap_resamples, harness_cfg.bootstrap_seed),
        paired_bootstrap(scores - base_scores, harness_cfg.bootstrap_resamples, harness_cfg.bootstrap_seed),
    )
    logger.info('Utility %s: AUPRC %.3f (avg mask %.3f, segmenter %.3f)',
                method, scores.mean(), avg_scores.mean(), base_scores.mean())
    return result


def select_randomization_sample(samples, size, seed):
    """
    Up to `size` test samples with a dedicated seed: positives first, topped up with negatives.
    """
    rng = np.random.default_rng(seed)
    positives = [sample for sample in samples if sample.label == 1]
    negatives = [sample for sample in samples if sample.label != 1]
    ordered = [positives[i] for i in rng.permutation(len(positives))]
    ordered += [negatives[i] for i in rng.permutation(len(negatives))]
    return ordered[:size]


def sample_pairs(n_maps, count, seed):
    """
    `count` distinct unordered index pairs, drawn without replacement.
    """
    if n_maps < count + 1:
        raise ValidationError(f'Sampling {count} map pairs needs at least {count + 1} maps, got {n_maps}.')
    pairs = list(itertools.combinations(range(n_maps), 2))
    picks = np.random.default_rng(seed).choice(len(pairs), size=count, replace=False)
    return [pairs[i] for i in picks]


def degradation_threshold(maps, pairs, ssim_cfg=None):
    return float(np.mean([ssim(maps[i], maps[j], ssim_cfg) for i, j in pairs]))


@dataclass(frozen=True)
class RandomizationStep:
    block: str
    mean: float
    std: float


@dataclass(frozen=True)
class RandomizationTrace:
    method: str
    steps: tuple
    threshold: float

    @property
    def final_ssim(self):
        return self.steps[-1].mean

    @property
    def passed(self):
        return self.final_ssim < self.threshold


@dataclass(frozen=True)
class RandomizationResult:
    traces: dict
    image_ids: tuple
    pairs: tuple
    randomized_auc: tuple


def _ssim_stats(maps_a, maps_b, ssim_cfg):
    values = np.array([ssim(a, b, ssim_cfg) for a, b in zip(maps_a, maps_b)])
    return values, float(values.mean()), float(values.std())


def cascading_randomization(model, methods, samples, seed=None, saliency_cfg=None, ssim_cfg=None, harness_cfg=None,
                            original_maps=None, auc_samples=None, workers=1):
    """
    Randomizes the model block by block from the logits down, cumulatively,
    and traces the mean SSIM between the original and the randomized maps.
    """
    harness_cfg = harness_cfg or HarnessConfig()
    ssim_cfg = ssim_cfg or SSIMConfig()
    saliency_cfg = saliency_cfg or SaliencyConfig()
    seed = harness_cfg.randomization_seed if seed is None else seed
    sample = select_randomization_sample(samples, harness_cfg.randomization_sample, harness_cfg.sample_seed)
    pairs = sample_pairs(len(sample), harness_cfg.threshold_pairs, harness_cfg.threshold_seed)
    images = np.stack([s.image for s in sample])
    ids = [s.sample_id for s in sample]
    if original_maps is None:
        original_maps = compute_maps(model, methods, images, saliency_cfg, workers, ids)
    thresholds = {method: degradation_threshold(original_maps[method], pairs, ssim_cfg) for method in methods}

    steps = {method: [] for method in methods}
    for method in methods:
        _, mean, std = _ssim_stats(original_maps[method], original_maps[method], ssim_cfg)
        steps[method].append(RandomizationStep('original', mean, std))
    randomized_auc = []
    weights = model.weights
    for depth, block in enumerate(model.network.blocks(), start=1):
        weights = randomize_block(model.network, weights, block, [seed, depth], harness_cfg.randomization_stddev)
        randomized = model.with_weights(weights)
        maps = compute_maps(randomized, methods, images, saliency_cfg, workers, ids)
        for method in methods:
            _, mean, std = _ssim_stats(original_maps[method], maps[method], ssim_cfg)
            steps[method].append(RandomizationStep(block, mean, std))
        if auc_samples is not None:
            scores = predict_proba(randomized, np.stack([s.image for s in auc_samples]))
            randomized_auc.append((block, roc_auc(scores, [s.label for s in auc_samples])))
        logger.info('Randomized through %s: %s', block,
                    ', '.join(f'{m} {steps[m][-1].mean:.3f}' for m in methods))

    traces = {
        method: RandomizationTrace(method, tuple(steps[method]), thresholds[method])
        for method in methods
    }
    return RandomizationResult(traces, tuple(ids), tuple(pairs), tuple(randomized_auc))


@dataclass(frozen=True)
class AgreementResult:
    kind: str
    method: str
    image_ids: tuple
    ssim: np.ndarray
    versus_base: BootstrapResult

    @property
    def mean(self):
        return float(self.ssim.mean())

    @property
    def std(self):
        return float(self.ssim.std())

    @property
    def above_low(self):
        return self.mean > LOW_SSIM_BASELINE


def segmenter_agreement(segmenter_a, segmenter_b, samples, ssim_cfg=None):
    """
    Per-image SSIM between two segmenter replicates' outputs: the high baseline
    for repeatability and reproducibility.
    """
    images = np.stack([sample.image for sample in samples])
    values, _, _ = _ssim_stats(predict_proba(segmenter_a, images), predict_proba(segmenter_b, images), ssim_cfg)
    return values


def _agreement(kind, model_a, model_b, methods, samples, baseline, saliency_cfg, ssim_cfg, harness_cfg, maps_a,
               maps_b, workers):
    harness_cfg = harness_cfg or HarnessConfig()
    images = np.stack([sample.image for sample in samples])
    ids = tuple(sample.sample_id for sample in samples)
    if maps_a is None:
        maps_a = compute_maps(model_a, methods, images, saliency_cfg, workers, ids)
    if maps_b is None:
        maps_b = compute_maps(model_b, methods, images, saliency_cfg, workers, ids)
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != (len(samples),):
        raise ValidationError(f'Baseline holds {baseline.size} SSIM values for {len(samples)} images.')
    results = {}
    for method in methods:
        values, mean, std = _ssim_stats(maps_a[method], maps_b[method], ssim_cfg)
        results[method] = AgreementResult(
            kind, method, ids, values,
            paired_bootstrap(values - baseline, harness_cfg.bootstrap_resamples, harness_cfg.bootstrap_seed),
        )
        logger.info('%s %s: SSIM %.3f +- %.3f', kind.capitalize(), method, mean, std)
    return results


def repeatability_test(model_a, model_b, methods, samples, baseline, saliency_cfg=None, ssim_cfg=None,
                       harness_cfg=None, maps_a=None, maps_b=None, workers=1):
    """
    SSIM between maps of two models of the same architecture, per image and method.
    """
    if model_a.arch != model_b.arch:
        raise ValidationError(f'Repeatability needs one architecture, got {model_a.arch} and {model_b.arch}.')
    return _agreement('repeatability', model_a, model_b, methods, samples, baseline, saliency_cfg, ssim_cfg,
                      harness_cfg, maps_a, maps_b, workers)


def reproducibility_test(model_a, model_b, methods, samples, baseline, saliency_cfg=None, ssim_cfg=None,
                         harness_cfg=None, maps_a=None, maps_b=None, workers=1):
    """
    SSIM between maps of two models with different architectures, per image and method.
    """
    if model_a.arch == model_b.arch:
        raise ValidationError(f'Reproducibility needs two architectures, got {model_a.arch} twice.')
    return _agreement('reproducibility', model_a, model_b, methods, samples, baseline, saliency_cfg, ssim_cfg,
                      harness_cfg, maps_a, maps_b, workers)
