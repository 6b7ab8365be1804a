"""
The eight gradient-based saliency methods. Every map is a raw, signed H x W
array aligned with the input image; scores are differentiated at the logit.
"""
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np
from django.core.exceptions import ValidationError
from scipy.ndimage import zoom
from skimage.segmentation import felzenszwalb

from .consts import CONV2D, GBP, GCAM, GGCAM, GRAD, GUIDED, IG, METHODS, SG, SIG, STANDARD, XRAI
from .engine import backward_input, forward, layer_gradient

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    method: str
    model_fingerprint: str
    image_id: str

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class SaliencyConfig:
    ig_steps: int = 25
    sg_samples: int = 25
    sg_noise_sigma: float = 0.15
    seed: int = 0
    gradcam_layer: str = ''
    xrai_segment_count: int = 60
    batch_size: int = 32

    def __post_init__(self):
        if self.ig_steps < 1:
            raise ValidationError(f'ig_steps must be >= 1, got {self.ig_steps}.')
        if self.sg_samples < 1:
            raise ValidationError(f'sg_samples must be >= 1, got {self.sg_samples}.')
        if not 0 < self.sg_noise_sigma < 1:
            raise ValidationError(f'sg_noise_sigma must lie in (0, 1), got {self.sg_noise_sigma}.')
        if self.xrai_segment_count < 2:
            raise ValidationError(f'xrai_segment_count must be >= 2, got {self.xrai_segment_count}.')
        if self.batch_size < 1:
            raise ValidationError(f'batch_size must be >= 1, got {self.batch_size}.')


def _check_image(model, image):
    image = np.asarray(image)
    expected = model.network.input_shape[1:]
    if image.shape != expected:
        raise ValidationError(f'Image shape {image.shape} does not match the model input {expected}.')
    return image


def _gradients(model, batch, relu_rule=STANDARD, batch_size=32):
    """
    Input gradients of the logit for a stack of (H, W) images.
    """
    grads = []
    for start in range(0, len(batch), batch_size):
        chunk = batch[start:start + batch_size, None]
        _, tape = forward(model.network, model.weights, chunk)
        grads.append(backward_input(tape, model.weights, relu_rule)[:, 0])
    return np.concatenate(grads)


def _wrap(values, method, model, image_id):
    return SaliencyMap(np.asarray(values, dtype=np.float32), method, model.weights.fingerprint(), image_id)


def noise_seed(image, image_id=''):
    """
    Per-image noise stream: keyed by the image id, or by the pixels when there is none.
    """
    key = image_id.encode() if image_id else np.ascontiguousarray(image).tobytes()
    return zlib.crc32(key)


def _noisy_copies(image, cfg, image_id=''):
    sigma = cfg.sg_noise_sigma * float(image.max() - image.min())
    rng = np.random.default_rng([cfg.seed, noise_seed(image, image_id)])
    noise = rng.normal(0.0, sigma, size=(cfg.sg_samples,) + image.shape)
    return (image + noise).astype(image.dtype)


def grad(model, image, cfg=None, image_id=''):
    cfg = cfg or SaliencyConfig()
    image = _check_image(model, image)
    return _wrap(_gradients(model, image[None], batch_size=cfg.batch_size)[0], GRAD, model, image_id)


def smoothgrad(model, image, cfg=None, image_id=''):
    cfg = cfg or SaliencyConfig()
    image = _check_image(model, image)
    grads = _gradients(model, _noisy_copies(image, cfg, image_id), batch_size=cfg.batch_size)
    return _wrap(grads.mean(axis=0), SG, model, image_id)


def _integrated(model, image, cfg):
    baseline = np.zeros_like(image)
    alphas = np.arange(1, cfg.ig_steps + 1, dtype=image.dtype) / image.dtype.type(cfg.ig_steps)
    path = baseline + alphas[:, None, None] * (image - baseline)
    grads = _gradients(model, path, batch_size=cfg.batch_size)
    return (image - baseline) * grads.mean(axis=0)


def integrated_gradients(model, image, cfg=None, image_id=''):
    """
    Right Riemann sum of the input gradients along the straight path from an
    all-zeros baseline, scaled by (x - baseline).
    """
    cfg = cfg or SaliencyConfig()
    image = _check_image(model, image)
    return _wrap(_integrated(model, image, cfg), IG, model, image_id)


def smooth_ig(model, image, cfg=None, image_id=''):
    cfg = cfg or SaliencyConfig()
    image = _check_image(model, image)
    maps = [_integrated(model, noisy, cfg) for noisy in _noisy_copies(image, cfg, image_id)]
    return _wrap(np.mean(maps, axis=0), SIG, model, image_id)


def _gradcam_layer(model, cfg):
    if cfg.gradcam_layer:
        layer = model.network.layer(cfg.gradcam_layer)
        if layer.kind != CONV2D:
            raise ValidationError(f'GradCAM layer "{layer.name}" is a {layer.kind} layer, not conv2d.')
        return layer.name
    convs = model.network.conv_layers
    if not convs:
        raise ValidationError('GradCAM needs a model with at least one conv2d layer.')
    return convs[-1].name


def upsample_bilinear(values, shape):
    values = np.asarray(values, dtype=np.float64)
    if values.shape == tuple(shape):
        return values
    factors = (shape[0] / values.shape[0], shape[1] / values.shape[1])
    return zoom(values, factors, order=1, mode='nearest', grid_mode=True)


def gradcam(model, image, cfg=None, image_id=''):
    """
    ReLU of the feature maps weighted by their spatially averaged gradients,
    bilinearly upsampled to the input size.
    """
    cfg = cfg or SaliencyConfig()
    image = _check_image(model, image)
    layer = _gradcam_layer(model, cfg)
    _, tape = forward(model.network, model.weights, image[None, None])
    activation, gradient = layer_gradient(tape, model.weights, layer)
    channel_weights = gradient[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(channel_weights, activation[0], axes=1), 0)
    return _wrap(upsample_bilinear(cam, image.shape), GCAM, model, image_id)


def guided_backprop(model, image, cfg=None, image_id=''):
    cfg = cfg or SaliencyConfig()
    image = _check_image(model, image)
    return _wrap(_gradients(model, image[None], GUIDED, cfg.batch_size)[0], GBP, model, image_id)


def guided_gradcam(model, image, cfg=None, image_id='', cam=None, guided=None):
    cfg = cfg or SaliencyConfig()
    cam = cam if cam is not None else gradcam(model, image, cfg, image_id)
    guided = guided if guided is not None else guided_backprop(model, image, cfg, image_id)
    return _wrap(cam.values * guided.values, GGCAM, model, image_id)


def segment_image(image, target):
    """
    Graph-based oversegmentation on intensity: pixels are merged greedily along
    the cheapest edges until every region holds at least pixels / target
    pixels, so at most `target` regions remain. Labels 0..R-1 run in raster order.
    """
    if target < 2:
        raise ValidationError(f'Segment count must be >= 2, got {target}.')
    image = np.asarray(image, dtype=np.float64)
    min_size = int(np.ceil(image.size / target))
    # a vanishing scale leaves the region sizes to min_size
    labels = felzenszwalb(image, scale=1e-6, sigma=0, min_size=min_size, channel_axis=None)
    _, first_seen, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first_seen))
    return rank[inverse].reshape(image.shape)


def rank_regions(attribution, segments):
    """
    Region labels ordered by mean attribution per pixel, highest first (ties by label).
    """
    segments = np.asarray(segments)
    labels, inverse = np.unique(segments.ravel(), return_inverse=True)
    sums = np.bincount(inverse, weights=np.asarray(attribution, dtype=np.float64).ravel())
    means = sums / np.bincount(inverse)
    order = sorted(range(len(labels)), key=lambda r: (-means[r], r))
    return [int(labels[r]) for r in order]


def xrai_from_segments(attribution, segments):
    """
    Regions are added greedily in rank order; each pixel takes 1 - order / regions.
    """
    segments = np.asarray(segments)
    ranking = rank_regions(attribution, segments)
    values = np.empty(segments.shape, dtype=np.float64)
    for order, label in enumerate(ranking):
        values[segments == label] = 1.0 - order / len(ranking)
    return values


def xrai(model, image, cfg=None, image_id='', attribution=None):
    cfg = cfg or SaliencyConfig()
    image = _check_image(model, image)
    if attribution is None:
        attribution = _integrated(model, image, cfg)
    segments = segment_image(image, cfg.xrai_segment_count)
    return _wrap(xrai_from_segments(attribution, segments), XRAI, model, image_id)


METHOD_FUNCTIONS = {
    GRAD: grad,
    SG: smoothgrad,
    IG: integrated_gradients,
    SIG: smooth_ig,
    GCAM: gradcam,
    XRAI: xrai,
    GBP: guided_backprop,
    GGCAM: guided_gradcam,
}


def maps_for_image(model, methods, cfg, image, image_id=''):
    """
    All requested maps for one image; GradCAM, guided backprop and IG are
    computed once when other methods reuse them.
    """
    unknown = [method for method in methods if method not in METHOD_FUNCTIONS]
    if unknown:
        raise ValidationError(f'Unknown saliency methods: {", ".join(unknown)}.')
    cache = {}

    def get(method):
        if method not in cache:
            if method == GGCAM:
                cache[method] = guided_gradcam(model, image, cfg, image_id, cam=get(GCAM), guided=get(GBP))
            elif method == XRAI:
                cache[method] = xrai(model, image, cfg, image_id, attribution=get(IG).values)
            else:
                cache[method] = METHOD_FUNCTIONS[method](model, image, cfg, image_id)
        return cache[method]

    return {method: get(method) for method in methods}


def compute_maps(model, methods, images, cfg=None, workers=1, image_ids=None):
    """
    Maps for a stack of images as {method: (N, H, W) float32}; the result does
    not depend on the worker count.
    """
    cfg = cfg or SaliencyConfig()
    methods = [method for method in METHODS if method in methods]
    image_ids = list(image_ids) if image_ids is not None else [''] * len(images)
    job = partial(maps_for_image, model, methods, cfg)
    if workers > 1 and len(images) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(job, images, image_ids))
    else:
        results = [job(image, image_id) for image, image_id in zip(images, image_ids)]
    logger.debug('Computed %d maps x %d methods', len(results), len(methods))
    shape = (0,) + tuple(model.network.input_shape[1:])
    return {
        method: np.stack([result[method].values for result in results]) if results else np.zeros(shape, np.float32)
        for method in methods
    }
