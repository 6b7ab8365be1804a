"""
Minimal deterministic tensor engine: layer specs, networks, weight stores and
manual forward/backward passes over batched NCHW numpy arrays.
"""
import hashlib
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .consts import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, AVGPOOL, BCE_EPSILON, CONCAT_SKIP, CONV2D, DENSE, GLOBALAVGPOOL, GUIDED,
    LAYER_KINDS, MAXPOOL, PARAMETRIC_KINDS, RELU, RELU_RULES, SIGMOID, STANDARD, UPSAMPLE_NEAREST,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    block: str = ''

    @property
    def parametric(self):
        return self.kind in PARAMETRIC_KINDS


def conv2d(name, in_channels, out_channels, kernel, stride=1, padding=0, block=''):
    return LayerSpec(name, CONV2D, {
        'in_channels': in_channels, 'out_channels': out_channels,
        'kernel': kernel, 'stride': stride, 'padding': padding,
    }, block)


def relu(name, block=''):
    return LayerSpec(name, RELU, {}, block)


def maxpool(name, kernel=2, stride=None, block=''):
    return LayerSpec(name, MAXPOOL, {'kernel': kernel, 'stride': stride or kernel}, block)


def avgpool(name, kernel=2, stride=None, block=''):
    return LayerSpec(name, AVGPOOL, {'kernel': kernel, 'stride': stride or kernel}, block)


def globalavgpool(name, block=''):
    return LayerSpec(name, GLOBALAVGPOOL, {}, block)


def dense(name, in_features, out_features, block=''):
    return LayerSpec(name, DENSE, {'in_features': in_features, 'out_features': out_features}, block)


def sigmoid(name, block=''):
    return LayerSpec(name, SIGMOID, {}, block)


def upsample_nearest(name, scale=2, block=''):
    return LayerSpec(name, UPSAMPLE_NEAREST, {'scale': scale}, block)


def concat_skip(name, source, block=''):
    return LayerSpec(name, CONCAT_SKIP, {'source': source}, block)


class Network:
    """
    Ordered layer specifications over a (C, H, W) input.

    Trailing sigmoid layers are the inference head: `forward` stops before them
    and returns logits, `infer` runs them.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = tuple(layers)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValidationError(f'Network input shape must be (C, H, W) with positive sizes, got {input_shape}.')
        if not self.layers:
            raise ValidationError('Network has no layers.')
        names = [layer.name for layer in self.layers]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ValidationError(f'Layer names must be unique, duplicated: {", ".join(duplicates)}.')
        self.shapes = self._infer_shapes()
        logit_index = len(self.layers) - 1
        while logit_index > 0 and self.layers[logit_index].kind == SIGMOID:
            logit_index -= 1
        self.logit_index = logit_index

    def __repr__(self):
        return f'Network(input={self.input_shape}, layers={[layer.name for layer in self.layers]})'

    def _infer_shapes(self):
        shapes = {}
        shape = self.input_shape
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ValidationError(f'Layer "{layer.name}": unknown kind "{layer.kind}".')
            shape = _output_shape(layer, shape, shapes)
            shapes[layer.name] = shape
        return shapes

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ValidationError(f'Network has no layer "{name}".')

    def layer_index(self, name):
        return self.layers.index(self.layer(name))

    @property
    def parametric_layers(self):
        return [layer for layer in self.layers if layer.parametric]

    @property
    def conv_layers(self):
        return [layer for layer in self.layers if layer.kind == CONV2D]

    @property
    def output_shape(self):
        return self.shapes[self.layers[self.logit_index].name]

    def parameter_shapes(self):
        ret = {}
        for layer in self.parametric_layers:
            p = layer.params
            if layer.kind == CONV2D:
                ret[f'{layer.name}.weight'] = (p['out_channels'], p['in_channels'], p['kernel'], p['kernel'])
                ret[f'{layer.name}.bias'] = (p['out_channels'],)
            else:
                ret[f'{layer.name}.weight'] = (p['out_features'], p['in_features'])
                ret[f'{layer.name}.bias'] = (p['out_features'],)
        return ret

    def blocks(self):
        """
        Randomization blocks ordered from the top (logits) to the bottom.
        """
        order = []
        for layer in self.parametric_layers:
            block = layer.block or layer.name
            if block not in order:
                order.append(block)
        return order[::-1]

    def block_layers(self, block):
        layers = [layer for layer in self.parametric_layers if (layer.block or layer.name) == block]
        if not layers:
            raise ValidationError(f'Network has no parametric block "{block}".')
        return layers


def _output_shape(layer, shape, shapes):
    p = layer.params
    kind = layer.kind
    if kind == CONV2D:
        c, h, w = _spatial(layer, shape)
        if c != p['in_channels']:
            raise ValidationError(
                f'Layer "{layer.name}": expects {p["in_channels"]} input channels, got {c}.'
            )
        k, s, pad = p['kernel'], p['stride'], p['padding']
        if k < 1 or s < 1 or pad < 0 or p['out_channels'] < 1:
            raise ValidationError(f'Layer "{layer.name}": kernel, stride and channels must be positive, padding >= 0.')
        if k > h + 2 * pad or k > w + 2 * pad:
            raise ValidationError(f'Layer "{layer.name}": kernel {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}.')
        return p['out_channels'], (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
    if kind in (MAXPOOL, AVGPOOL):
        c, h, w = _spatial(layer, shape)
        k, s = p['kernel'], p['stride']
        if k < 1 or s < 1:
            raise ValidationError(f'Layer "{layer.name}": kernel and stride must be >= 1.')
        if k > h or k > w:
            raise ValidationError(f'Layer "{layer.name}": kernel {k} exceeds input {h}x{w}.')
        return c, (h - k) // s + 1, (w - k) // s + 1
    if kind == GLOBALAVGPOOL:
        c, _, _ = _spatial(layer, shape)
        return (c,)
    if kind == DENSE:
        features = int(np.prod(shape))
        if features != p['in_features'] or p['out_features'] < 1:
            raise ValidationError(
                f'Layer "{layer.name}": expects {p["in_features"]} input features, got {features}.'
            )
        return (p['out_features'],)
    if kind == UPSAMPLE_NEAREST:
        c, h, w = _spatial(layer, shape)
        if p['scale'] < 1:
            raise ValidationError(f'Layer "{layer.name}": scale must be >= 1.')
        return c, h * p['scale'], w * p['scale']
    if kind == CONCAT_SKIP:
        c, h, w = _spatial(layer, shape)
        source = shapes.get(p['source'])
        if source is None:
            raise ValidationError(f'Layer "{layer.name}": skip source "{p["source"]}" is not an earlier layer.')
        if len(source) != 3 or source[1:] != (h, w):
            raise ValidationError(
                f'Layer "{layer.name}": skip source "{p["source"]}" has shape {source}, expected (*, {h}, {w}).'
            )
        return c + source[0], h, w
    return shape


def _spatial(layer, shape):
    if len(shape) != 3:
        raise ValidationError(f'Layer "{layer.name}": expects a (C, H, W) input, got {shape}.')
    return shape


class WeightStore(Mapping):
    """
    Read-only mapping `<layer>.weight` / `<layer>.bias` -> array.
    """

    def __init__(self, arrays):
        self._arrays = {}
        for name, value in arrays.items():
            array = np.array(value, copy=True)
            array.setflags(write=False)
            self._arrays[name] = array
        self._fingerprint = None

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __repr__(self):
        return f'WeightStore({self.fingerprint()[:12]}, {len(self)} arrays)'

    @property
    def dtype(self):
        return np.result_type(*self._arrays.values()) if self._arrays else np.float32

    def replace(self, updates):
        arrays = dict(self._arrays)
        for name, value in updates.items():
            if name not in arrays:
                raise ValidationError(f'Weight store has no entry "{name}".')
            if np.shape(value) != arrays[name].shape:
                raise ValidationError(
                    f'Weight "{name}": expected shape {arrays[name].shape}, got {np.shape(value)}.'
                )
            arrays[name] = value
        return WeightStore(arrays)

    def scaled(self, name, factor):
        return self.replace({name: self._arrays[name] * factor})

    def fingerprint(self):
        if self._fingerprint is None:
            digest = hashlib.blake2b(digest_size=16)
            for name in sorted(self._arrays):
                array = np.ascontiguousarray(self._arrays[name])
                digest.update(name.encode())
                digest.update(str((array.shape, array.dtype.str)).encode())
                digest.update(array.tobytes())
            self._fingerprint = digest.hexdigest()
        return self._fingerprint

    def validate_for(self, network):
        for name, shape in network.parameter_shapes().items():
            if name not in self._arrays:
                raise ValidationError(f'Layer "{name.split(".")[0]}": weight store has no entry "{name}".')
            if self._arrays[name].shape != shape:
                raise ValidationError(
                    f'Layer "{name.split(".")[0]}": "{name}" has shape {self._arrays[name].shape}, expected {shape}.'
                )

    @classmethod
    def zeros(cls, network, dtype=np.float32):
        return cls({name: np.zeros(shape, dtype=dtype) for name, shape in network.parameter_shapes().items()})


@dataclass(frozen=True)
class Tape:
    network: Network
    fingerprint: str
    inputs: tuple
    outputs: tuple
    aux: tuple
    score: np.ndarray

    @property
    def batch_size(self):
        return self.inputs[0].shape[0]

    def activation(self, name):
        return self.outputs[self.network.layer_index(name)]


def _check_input(network, x):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != network.input_shape:
        raise ValidationError(
            f'Layer "{network.layers[0].name}": expected input (N, {", ".join(map(str, network.input_shape))}), '
            f'got {x.shape}.'
        )
    return x


def _windows(x, kernel, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return x, sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _layer_forward(layer, weights, x, outputs):
    p = layer.params
    kind = layer.kind
    if kind == CONV2D:
        w = weights[f'{layer.name}.weight']
        b = weights[f'{layer.name}.bias']
        _, windows = _windows(x, p['kernel'], p['stride'], p['padding'])
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out + b[None, :, None, None]), None
    if kind == RELU:
        return np.maximum(x, 0), None
    if kind == MAXPOOL:
        _, windows = _windows(x, p['kernel'], p['stride'], 0)
        flat = windows.reshape(*windows.shape[:4], -1)
        argmax = flat.argmax(axis=-1)
        return np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0], argmax
    if kind == AVGPOOL:
        _, windows = _windows(x, p['kernel'], p['stride'], 0)
        return windows.mean(axis=(4, 5)), None
    if kind == GLOBALAVGPOOL:
        return x.mean(axis=(2, 3)), None
    if kind == DENSE:
        w = weights[f'{layer.name}.weight']
        b = weights[f'{layer.name}.bias']
        return x.reshape(x.shape[0], -1) @ w.T + b, None
    if kind == SIGMOID:
        return expit(x), None
    if kind == UPSAMPLE_NEAREST:
        scale = p['scale']
        return x.repeat(scale, axis=2).repeat(scale, axis=3), None
    if kind == CONCAT_SKIP:
        return np.concatenate([x, outputs[p['source']]], axis=1), x.shape[1]
    raise ValidationError(f'Layer "{layer.name}": unknown kind "{kind}".')


def _run(network, weights, x, stop):
    weights.validate_for(network)
    x = _check_input(network, x)
    dtype = np.result_type(x.dtype, weights.dtype)
    current = x.astype(dtype, copy=False)
    inputs, outputs, aux = [], [], []
    by_name = {}
    for layer in network.layers[:stop + 1]:
        inputs.append(current)
        current, extra = _layer_forward(layer, weights, current, by_name)
        current = current.astype(dtype, copy=False)
        outputs.append(current)
        aux.append(extra)
        by_name[layer.name] = current
    return inputs, outputs, aux


def _score(output):
    if output.ndim >= 2 and output.shape[1] == 1:
        return output[:, 0]
    return output


def forward(network, weights, x, mode=STANDARD):
    """
    Runs the network up to its logit layer.

    Returns the pre-sigmoid score, (N,) for classifiers or (N, H, W) for the
    segmenter, and the tape needed by the backward passes.
    """
    if mode != STANDARD:
        raise ValidationError(f'Unsupported forward mode "{mode}".')
    inputs, outputs, aux = _run(network, weights, x, network.logit_index)
    score = _score(outputs[-1])
    tape = Tape(network, weights.fingerprint(), tuple(inputs), tuple(outputs), tuple(aux), score)
    return score, tape


def infer(network, weights, x):
    """
    Runs every layer, including the sigmoid head.
    """
    _, outputs, _ = _run(network, weights, x, len(network.layers) - 1)
    return _score(outputs[-1])


def _layer_backward(layer, weights, x, out, extra, grad, relu_rule, grad_w):
    p = layer.params
    kind = layer.kind
    if kind == CONV2D:
        w = weights[f'{layer.name}.weight']
        k, s, pad = p['kernel'], p['stride'], p['padding']
        padded, windows = _windows(x, k, s, pad)
        if grad_w is not None:
            grad_w[f'{layer.name}.weight'] = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
            grad_w[f'{layer.name}.bias'] = grad.sum(axis=(0, 2, 3))
        cols = np.tensordot(grad, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        ho, wo = grad.shape[2:]
        grad_in = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_in[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[..., i, j]
        if pad:
            grad_in = grad_in[:, :, pad:-pad, pad:-pad]
        return grad_in
    if kind == RELU:
        gate = x > 0
        if relu_rule == GUIDED:
            gate &= grad > 0
        return grad * gate
    if kind in (MAXPOOL, AVGPOOL):
        k, s = p['kernel'], p['stride']
        ho, wo = grad.shape[2:]
        grad_in = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                if kind == MAXPOOL:
                    part = grad * (extra == i * k + j)
                else:
                    part = grad / (k * k)
                grad_in[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += part
        return grad_in
    if kind == GLOBALAVGPOOL:
        h, w = x.shape[2:]
        return np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).copy()
    if kind == DENSE:
        w = weights[f'{layer.name}.weight']
        flat = x.reshape(x.shape[0], -1)
        if grad_w is not None:
            grad_w[f'{layer.name}.weight'] = grad.T @ flat
            grad_w[f'{layer.name}.bias'] = grad.sum(axis=0)
        return (grad @ w).reshape(x.shape)
    if kind == SIGMOID:
        return grad * out * (1 - out)
    if kind == UPSAMPLE_NEAREST:
        n, c, h, w = x.shape
        scale = p['scale']
        return grad.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5))
    raise ValidationError(f'Layer "{layer.name}": unknown kind "{kind}".')


def _backward(tape, weights, grad_output, relu_rule=STANDARD, with_weights=False, capture=None):
    if relu_rule not in RELU_RULES:
        raise ValidationError(f'Unknown ReLU rule "{relu_rule}".')
    if weights.fingerprint() != tape.fingerprint:
        raise ValidationError('Tape was recorded with a different weight store.')
    network = tape.network
    last = tape.outputs[-1]
    if grad_output is None:
        grad = np.ones_like(last)
    else:
        grad = np.asarray(grad_output, dtype=last.dtype)
        if grad.size != last.size:
            raise ValidationError(f'Upstream gradient has shape {grad.shape}, expected {tape.score.shape}.')
        grad = grad.reshape(last.shape)
    grad_w = {} if with_weights else None
    pending = {}
    captured = None
    for index in reversed(range(len(tape.outputs))):
        layer = network.layers[index]
        if layer.name in pending:
            grad = grad + pending.pop(layer.name)
        if layer.name == capture:
            captured = (tape.outputs[index], grad)
        if layer.kind == CONCAT_SKIP:
            split = tape.aux[index]
            source = layer.params['source']
            pending[source] = pending.get(source, 0) + grad[:, split:]
            grad = grad[:, :split]
            continue
        grad = _layer_backward(
            layer, weights, tape.inputs[index], tape.outputs[index], tape.aux[index], grad, relu_rule, grad_w
        )
    return grad, grad_w, captured


def backward_input(tape, weights, relu_rule=STANDARD, grad_output=None):
    """
    Gradient of the (summed) score with respect to the input batch.

    relu_rule=guided zeroes ReLU positions whose forward input is <= 0 or whose
    incoming gradient is < 0.
    """
    grad, _, _ = _backward(tape, weights, grad_output, relu_rule)
    return grad


def layer_gradient(tape, weights, layer_name, relu_rule=STANDARD, grad_output=None):
    """
    Activation of `layer_name` and the gradient of the score with respect to it.
    """
    tape.network.layer(layer_name)
    _, _, captured = _backward(tape, weights, grad_output, relu_rule, capture=layer_name)
    return captured


def backward_weights(tape, weights, labels=None, grad_output=None):
    """
    Weight gradients of the BCE-with-logit loss (mean over the batch) when
    `labels` are given, or of an explicit upstream score gradient otherwise.
    """
    if labels is not None:
        labels = np.asarray(labels, dtype=tape.score.dtype).reshape(tape.score.shape)
        grad_output = (expit(tape.score) - labels) / tape.batch_size
    elif grad_output is None:
        raise ValidationError('backward_weights needs labels or an upstream gradient.')
    _, grad_w, _ = _backward(tape, weights, grad_output, with_weights=True)
    return WeightStore(grad_w)


def bce_loss(p, y):
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValidationError('BCE loss of an empty batch is undefined.')
    if p.shape != y.shape:
        raise ValidationError(f'BCE loss: {p.size} predictions for {y.size} labels.')
    p = np.clip(p, BCE_EPSILON, 1 - BCE_EPSILON)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass(frozen=True)
class AdamState:
    step: int
    m: dict
    v: dict


def adam_step(weights, grads, state, lr):
    if state is None:
        state = AdamState(0, {k: np.zeros_like(v) for k, v in weights.items()},
                          {k: np.zeros_like(v) for k, v in weights.items()})
    if set(grads) != set(weights):
        raise ValidationError('Gradient store does not match the weight store.')
    step = state.step + 1
    updates, m, v = {}, {}, {}
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValidationError(f'Gradient "{name}" has shape {g.shape}, expected {w.shape}.')
        g = g.astype(w.dtype, copy=False)
        m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m[name] / (1 - ADAM_BETA1 ** step)
        v_hat = v[name] / (1 - ADAM_BETA2 ** step)
        updates[name] = (w - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)).astype(w.dtype, copy=False)
    return weights.replace(updates), AdamState(step, m, v)


def init_truncated_normal(shape, seed, stddev):
    """
    N(0, stddev^2) samples redrawn until they fall within +-2 stddev.
    """
    if stddev <= 0:
        raise ValidationError(f'stddev must be positive, got {stddev}.')
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, stddev, size=shape)
    outside = np.abs(values) > 2 * stddev
    while outside.any():
        values[outside] = rng.normal(0.0, stddev, size=int(outside.sum()))
        outside = np.abs(values) > 2 * stddev
    return values.astype(np.float32)


def init_weights(network, seed):
    """
    He-scaled truncated-normal weights and zero biases, one stream per layer.
    """
    arrays = {}
    for index, (name, shape) in enumerate(network.parameter_shapes().items()):
        if name.endswith('.bias'):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            arrays[name] = init_truncated_normal(shape, [seed, index], np.sqrt(2.0 / fan_in))
    return WeightStore(arrays)


def randomize_block(network, weights, block, seed, stddev):
    """
    Replaces the weights and biases of every layer in `block` with truncated-normal samples.
    """
    base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    updates = {}
    for position, layer in enumerate(network.block_layers(block)):
        for index, suffix in enumerate(('weight', 'bias')):
            name = f'{layer.name}.{suffix}'
            updates[name] = init_truncated_normal(weights[name].shape, base + [position, index], stddev).astype(
                weights[name].dtype
            )
    logger.debug('Randomized block %s (%d arrays)', block, len(updates))
    return weights.replace(updates)
