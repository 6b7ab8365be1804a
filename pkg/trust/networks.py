from django.core.exceptions import ValidationError

from .consts import ARCH_A, ARCH_B, SEGMENTER
from .engine import (
    Network, avgpool, concat_skip, conv2d, dense, globalavgpool, maxpool, relu, sigmoid, upsample_nearest,
)

LOGITS = 'logits'


def arch_a(size=64):
    """
    Four conv-ReLU-maxpool blocks widening 8 -> 64 channels, global average pooling, one logit.
    """
    layers = []
    channels = [1, 8, 16, 32, 64]
    for i in range(1, 5):
        block = f'block{i}'
        layers += [
            conv2d(f'conv{i}', channels[i - 1], channels[i], 3, padding=1, block=block),
            relu(f'relu{i}', block=block),
            maxpool(f'pool{i}', 2, block=block),
        ]
    layers += [
        globalavgpool('gap'),
        dense('fc', 64, 1, block=LOGITS),
        sigmoid('probability'),
    ]
    return Network((1, size, size), layers)


def arch_b(size=64):
    """
    Three 5x5 conv-ReLU-avgpool blocks, a final average pool and two dense layers.
    """
    layers = []
    channels = [1, 8, 16, 32]
    for i in range(1, 4):
        block = f'block{i}'
        layers += [
            conv2d(f'conv{i}', channels[i - 1], channels[i], 5, padding=2, block=block),
            relu(f'relu{i}', block=block),
            avgpool(f'pool{i}', 2, block=block),
        ]
    side = size // 16
    layers += [
        avgpool('pool4', 2),
        dense('fc1', 32 * side * side, 64, block='dense'),
        relu('relu_fc1', block='dense'),
        dense('fc2', 64, 1, block=LOGITS),
        sigmoid('probability'),
    ]
    return Network((1, size, size), layers)


def segmenter(size=64):
    """
    Three-level encoder-decoder with concatenated skips and a 1x1 logit head.
    """
    layers = []
    channels = [1, 8, 16, 32]
    for i in range(1, 4):
        block = f'enc{i}'
        layers += [
            conv2d(f'enc{i}_conv', channels[i - 1], channels[i], 3, padding=1, block=block),
            relu(f'enc{i}_relu', block=block),
            maxpool(f'enc{i}_pool', 2, block=block),
        ]
    decoder = [(3, 32, 16), (2, 16, 8), (1, 8, 8)]
    in_channels = 32
    for level, skip_channels, out_channels in decoder:
        block = f'dec{level}'
        layers += [
            upsample_nearest(f'dec{level}_up', 2, block=block),
            concat_skip(f'dec{level}_skip', f'enc{level}_relu', block=block),
            conv2d(f'dec{level}_conv', in_channels + skip_channels, out_channels, 3, padding=1, block=block),
            relu(f'dec{level}_relu', block=block),
        ]
        in_channels = out_channels
    layers += [
        conv2d('head', in_channels, 1, 1, block=LOGITS),
        sigmoid('probability'),
    ]
    return Network((1, size, size), layers)


BUILDERS = {
    ARCH_A: arch_a,
    ARCH_B: arch_b,
    SEGMENTER: segmenter,
}


def build(arch, size=64):
    if arch not in BUILDERS:
        raise ValidationError(f'Unknown architecture "{arch}".')
    if size < 16 or size % 16:
        raise ValidationError(f'Input size must be a multiple of 16 (>= 16), got {size}.')
    return BUILDERS[arch](size)


def layer_shape_sequence(network):
    return [network.shapes[layer.name] for layer in network.layers if layer.parametric]
