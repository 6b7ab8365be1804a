"""
Binary and text codecs: SALW1 weight files, SALF1 raw maps, PGM images, CSV tables.
"""
import csv
import math
import struct
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from PIL import Image, UnidentifiedImageError

from .consts import SALF_MAGIC, SALW_MAGIC
from .engine import WeightStore


def encode_weights(weights):
    parts = [SALW_MAGIC]
    for name, array in weights.items():
        data = np.ascontiguousarray(array, dtype='<f4')
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<I', data.ndim))
        parts.append(struct.pack(f'<{data.ndim}I', *data.shape))
        parts.append(data.tobytes())
    return b''.join(parts)


def decode_weights(blob):
    if not blob.startswith(SALW_MAGIC):
        raise ValidationError('Not a SALW1 weight file (bad magic).')
    offset = len(SALW_MAGIC)
    arrays = {}
    try:
        while offset < len(blob):
            (length,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            if offset + length > len(blob):
                raise ValidationError('SALW1 record name is truncated.')
            name = blob[offset:offset + length].decode('utf-8')
            offset += length
            (rank,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            if offset + 4 * rank > len(blob):
                raise ValidationError(f'SALW1 record "{name}" is truncated.')
            shape = struct.unpack_from(f'<{rank}I', blob, offset)
            offset += 4 * rank
            # exact integer product; dims are unsigned
            count = math.prod(shape)
            if 4 * count > len(blob) - offset:
                raise ValidationError(f'SALW1 record "{name}" is truncated.')
            arrays[name] = np.frombuffer(blob, dtype='<f4', count=count, offset=offset).reshape(shape).astype(
                np.float32
            )
            offset += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValidationError(f'Malformed SALW1 weight file: {exc}.')
    return WeightStore(arrays)


def save_weights(weights, path):
    Path(path).write_bytes(encode_weights(weights))


def load_weights(path):
    try:
        return decode_weights(Path(path).read_bytes())
    except ValidationError as exc:
        raise ValidationError(f'{path}: {exc.message}')


def encode_map(values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValidationError(f'Saliency maps are 2-D, got shape {values.shape}.')
    h, w = values.shape
    return SALF_MAGIC + struct.pack('<II', h, w) + np.ascontiguousarray(values, dtype='<f4').tobytes()


def decode_map(blob):
    if len(blob) < 16 or not blob.startswith(SALF_MAGIC):
        raise ValidationError('Not a SALF1 map file (bad magic).')
    h, w = struct.unpack_from('<II', blob, 8)
    if not h or not w:
        raise ValidationError(f'SALF1 header describes an empty {h}x{w} map.')
    if len(blob) != 16 + 4 * h * w:
        raise ValidationError(f'SALF1 payload holds {(len(blob) - 16) // 4} values, header says {h}x{w}.')
    return np.frombuffer(blob, dtype='<f4', count=h * w, offset=16).reshape(h, w).astype(np.float32)


def save_map(values, path):
    Path(path).write_bytes(encode_map(values))


def load_map(path):
    try:
        return decode_map(Path(path).read_bytes())
    except ValidationError as exc:
        raise ValidationError(f'{path}: {exc.message}')


def to_uint8(values):
    """
    Min-max scales a map to 0..255 for viewing; constant maps become mid-grey.
    """
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high == low:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.round((values - low) / (high - low) * 255).astype(np.uint8)


def write_pgm(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValidationError(f'PGM pixels must be a 2-D uint8 array, got {pixels.dtype} {pixels.shape}.')
    Image.fromarray(pixels).save(path, format='PPM')


def read_pgm(path):
    try:
        with Image.open(path) as image:
            if image.format != 'PPM' or image.mode != 'L':
                raise ValidationError(f'{path}: expected a binary greyscale PGM (P5), got {image.format} {image.mode}.')
            return np.array(image, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise ValidationError(f'{path}: unreadable PGM ({exc}).')


def write_csv(path, header, rows):
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline='') as fh:
        return list(csv.DictReader(fh))
