"""
Binary file formats: 8-bit P5 graymaps and VTX1 vertex tracks
"""
import struct
from pathlib import Path
from typing import Union

import numpy as np

from constants import VTX_MAGIC
from core_utils.errors import DataError

PathLike = Union[str, Path]
VTX_HEADER = struct.Struct('<4sII')


class FileFormatError(DataError):
    """
    File is missing, truncated or has an unexpected layout
    """


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """
    Stores a [0, 1] grayscale image as an 8-bit binary graymap
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise FileFormatError(f'{path}: graymap must be two-dimensional, received {image.shape}')
    height, width = image.shape
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f'P5\n{width} {height}\n255\n'.encode('ascii')
    with open(path, 'wb') as file:
        file.write(header + pixels.tobytes())


def _next_token(data: bytes, position: int):
    """
    Reads one whitespace-separated header token, skipping comments
    """
    while position < len(data):
        if data[position:position + 1].isspace():
            position += 1
        elif data[position:position + 1] == b'#':
            while position < len(data) and data[position:position + 1] not in (b'\n', b'\r'):
                position += 1
        else:
            break
    start = position
    while position < len(data) and not data[position:position + 1].isspace():
        position += 1
    return data[start:position], position


def read_pgm(path: PathLike) -> np.ndarray:
    """
    Loads an 8-bit binary graymap as float32 values in [0, 1]
    """
    try:
        data = Path(path).read_bytes()
    except OSError as error:
        raise FileFormatError(f'{path}: cannot read graymap ({error})') from error

    magic, position = _next_token(data, 0)
    if magic != b'P5':
        raise FileFormatError(f'{path}: not a binary graymap (magic {magic!r})')
    try:
        width_token, position = _next_token(data, position)
        height_token, position = _next_token(data, position)
        maxval_token, position = _next_token(data, position)
        width, height, max_value = int(width_token), int(height_token), int(maxval_token)
    except ValueError as error:
        raise FileFormatError(f'{path}: malformed graymap header') from error
    if max_value != 255:
        raise FileFormatError(f'{path}: only 8-bit graymaps are supported, max value {max_value}')

    # exactly one whitespace byte separates the header from the raster
    position += 1
    raster = data[position:position + width * height]
    if len(raster) != width * height:
        raise FileFormatError(f'{path}: raster truncated, expected {width * height} bytes '
                              f'at offset {position}, found {len(raster)}')
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float32) / np.float32(255.0)


def write_vtx(path: PathLike, track: np.ndarray) -> None:
    """
    Stores an F x V x 3 vertex track in centimeters, frame-major, little-endian float32
    """
    track = np.asarray(track, dtype=np.float32)
    if track.ndim != 3 or track.shape[2] != 3:
        raise FileFormatError(f'{path}: vertex track must be F x V x 3, received {track.shape}')
    frames, vertices = track.shape[:2]
    with open(path, 'wb') as file:
        file.write(VTX_HEADER.pack(VTX_MAGIC, frames, vertices))
        file.write(track.astype('<f4').tobytes())


def read_vtx(path: PathLike) -> np.ndarray:
    """
    Loads a VTX1 vertex track as an F x V x 3 float32 array
    """
    try:
        data = Path(path).read_bytes()
    except OSError as error:
        raise FileFormatError(f'{path}: cannot read vertex track ({error})') from error

    if len(data) < VTX_HEADER.size:
        raise FileFormatError(f'{path}: header truncated at offset {len(data)}')
    magic, frames, vertices = VTX_HEADER.unpack_from(data, 0)
    if magic != VTX_MAGIC:
        raise FileFormatError(f'{path}: bad magic {magic!r} at offset 0')

    expected = frames * vertices * 3 * 4
    payload = data[VTX_HEADER.size:]
    if len(payload) != expected:
        raise FileFormatError(f'{path}: expected {expected} payload bytes at offset '
                              f'{VTX_HEADER.size}, found {len(payload)}')
    return np.frombuffer(payload, dtype='<f4').astype(np.float32).reshape(frames, vertices, 3)
