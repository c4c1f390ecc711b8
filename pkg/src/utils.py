"""
Utility functions and constants for uniground.
"""

from __future__ import annotations

import base64
import io
import itertools
import math

import numpy as np
from PIL import Image

# 26-connected voxel neighbourhood (self excluded)
NEIGHBOR_OFFSETS_26: np.ndarray = np.array(
    [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)], dtype=np.int64
)

BACKGROUND_GRAY: tuple[int, int, int] = (128, 128, 128)


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    """Return ``vector`` scaled to unit length.

    Raises:
        ValueError: If the vector has zero norm.
    """
    v = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0 or not np.isfinite(norm):
        raise ValueError("cannot normalise a zero or non-finite vector")
    return v / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, defined as 0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def wrap_yaw(yaw: float) -> float:
    """Map an angle into [-pi/2, pi/2)."""
    wrapped = (yaw + math.pi / 2) % math.pi - math.pi / 2
    return wrapped if wrapped < math.pi / 2 else -math.pi / 2


def voxel_keys(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates of each point."""
    return np.floor(np.asarray(positions, dtype=np.float64) / voxel_size).astype(np.int64)


class KeyCodec:
    """Packs 3-D integer keys (with a one-cell margin) into sortable int64 codes."""

    def __init__(self, keys: np.ndarray):
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        if len(keys) == 0:
            self.origin = np.zeros(3, dtype=np.int64)
            self.dims = np.ones(3, dtype=np.int64)
        else:
            self.origin = keys.min(axis=0) - 1
            self.dims = keys.max(axis=0) - self.origin + 2

    def encode(self, keys: np.ndarray) -> np.ndarray:
        k = np.asarray(keys, dtype=np.int64).reshape(-1, 3) - self.origin
        return (k[:, 0] * self.dims[1] + k[:, 1]) * self.dims[2] + k[:, 2]


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating runs of False then True."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0, *runs]
    return [int(r) for r in runs]


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`rle_encode`."""
    total = int(np.prod(shape))
    if sum(runs) != total:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {total}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"))


def image_to_b64(image: np.ndarray) -> str:
    return base64.b64encode(encode_png(image)).decode("ascii")


def b64_to_image(data: str) -> np.ndarray:
    return decode_png(base64.b64decode(data, validate=True))
