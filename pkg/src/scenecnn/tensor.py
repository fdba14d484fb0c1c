"""Dense NCHW tensors backed by C-contiguous numpy arrays.

A tensor here is simply an ``np.ndarray`` that is C-contiguous (row-major,
last axis fastest).  The helpers below add the few guarantees the rest of the
package relies on: checked shapes, reproducible seeded fills and the
crop/mirror primitive used by augmentation.

All seeded randomness goes through :func:`make_rng`, a Philox
(counter-based) generator keyed by a ``SeedSequence`` built from integer
keys, so streams can be split per (seed, iteration, node, ...) without
sharing state.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


@dataclass(frozen=True)
class Uniform:
    """Seeded uniform fill rule on ``[lo, hi)``."""

    lo: float
    hi: float
    seed: int


Fill = Union[str, float, int, Uniform]


def make_rng(*keys: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of nonnegative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(keys))))


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    strides = [1] * len(shape)
    for axis in range(len(shape) - 2, -1, -1):
        strides[axis] = strides[axis + 1] * shape[axis + 1]
    return tuple(strides)


def linear_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Flat offset of ``index`` in a row-major tensor of ``shape``."""
    if len(index) != len(shape):
        raise IndexError(f"index rank {len(index)} does not match shape rank {len(shape)}")
    for axis, (i, n) in enumerate(zip(index, shape)):
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for axis {axis} with extent {n}")
    return sum(i * s for i, s in zip(index, row_major_strides(shape)))


def _checked_size(shape: Sequence[int]) -> int:
    if any(int(n) < 0 for n in shape):
        raise ShapeError(f"negative extent in shape {tuple(shape)}")
    size = math.prod(int(n) for n in shape)
    if size > sys.maxsize:
        raise OverflowError(f"shape {tuple(shape)} has {size} elements, beyond platform limits")
    return size


def tensor_new(shape: Sequence[int], fill: Fill = "zeros", dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Allocate a tensor of ``shape`` filled by ``fill``.

    ``fill`` is ``"zeros"``, a number (constant fill) or a :class:`Uniform`
    rule.  Uniform fills are bit-reproducible for a given seed and dtype.
    """
    shape = tuple(int(n) for n in shape)
    size = _checked_size(shape)
    if isinstance(fill, Uniform):
        u = make_rng(fill.seed).random(size, dtype=np.float64)
        data = fill.lo + (fill.hi - fill.lo) * u
        return data.astype(dtype).reshape(shape)
    if isinstance(fill, str):
        if fill != "zeros":
            raise ValueError(f"unknown fill rule {fill!r}")
        return np.zeros(shape, dtype=dtype)
    return np.full(shape, fill, dtype=dtype)


_ELEMENTWISE: dict[str, Callable] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def map_zip(a: np.ndarray, b: np.ndarray | None = None, op: str = "add", c: float = 1.0) -> np.ndarray:
    """Elementwise ``add``/``sub``/``mul`` of two same-shape tensors, or unary ``neg``/``scale``."""
    if op == "neg":
        return np.negative(a)
    if op == "scale":
        return a * a.dtype.type(c)
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ValueError(f"{op} needs two operands")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _ELEMENTWISE[op](a, b)


def reshape(a: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = tuple(int(n) for n in new_shape)
    if _checked_size(new_shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {new_shape}")
    return np.ascontiguousarray(a).reshape(new_shape)


def crop_flip(a: np.ndarray, top: int, left: int, h: int, w: int, hflip: bool = False) -> np.ndarray:
    """Crop the ``h``x``w`` window at (top, left) of an NCHW tensor, optionally mirrored left-right."""
    if a.ndim != 4:
        raise ShapeError(f"expected NCHW tensor, got shape {a.shape}")
    H, W = a.shape[2:]
    if top < 0 or left < 0 or h < 1 or w < 1 or top + h > H or left + w > W:
        raise IndexError(f"crop window top={top} left={left} h={h} w={w} outside {H}x{W} image")
    out = a[:, :, top:top + h, left:left + w]
    if hflip:
        out = out[:, :, :, ::-1]
    return np.ascontiguousarray(out)
