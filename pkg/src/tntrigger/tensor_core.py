"""Small dense tensors and pairwise contraction.

Storage is a flat float64 buffer in row-major order.  Contractions are
strictly pairwise with explicit axis lists; there is no einsum parser.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericError


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    strides = []
    step = 1
    for n in reversed(shape):
        strides.append(step)
        step *= n
    return tuple(reversed(strides))


@dataclass(frozen=True, eq=False)
class DenseTensor:
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if any(n < 1 for n in shape):
            raise DimensionError(f"axis lengths must be >= 1, got {shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        if data.size != prod(shape):
            raise DimensionError(
                f"buffer of length {data.size} does not fit shape {shape}")
        if not np.all(np.isfinite(data)):
            raise NumericError("tensor contains non-finite entries")
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array) -> DenseTensor:
        array = np.asarray(array, dtype=np.float64)
        shape = array.shape if array.ndim else (1,)
        return cls(shape, array.reshape(-1))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def strides(self) -> tuple[int, ...]:
        return row_major_strides(self.shape)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __getitem__(self, index: Sequence[int]) -> float:
        offset = sum(i * s for i, s in zip(index, self.strides))
        return float(self.data[offset])

    def reshape(self, shape: Sequence[int]) -> DenseTensor:
        return DenseTensor(tuple(shape), self.data)

    def scale(self, alpha: float) -> DenseTensor:
        return DenseTensor(self.shape, alpha * self.data)

    def transpose(self, axes: Sequence[int]) -> DenseTensor:
        return DenseTensor.from_array(np.transpose(self.array(), axes))


def _check_axes(t: DenseTensor, axes: Sequence[int], name: str) -> list[int]:
    out = []
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise IndexError(f"axis {ax} out of range for {name} with shape {t.shape}")
        out.append(ax % t.ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {name} axes {list(axes)}")
    return out


def contract(a: DenseTensor, axes_a: Sequence[int],
             b: DenseTensor, axes_b: Sequence[int]) -> DenseTensor:
    """Sum over paired axes of ``a`` and ``b``.

    The result carries the free axes of ``a`` in order followed by the free
    axes of ``b``.  Contracting every axis gives a shape ``(1,)`` tensor.
    """
    if len(axes_a) != len(axes_b):
        raise DimensionError(
            f"axis lists differ in length: {list(axes_a)} vs {list(axes_b)}")
    ax_a = _check_axes(a, axes_a, "a")
    ax_b = _check_axes(b, axes_b, "b")
    for i, j in zip(ax_a, ax_b):
        if a.shape[i] != b.shape[j]:
            raise DimensionError(
                f"cannot pair axis {i} of shape {a.shape} with axis {j} of shape {b.shape}")
    out = np.tensordot(a.array(), b.array(), axes=(ax_a, ax_b))
    return DenseTensor.from_array(out)


def outer(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    return DenseTensor(a.shape + b.shape, np.multiply.outer(a.data, b.data).reshape(-1))


def norm_sq(a: DenseTensor) -> float:
    return float(np.dot(a.data, a.data))
