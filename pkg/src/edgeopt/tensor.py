"""Tensors and per-tensor affine quantization parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeMismatch


class DType(str, Enum):
    F32 = "f32"
    U8 = "u8"
    # Pre-scaled bias of quantized kernels; always carries QuantParams(s_in*s_w, 0).
    I32 = "i32"

    @property
    def numpy(self) -> np.dtype:
        return np.dtype({"f32": "<f4", "u8": "u1", "i32": "<i4"}[self.value])


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        if not isinstance(self.zero_point, (int, np.integer)):
            raise TypeError("zero_point must be an integer")
        object.__setattr__(self, "zero_point", int(self.zero_point))

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "zero_point": self.zero_point}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]))


class Tensor:
    """Immutable n-d array with an explicit dtype tag.

    ``data`` is stored shaped (row-major) and marked read-only.  U8 and I32
    tensors must carry :class:`QuantParams`; F32 tensors must not.
    """

    __slots__ = ("_data", "dtype", "quant")

    def __init__(self, data, dtype: DType | str = DType.F32, quant: Optional[QuantParams] = None,
                 shape: Optional[Sequence[int]] = None):
        dtype = DType(dtype)
        arr = np.array(data, dtype=dtype.numpy, copy=True)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape, dtype=np.int64)) != arr.size:
                raise ShapeMismatch(f"shape {shape} does not match {arr.size} elements")
            arr = arr.reshape(shape)
        if any(s <= 0 for s in arr.shape):
            raise ShapeMismatch(f"all dims must be positive, got {arr.shape}")
        if dtype is DType.F32 and quant is not None:
            raise ValueError("F32 tensors carry no quantization parameters")
        if dtype is not DType.F32 and quant is None:
            raise ValueError(f"{dtype.value} tensors require quantization parameters")
        arr.setflags(write=False)
        self._data = arr
        self.dtype = dtype
        self.quant = quant

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def nbytes(self) -> int:
        return int(self._data.nbytes)

    def dequantize(self) -> np.ndarray:
        if self.dtype is DType.F32:
            return self._data
        q = self.quant
        return (q.scale * (self._data.astype(np.float64) - q.zero_point)).astype(np.float32)

    def bit_equal(self, other: "Tensor") -> bool:
        return (
            isinstance(other, Tensor)
            and self.dtype is other.dtype
            and self.quant == other.quant
            and self.shape == other.shape
            and self._data.tobytes() == other._data.tobytes()
        )

    def __repr__(self):
        q = f", quant={self.quant}" if self.quant else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value}{q})"


def f32(data, shape=None) -> Tensor:
    return Tensor(data, DType.F32, shape=shape)
