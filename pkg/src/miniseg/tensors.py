"""Dense 4-D tensor helpers: shapes, same-padding, elementwise maps.

Every feature map in the engine is a numpy array laid out
(batch, channel, row, column), C-contiguous, in one of two precisions:
float32 ("single") for production and float64 ("double") for the
gradient-check test mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DTYPES = {"single": np.float32, "double": np.float64}

# refuse absurd allocations before numpy attempts them
_MAX_ELEMENTS = 2**48


@dataclass(frozen=True)
class Shape:
    """Dimensions of a 4-D tensor, all fields >= 1."""

    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("batch", "channels", "height", "width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ShapeError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise ShapeError(f"{name} must be >= 1, got {value}")
        if self.count > _MAX_ELEMENTS:
            raise ShapeError(f"element count {self.count} exceeds supported size")

    @property
    def count(self) -> int:
        return int(self.batch) * int(self.channels) * int(self.height) * int(self.width)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.batch, self.channels, self.height, self.width)


def precision_of(x: np.ndarray) -> str:
    for name, dtype in DTYPES.items():
        if x.dtype == dtype:
            return name
    raise ShapeError(f"unsupported dtype {x.dtype}")


def tensor_new(shape, fill: float = 0.0, precision: str = "single") -> np.ndarray:
    """Allocate a (batch, channel, row, column) tensor filled with a constant."""
    if not isinstance(shape, Shape):
        shape = Shape(*shape)
    return np.full(shape.as_tuple(), fill, dtype=DTYPES[precision])


def conv_output_size(size: int, stride: int) -> int:
    """Spatial output size of a same-padded convolution: ceil(size / stride)."""
    return -(-size // stride)


def pad_amounts(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding so output size is ceil(size / stride).

    Padding splits evenly; the odd leftover row/column goes after (bottom/right).
    """
    out = conv_output_size(size, stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return before, total - before


def pad_same(x: np.ndarray, kernel: int, stride: int = 1) -> np.ndarray:
    """Zero-pad spatial dims so a kernel x kernel conv keeps ceil(size/stride)."""
    if kernel % 2 == 0:
        raise ShapeError(f"even kernel size {kernel} is unsupported")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    top, bottom = pad_amounts(x.shape[2], kernel, stride)
    left, right = pad_amounts(x.shape[3], kernel, stride)
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def map_elementwise(x: np.ndarray, f) -> np.ndarray:
    """Apply a scalar function to every element, keeping shape and dtype."""
    return np.vectorize(f, otypes=[x.dtype])(x)
