"""
Tensor substrate shared by every other module.

Tensors are `torch.Tensor` values; the helpers here add the shape checks and
conventions the rest of the code relies on (layer norm epsilon 1e-5, exact GELU,
finite outputs). Random streams are numpy Philox generators keyed by
(seed, stream id), so a draw depends on those two integers only.

Child stream derivation::

    child(i).stream_id = splitmix64(stream_id ^ splitmix64(i + 1))

with the usual splitmix64 finaliser (constants 0x9E3779B97F4A7C15,
0xBF58476D1CE4E5B9, 0x94D049BB133111EB).
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from utils import NumericsError, ShapeError, ValidationError, format_shape

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass
class RngStream:
    """
    A single-owner random stream. Identical (seed, stream_id) pairs give identical
    sequences; parallel work takes `child(i)` streams instead of sharing one.
    """
    seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0 <= self.seed <= MASK64 and 0 <= self.stream_id <= MASK64):
            raise ValidationError(f"seed and stream id must be unsigned 64-bit, got {self.seed}, {self.stream_id}")
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, splitmix64(self.stream_id ^ splitmix64(index + 1)))

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self.generator.standard_normal(tuple(shape))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        # high is exclusive
        return self.generator.integers(low, high, size)


@contextmanager
def precision(dtype: torch.dtype):
    """Switches torch's default dtype inside the block, e.g. float64 for gradient checks."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("shape must not be empty")
    if any(d < 1 for d in shape):
        raise ShapeError(f"every dimension must be >= 1, got {format_shape(shape)}")
    return shape

def check_finite(x: torch.Tensor, what: str, index: int | None = None) -> torch.Tensor:
    if not torch.isfinite(x).all():
        where = f" at step {index}" if index is not None else ""
        raise NumericsError(f"{what} produced non-finite values{where}", index)
    return x


def sample_gaussian(rng: RngStream, shape: Sequence[int], dtype: torch.dtype | None = None) -> torch.Tensor:
    """
    i.i.d. standard normal samples drawn from `rng`.

    Args:
        rng (RngStream): the stream to draw from; advances it.
        shape (Sequence[int]): non-empty, every dimension >= 1.
        dtype (torch.dtype, optional): defaults to torch's current default dtype.

    Returns:
        torch.Tensor: the samples.

    Raises:
        ShapeError: on an empty shape or a zero dimension.
    """
    shape = check_shape(shape)
    return torch.from_numpy(rng.normal(shape)).to(dtype or torch.get_default_dtype())


def finite_diff_grad(f: Callable[[torch.Tensor], float | torch.Tensor], x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """
    Central-difference gradient of a scalar function, one coordinate at a time.

    Meant as an independent oracle for autograd; run it in float64.

    Raises:
        ValidationError: if eps is not positive.
        NumericsError: if f returns a non-finite value at any sample point.
    """
    if not eps > 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    if x.dtype != torch.float64:
        logger.warning(f"finite_diff_grad called with {x.dtype}; differences will be noisy")
    base = x.detach().clone().reshape(-1)
    grad = torch.zeros_like(base)
    for i in range(base.numel()):
        original = base[i].item()
        base[i] = original + eps
        upper = float(f(base.reshape(x.shape)))
        base[i] = original - eps
        lower = float(f(base.reshape(x.shape)))
        base[i] = original
        if not (math.isfinite(upper) and math.isfinite(lower)):
            raise NumericsError(f"f is not finite around coordinate {i}", i)
        grad[i] = (upper - lower) / (2 * eps)
    return grad.reshape(x.shape)


# core ops

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: cannot multiply {format_shape(a.shape)} by {format_shape(b.shape)}")
    return a @ b

def transpose(x: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    return x.transpose(dim0, dim1)

def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    shape = tuple(int(d) for d in shape)
    known = math.prod(d for d in shape if d != -1)
    fits = known > 0 and (x.numel() % known == 0 if -1 in shape else known == x.numel())
    if not fits or shape.count(-1) > 1:
        raise ShapeError(f"reshape: {format_shape(x.shape)} has {x.numel()} elements, cannot become {shape}")
    return x.reshape(shape)

def slice_axis(x: torch.Tensor, axis: int, start: int, stop: int) -> torch.Tensor:
    size = x.shape[axis]
    if not 0 <= start < stop <= size:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {format_shape(x.shape)}")
    return x.narrow(axis, start, stop - start)

def concat(tensors: Sequence[torch.Tensor], axis: int) -> torch.Tensor:
    shapes = [list(t.shape) for t in tensors]
    ref = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis % len(ref)):
            raise ShapeError("concat: incompatible shapes " + ", ".join(format_shape(s) for s in shapes))
    return torch.cat(list(tensors), dim=axis)

def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {format_shape(a.shape)} vs {format_shape(b.shape)}")
    return a + b

def sub(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {format_shape(a.shape)} vs {format_shape(b.shape)}")
    return a - b

def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {format_shape(a.shape)} vs {format_shape(b.shape)}")
    return a * b

def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="none")

def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None, bias: torch.Tensor | None = None,
               eps: float = LN_EPS) -> torch.Tensor:
    """Normalises the last axis to zero mean and unit variance, then applies the optional scale and shift."""
    size = x.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and tuple(p.shape) != (size,):
            raise ShapeError(f"layer_norm: {name} {format_shape(p.shape)} does not match last axis of {format_shape(x.shape)}")
    return F.layer_norm(x, (size,), weight, bias, eps)

def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=axis)
