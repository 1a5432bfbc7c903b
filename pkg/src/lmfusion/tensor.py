"""Dense tensors and the explicit (tensor-product) fusion path.

All tensors are row-major: the last index varies fastest, so the flat
position of ``(i_1, ..., i_M)`` is ``sum_m i_m * prod_{n > m} d_n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Sequence

import numpy as np

from .errors import OrderTooLarge, ShapeMismatch, SizeTooLarge

DEFAULT_MAX_ORDER = 6
DEFAULT_MAX_SIZE = 10**8


def _frozen(a, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype if dtype is not None else np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DenseTensor:
    """Order-M real tensor with an explicit shape.

    ``data`` may be passed flat (row-major) or already shaped.
    """

    shape: tuple[int, ...]
    data: np.ndarray

    def __init__(self, shape: Sequence[int], data, dtype=np.float64):
        shape = tuple(int(d) for d in shape)
        if len(shape) < 1:
            raise ShapeMismatch("tensor order must be >= 1")
        if any(d < 1 for d in shape):
            raise ShapeMismatch(f"every dimension must be >= 1, got {shape}")
        arr = np.asarray(data, dtype=dtype)
        if arr.size != prod(shape):
            raise ShapeMismatch(
                f"data has {arr.size} entries but shape {shape} needs {prod(shape)}"
            )
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", _frozen(arr.reshape(shape), dtype))

    @classmethod
    def from_array(cls, a) -> DenseTensor:
        a = np.asarray(a)
        return cls(a.shape, a, dtype=a.dtype if a.dtype.kind == "f" else np.float64)

    @property
    def order(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __getitem__(self, index):
        return self.data[index]


@dataclass(frozen=True)
class ModalVector:
    """One modality's representation z_m."""

    values: np.ndarray
    modality_index: int = 1

    def __init__(self, values, modality_index: int = 1):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ShapeMismatch("a modal vector must be 1-D with length >= 1")
        if modality_index < 1:
            raise ValueError("modality_index is 1-based")
        object.__setattr__(self, "values", _frozen(arr))
        object.__setattr__(self, "modality_index", int(modality_index))

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class WeightTensor:
    """Full fusion weight: ``d_h`` order-M slices stacked on axis 0, plus bias."""

    weights: np.ndarray
    bias: np.ndarray = field(default=None)

    def __init__(self, weights, bias=None):
        w = np.asarray(weights)
        if w.dtype.kind != "f":
            w = w.astype(np.float64)
        if w.ndim < 2:
            raise ShapeMismatch("weights need a leading output axis and >= 1 tensor axis")
        d_h = w.shape[0]
        b = np.zeros(d_h, dtype=w.dtype) if bias is None else np.asarray(bias, dtype=w.dtype)
        if b.shape != (d_h,):
            raise ShapeMismatch(f"bias length {b.shape} does not match {d_h} slices")
        object.__setattr__(self, "weights", _frozen(w, w.dtype))
        object.__setattr__(self, "bias", _frozen(b, w.dtype))

    @classmethod
    def from_slices(cls, slices: Sequence[DenseTensor], bias) -> WeightTensor:
        shapes = {s.shape for s in slices}
        if len(shapes) != 1:
            raise ShapeMismatch(f"slices disagree on shape: {sorted(shapes)}")
        return cls(np.stack([s.data for s in slices]), bias)

    @property
    def output_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def slice_shape(self) -> tuple[int, ...]:
        return self.weights.shape[1:]

    @property
    def slices(self) -> list[DenseTensor]:
        return [DenseTensor(self.slice_shape, w) for w in self.weights]


def ravel_index(index: Sequence[int], shape: Sequence[int]) -> int:
    flat = 0
    for i, d in zip(index, shape, strict=True):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of range for {tuple(shape)}")
        flat = flat * d + i
    return flat


def unravel_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    if not 0 <= flat < prod(shape):
        raise IndexError(f"flat index {flat} out of range for {tuple(shape)}")
    out = []
    for d in reversed(shape):
        flat, i = divmod(flat, d)
        out.append(i)
    return tuple(reversed(out))


def check_explicit_size(
    shape: Sequence[int],
    max_order: int = DEFAULT_MAX_ORDER,
    max_size: int = DEFAULT_MAX_SIZE,
) -> None:
    """Fail fast before materialising an explicit tensor of ``shape``."""
    if len(shape) > max_order:
        raise OrderTooLarge(f"order {len(shape)} exceeds maximum {max_order}")
    n = prod(shape)
    if n > max_size:
        raise SizeTooLarge(f"{n} entries exceeds maximum {max_size}")


def _values(z) -> np.ndarray:
    if isinstance(z, ModalVector):
        return z.values
    return np.asarray(z)


def append_one(z):
    """Append the constant 1 to the end of a modal vector.

    Works on a :class:`ModalVector`, a 1-D array, or a batch ``(B, d)``
    (the 1 is appended along the last axis).
    """
    if isinstance(z, ModalVector):
        return ModalVector(np.append(z.values, 1.0), z.modality_index)
    a = np.asarray(z)
    if a.dtype.kind != "f":
        a = a.astype(np.float64)
    if a.shape[-1] < 1:
        raise ShapeMismatch("cannot append to an empty vector")
    ones = np.ones(a.shape[:-1] + (1,), dtype=a.dtype)
    return np.concatenate([a, ones], axis=-1)


def outer_product(
    inputs: Sequence,
    max_order: int = DEFAULT_MAX_ORDER,
    max_size: int = DEFAULT_MAX_SIZE,
) -> DenseTensor:
    """Z = z_1 (x) z_2 (x) ... (x) z_M as a :class:`DenseTensor`."""
    vecs = [_values(z) for z in inputs]
    if not vecs:
        raise ShapeMismatch("outer product needs at least one vector")
    if any(v.ndim != 1 or v.size < 1 for v in vecs):
        raise ShapeMismatch("outer product inputs must be nonempty 1-D vectors")
    shape = tuple(v.size for v in vecs)
    check_explicit_size(shape, max_order, max_size)
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return DenseTensor(shape, out, dtype=out.dtype)


def tensor_linear(w: WeightTensor, z: DenseTensor) -> np.ndarray:
    """h_k = <W_k, Z> + b_k for every output slice k."""
    if w.slice_shape != z.shape:
        raise ShapeMismatch(f"weight slices {w.slice_shape} vs input tensor {z.shape}")
    return w.weights.reshape(w.output_dim, -1) @ z.flat + w.bias


# Batched explicit path, used for benchmarking the materialised fusion.


def outer_product_batch(zs: Sequence[np.ndarray]) -> np.ndarray:
    """Per-sample outer products: list of ``(B, d_m)`` -> ``(B, d_1, ..., d_M)``."""
    out = zs[0]
    for z in zs[1:]:
        out = out[..., None] * z.reshape((z.shape[0],) + (1,) * (out.ndim - 1) + (z.shape[1],))
    return out


def explicit_forward(weights: np.ndarray, bias: np.ndarray, zs: Sequence[np.ndarray]):
    """Explicit fusion for a batch; returns ``(h, Z)`` with Z kept for backward."""
    check_explicit_size(weights.shape[1:])
    Z = outer_product_batch(zs)
    h = Z.reshape(Z.shape[0], -1) @ weights.reshape(weights.shape[0], -1).T + bias
    return h, Z


def explicit_backward(weights: np.ndarray, zs: Sequence[np.ndarray], Z: np.ndarray, upstream: np.ndarray):
    """Gradients of the explicit path: ``(dW, db, [dz_m])``.

    ``dz_m`` contracts dL/dZ against the outer product of every other input.
    """
    B = upstream.shape[0]
    d_h = weights.shape[0]
    dW = (upstream.T @ Z.reshape(B, -1)).reshape(weights.shape)
    db = upstream.sum(axis=0)
    dZ = (upstream @ weights.reshape(d_h, -1)).reshape(Z.shape)
    dzs = []
    M = len(zs)
    for m in range(M):
        g = dZ
        # contract trailing modalities first so axis positions stay valid
        for n in reversed(range(M)):
            if n == m:
                continue
            zn = zs[n].reshape((B,) + (1,) * n + (zs[n].shape[1],) + (1,) * (g.ndim - 2 - n))
            g = (g * zn).sum(axis=n + 1, keepdims=True)
        dzs.append(g.reshape(B, -1))
    return dW, db, dzs
