"""Low-rank multimodal fusion with modality-specific factors.

Each modality m owns one order-3 factor of shape ``(r, d_m + 1, d_h)``; the
rank axis comes first. The fused output is

    h = sum_i  prod_m (z_m^T F_m[i])  + b

where the product over m is elementwise over the ``d_h`` outputs. Neither
the input tensor Z nor the weight tensor W is ever built on this path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import FusionConfig
from .errors import DimensionMismatch, MissingAppendedOne, ShapeMismatch
from .tensor import (
    DEFAULT_MAX_ORDER,
    DEFAULT_MAX_SIZE,
    ModalVector,
    WeightTensor,
    check_explicit_size,
)


@dataclass(frozen=True)
class FactorSet:
    factors: tuple[np.ndarray, ...]
    bias: np.ndarray

    def __init__(self, factors: Sequence, bias=None):
        fs = []
        for F in factors:
            a = np.array(F, copy=True)
            if a.dtype.kind != "f":
                a = a.astype(np.float64)
            fs.append(a)
        if len(fs) < 2:
            raise ShapeMismatch(f"need at least 2 modalities, got {len(fs)}")
        if any(F.ndim != 3 for F in fs):
            raise ShapeMismatch("each factor must have shape (rank, d_m + 1, d_h)")
        ranks = {F.shape[0] for F in fs}
        outs = {F.shape[2] for F in fs}
        if len(ranks) != 1 or len(outs) != 1:
            raise ShapeMismatch(
                f"factors disagree on rank/output dim: {[F.shape for F in fs]}"
            )
        d_h = outs.pop()
        dtype = fs[0].dtype
        b = np.zeros(d_h, dtype=dtype) if bias is None else np.array(bias, dtype=dtype)
        if b.shape != (d_h,):
            raise ShapeMismatch(f"bias shape {b.shape}, expected ({d_h},)")
        for a in fs:
            a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "factors", tuple(fs))
        object.__setattr__(self, "bias", b)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.factors[0].shape[2]

    @property
    def n_modalities(self) -> int:
        return len(self.factors)

    @property
    def dims(self) -> tuple[int, ...]:
        """Per-modality sizes before the appended 1."""
        return tuple(F.shape[1] - 1 for F in self.factors)

    @property
    def dtype(self):
        return self.factors[0].dtype

    def with_modality(self, factor) -> FactorSet:
        return FactorSet(self.factors + (factor,), self.bias)


def _inputs(f: FactorSet, inputs: Sequence, strict: bool) -> list[np.ndarray]:
    if len(inputs) != f.n_modalities:
        raise DimensionMismatch(f"expected {f.n_modalities} inputs, got {len(inputs)}")
    zs = []
    for m, (z, F) in enumerate(zip(inputs, f.factors)):
        a = z.values if isinstance(z, ModalVector) else np.asarray(z)
        if a.ndim not in (1, 2) or a.shape[-1] != F.shape[1]:
            raise DimensionMismatch(
                f"modality {m + 1}: input length {a.shape[-1:]} vs factor {F.shape[1]} "
                "(inputs must already carry the appended 1)"
            )
        if strict and not np.all(a[..., -1] == 1):
            raise MissingAppendedOne(f"modality {m + 1}: last entry is not 1")
        zs.append(a)
    if len({a.shape[:-1] for a in zs}) != 1:
        raise DimensionMismatch("inputs mix batched and unbatched shapes")
    return zs


def project(F: np.ndarray, z: np.ndarray) -> np.ndarray:
    """z^T F[i] for every rank slice: ``(r, d_h)`` or ``(r, B, d_h)`` for a batch."""
    return np.matmul(z, F)


def fuse_arrays(factors: Sequence[np.ndarray], bias: np.ndarray, zs: Sequence[np.ndarray]) -> np.ndarray:
    """Unchecked fusion kernel; scratch is one ``(r, [B,] d_h)`` buffer per modality."""
    acc = project(factors[0], zs[0])
    for F, z in zip(factors[1:], zs[1:]):
        acc *= project(F, z)
    return acc.sum(axis=0) + bias


def lmf_fuse(f: FactorSet, inputs: Sequence, strict: bool = True) -> np.ndarray:
    """Fuse M modal vectors (each already ending in 1) through the low-rank factors.

    Inputs may be single vectors ``(d_m + 1,)`` or batches ``(B, d_m + 1)``;
    the result has shape ``(d_h,)`` or ``(B, d_h)`` accordingly.
    """
    zs = _inputs(f, inputs, strict)
    return fuse_arrays(f.factors, f.bias, zs)


def lmf_fuse_bimodal(f: FactorSet, z_a, z_v, strict: bool = True) -> np.ndarray:
    """Two-modality form that sums the rank slices *before* the elementwise product.

    Matches :func:`lmf_fuse` at rank 1 only; for rank >= 2 it is a
    different function (cross-rank terms survive).
    """
    if f.n_modalities != 2:
        raise DimensionMismatch(f"bimodal fusion needs 2 modalities, got {f.n_modalities}")
    za, zv = _inputs(f, [z_a, z_v], strict)
    Fa, Fv = f.factors
    return (za @ Fa.sum(axis=0)) * (zv @ Fv.sum(axis=0)) + f.bias


def cp_reconstruct(
    f: FactorSet,
    max_order: int = DEFAULT_MAX_ORDER,
    max_size: int = DEFAULT_MAX_SIZE,
) -> WeightTensor:
    """Materialise W = sum_i F_1[i] (x) ... (x) F_M[i], outer product over the non-shared axes."""
    shape = tuple(F.shape[1] for F in f.factors)
    check_explicit_size(shape, max_order, max_size)
    W = None
    for i in range(f.rank):
        term = f.factors[0][i]  # (d_1+1, d_h)
        for F in f.factors[1:]:
            term = term[..., None, :] * F[i]
        W = term if W is None else W + term
    # (d_1+1, ..., d_M+1, d_h) -> (d_h, d_1+1, ..., d_M+1)
    return WeightTensor(np.moveaxis(W, -1, 0), f.bias)


def factor_std(rank: int, width: int) -> float:
    return (rank * width) ** -0.5


def init_factors(cfg: FusionConfig, seed=None) -> FactorSet:
    """Normal factors with std ``(r (d_m + 1))**-0.5`` per modality, zero bias."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    r, d_h = cfg.rank, cfg.output_dim
    factors = []
    for d in cfg.dims:
        std = factor_std(r, d + 1)
        factors.append(rng.normal(0.0, std, size=(r, d + 1, d_h)).astype(cfg.dtype))
    return FactorSet(factors, np.zeros(d_h, dtype=cfg.dtype))
