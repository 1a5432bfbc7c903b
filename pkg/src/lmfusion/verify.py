"""Randomised equivalence and gradient suites, shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcheck import check_model_grads, random_instance
from .lowrank import FactorSet, cp_reconstruct, lmf_fuse, lmf_fuse_bimodal
from .tensor import append_one, outer_product, tensor_linear

EQUIV_TOL = 1e-9
GRAD_TOL = 1e-6


@dataclass
class EquivalenceCase:
    factors: FactorSet
    inputs: list[np.ndarray]  # each already ends in 1

    def to_dict(self) -> dict:
        return {
            "dims": list(self.factors.dims),
            "rank": self.factors.rank,
            "output_dim": self.factors.output_dim,
            "factors": [F.tolist() for F in self.factors.factors],
            "bias": self.factors.bias.tolist(),
            "inputs": [z.tolist() for z in self.inputs],
        }


def random_case(rng: np.random.Generator, modalities=(2, 3, 4), max_dim=8, max_rank=4,
                max_out=4) -> EquivalenceCase:
    """Factors, bias and inputs uniform on [-1, 1]; dims are before the appended 1."""
    M = int(rng.choice(modalities))
    dims = rng.integers(1, max_dim + 1, M)
    r = int(rng.integers(1, max_rank + 1))
    d_h = int(rng.integers(1, max_out + 1))
    factors = [rng.uniform(-1, 1, (r, d + 1, d_h)) for d in dims]
    bias = rng.uniform(-1, 1, d_h)
    inputs = [append_one(rng.uniform(-1, 1, d)) for d in dims]
    return EquivalenceCase(FactorSet(factors, bias), inputs)


def explicit_path(f: FactorSet, inputs) -> np.ndarray:
    """Reconstruct W, build Z, contract: the materialised reference."""
    return tensor_linear(cp_reconstruct(f), outer_product(inputs))


def corrupt(f: FactorSet, rng: np.random.Generator, amount=1e-3) -> FactorSet:
    """Copy of ``f`` with one factor entry nudged; used to exercise the failure path."""
    factors = [F.copy() for F in f.factors]
    m = int(rng.integers(len(factors)))
    idx = tuple(int(rng.integers(s)) for s in factors[m].shape)
    factors[m][idx] += amount
    return FactorSet(factors, f.bias)


def equivalence_error(case: EquivalenceCase, fused_with: FactorSet | None = None) -> float:
    """max |lmf_fuse - explicit path|; ``fused_with`` swaps in other factors on the fast path."""
    fast = lmf_fuse(fused_with or case.factors, case.inputs)
    ref = explicit_path(case.factors, case.inputs)
    return float(np.max(np.abs(fast - ref)))


def bimodal_gap(case: EquivalenceCase) -> float:
    f = case.factors
    return float(np.max(np.abs(lmf_fuse_bimodal(f, *case.inputs) - lmf_fuse(f, case.inputs))))


def gradient_suite(rng: np.random.Generator, n: int, **kw):
    """Yield ``(instance_index, {param: max rel err})`` for ``n`` random small models."""
    for i in range(n):
        params, xs, y = random_instance(rng, **kw)
        yield i, check_model_grads(params, xs, y)
