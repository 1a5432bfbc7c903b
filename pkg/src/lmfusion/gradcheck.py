"""Central finite-difference checks for the hand-written gradients."""

from __future__ import annotations

import numpy as np

from .config import FusionConfig
from .model import ModelParams, loss_and_grads, model_forward

STEP = 1e-5
# The loss is piecewise quadratic in any single parameter, so central
# differences have no truncation error and only roundoff (~eps * loss / step)
# remains. Evaluating the oracle in extended precision pushes that below
# 1e-13 * loss; the floor only guards 0/0 for exactly-zero gradients.
ORACLE_DTYPE = np.longdouble
REL_FLOOR = 1e-12


def relative_error(analytic, numeric, floor=REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, a: np.ndarray, step=STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``a`` (perturbed in place)."""
    g = np.zeros_like(a)
    flat = a.reshape(-1)
    gflat = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        up = f()
        flat[j] = orig - step
        down = f()
        flat[j] = orig
        gflat[j] = (up - down) / (2 * step)
    return g


def random_instance(rng: np.random.Generator, max_dim=6, max_rank=3, modalities=(2, 3), max_out=3):
    """A small random model plus a batch of inputs and targets."""
    M = int(rng.choice(modalities))
    dims = tuple(int(d) for d in rng.integers(1, max_dim + 1, M))
    raw = [int(d) for d in rng.integers(1, max_dim + 1, M)]
    r = int(rng.integers(1, max_rank + 1))
    d_h = int(rng.integers(1, max_out + 1))
    target_dim = int(rng.integers(1, max_out + 1))
    cfg = FusionConfig(dims, r, d_h, seed=int(rng.integers(2**31)))
    params = ModelParams.init(cfg, raw, target_dim, activation="relu")
    # nonzero biases so no layer sits exactly at a ReLU kink
    for e in params.encoders:
        e.b1[:] = rng.normal(0, 0.5, e.b1.shape)
        e.b2[:] = rng.normal(0.5, 0.5, e.b2.shape)
    params.fusion_bias[:] = rng.normal(0, 0.5, params.fusion_bias.shape)
    if params.head_b is not None:
        params.head_b[:] = rng.normal(0, 0.5, params.head_b.shape)
    B = int(rng.integers(1, 5))
    xs = [rng.normal(0, 1, (B, n)) for n in raw]
    y = rng.normal(0, 1, (B, target_dim))
    return params, xs, y


def check_model_grads(params: ModelParams, xs, y, step=STEP, oracle_dtype=ORACLE_DTYPE) -> dict[str, float]:
    """Max relative error per parameter array, analytic vs central differences.

    The analytic gradient is computed on ``params`` as given; the finite
    differences run on an ``oracle_dtype`` copy of the model and data.
    """
    _, rec = loss_and_grads(params, xs, y)
    hi = params.copy(oracle_dtype)
    xs_hi = [np.asarray(x, dtype=oracle_dtype) for x in xs]
    y_hi = np.atleast_2d(np.asarray(y, dtype=oracle_dtype))

    def loss():
        d = model_forward(hi, xs_hi) - y_hi
        return np.mean(d * d)

    errors = {}
    for name, a in hi.named_arrays().items():
        num = numeric_grad(loss, a, step)
        errors[name] = float(relative_error(rec.params[name], num).max())
    return errors
