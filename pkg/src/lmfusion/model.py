"""Encoders + low-rank fusion + optional affine head, with hand-written reverse mode.

Every layer's forward returns a small cache; the matching backward consumes
it and returns gradients keyed by parameter name. Batches are ``(B, ...)``
arrays throughout; single vectors are promoted to a batch of one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import FusionConfig, component_seed
from .errors import NonFiniteLoss, ShapeMismatch
from .lowrank import FactorSet, _inputs, init_factors, project
from .tensor import append_one

log = logging.getLogger(__name__)


def _relu(a):
    return np.maximum(a, 0.0)


ACTIVATIONS = {
    # name: (f(pre), f'(pre, out))
    "relu": (_relu, lambda pre, out: (pre > 0).astype(pre.dtype)),
    "tanh": (np.tanh, lambda pre, out: 1.0 - out * out),
    "identity": (lambda a: a, lambda pre, out: np.ones_like(pre)),
}


@dataclass
class EncoderParams:
    """Two affine layers, ``z = act(W2 act(W1 x + b1) + b2)``."""

    W1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray
    W2: np.ndarray  # (out_dim, hidden)
    b2: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        h, _ = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[1] != h or self.b2.shape != (self.W2.shape[0],):
            raise ShapeMismatch(
                f"encoder layers do not chain: W1 {self.W1.shape}, b1 {self.b1.shape}, "
                f"W2 {self.W2.shape}, b2 {self.b2.shape}"
            )

    @classmethod
    def init(cls, in_dim, out_dim, hidden=None, activation="relu", rng=None, dtype=np.float64):
        rng = np.random.default_rng(rng)
        hidden = 2 * out_dim if hidden is None else hidden
        W1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), (hidden, in_dim)).astype(dtype)
        W2 = rng.normal(0.0, np.sqrt(2.0 / hidden), (out_dim, hidden)).astype(dtype)
        return cls(W1, np.zeros(hidden, dtype), W2, np.zeros(out_dim, dtype), activation)

    @classmethod
    def zeros(cls, in_dim, out_dim, hidden=None, activation="relu"):
        hidden = 2 * out_dim if hidden is None else hidden
        return cls(np.zeros((hidden, in_dim)), np.zeros(hidden),
                   np.zeros((out_dim, hidden)), np.zeros(out_dim), activation)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def _encoder_forward(p: EncoderParams, X: np.ndarray):
    if X.shape[-1] != p.in_dim:
        raise ShapeMismatch(f"encoder expects input dim {p.in_dim}, got {X.shape[-1]}")
    act, _ = ACTIVATIONS[p.activation]
    a1 = X @ p.W1.T + p.b1
    h1 = act(a1)
    a2 = h1 @ p.W2.T + p.b2
    z = act(a2)
    return z, (X, a1, h1, a2, z)


def _encoder_backward(p: EncoderParams, cache, dz: np.ndarray) -> dict[str, np.ndarray]:
    X, a1, h1, a2, z = cache
    _, dact = ACTIVATIONS[p.activation]
    da2 = dz * dact(a2, z)
    dh1 = da2 @ p.W2
    da1 = dh1 * dact(a1, h1)
    return {"W1": da1.T @ X, "b1": da1.sum(0), "W2": da2.T @ h1, "b2": da2.sum(0)}


def encoder_forward(p: EncoderParams, x) -> np.ndarray:
    """Map raw features ``(in_dim,)`` or ``(B, in_dim)`` to the modal representation."""
    return _encoder_forward(p, np.asarray(x))[0]


@dataclass
class GradientRecord:
    """Gradients keyed by parameter name, plus dL/dz_m for each modality.

    ``inputs[m]`` excludes the appended constant: that coordinate has no
    input gradient.
    """

    params: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: list[np.ndarray] = field(default_factory=list)

    def __getitem__(self, name):
        return self.params[name]


def _fuse_forward(factors, bias, zs):
    P = [project(F, z) for F, z in zip(factors, zs)]  # each (r, B, d_h)
    acc = P[0].copy()
    for p in P[1:]:
        acc *= p
    return acc.sum(axis=0) + bias, P


def _fuse_backward(factors, zs, P, upstream):
    """dL/dF_m, dL/db, dL/dz_m (full d_m + 1 columns) for a batch."""
    M = len(P)
    # products over all modalities except m, without dividing
    prefix = [None] * M
    suffix = [None] * M
    run = np.ones_like(P[0])
    for m in range(M):
        prefix[m] = run
        run = run * P[m]
    run = np.ones_like(P[0])
    for m in reversed(range(M)):
        suffix[m] = run
        run = run * P[m]
    dF, dz = [], []
    for m in range(M):
        dP = upstream * prefix[m] * suffix[m]  # (r, B, d_h)
        dF.append(np.matmul(zs[m].T, dP))  # (r, d_m+1, d_h)
        dz.append(np.matmul(dP, factors[m].transpose(0, 2, 1)).sum(axis=0))
    return dF, upstream.sum(axis=0), dz


def fuse_backward(f: FactorSet, inputs: Sequence, upstream, strict: bool = True) -> GradientRecord:
    """Reverse-mode gradients of :func:`lmf_fuse` given dL/dh = ``upstream``."""
    zs = _inputs(f, inputs, strict)
    single = zs[0].ndim == 1
    zs = [np.atleast_2d(z) for z in zs]
    g = np.atleast_2d(np.asarray(upstream, dtype=f.dtype))
    if g.shape != (zs[0].shape[0], f.output_dim):
        raise ShapeMismatch(f"upstream shape {np.shape(upstream)} vs output dim {f.output_dim}")
    _, P = _fuse_forward(f.factors, f.bias, zs)
    dF, db, dz = _fuse_backward(f.factors, zs, P, g)
    rec = GradientRecord({f"factor.{m}": d for m, d in enumerate(dF)} | {"fusion_bias": db})
    rec.inputs = [d[0, :-1] if single else d[:, :-1] for d in dz]
    return rec


@dataclass
class ModelParams:
    """All trainable arrays of the full model. Mutable; the optimiser updates in place."""

    encoders: list[EncoderParams]
    factors: list[np.ndarray]
    fusion_bias: np.ndarray
    head_W: np.ndarray | None = None
    head_b: np.ndarray | None = None

    def __post_init__(self):
        if len(self.encoders) != len(self.factors):
            raise ShapeMismatch("one encoder per modality")
        for m, (e, F) in enumerate(zip(self.encoders, self.factors)):
            if e.out_dim + 1 != F.shape[1]:
                raise ShapeMismatch(
                    f"modality {m}: encoder output {e.out_dim} + 1 != factor width {F.shape[1]}"
                )
        if (self.head_W is None) != (self.head_b is None):
            raise ShapeMismatch("head weight and bias must both be set or both be None")

    @classmethod
    def init(cls, cfg: FusionConfig, raw_dims, target_dim=None, hidden=None, activation="relu",
             seed=None) -> ModelParams:
        ss = component_seed(cfg.seed if seed is None else seed, "init")
        enc_ss, fac_ss, head_ss = ss.spawn(3)
        enc_rngs = [np.random.default_rng(s) for s in enc_ss.spawn(len(raw_dims))]
        encoders = [
            EncoderParams.init(n, d, hidden, activation, rng, cfg.dtype)
            for n, d, rng in zip(raw_dims, cfg.dims, enc_rngs)
        ]
        fs = init_factors(cfg, np.random.default_rng(fac_ss))
        target_dim = cfg.output_dim if target_dim is None else target_dim
        head_W = head_b = None
        if target_dim != cfg.output_dim:
            rng = np.random.default_rng(head_ss)
            head_W = rng.normal(0, cfg.output_dim ** -0.5, (target_dim, cfg.output_dim)).astype(cfg.dtype)
            head_b = np.zeros(target_dim, cfg.dtype)
        return cls(encoders, [F.copy() for F in fs.factors], fs.bias.copy(), head_W, head_b)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[0]

    def factor_set(self) -> FactorSet:
        return FactorSet(self.factors, self.fusion_bias)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for m, e in enumerate(self.encoders):
            for k, a in e.arrays().items():
                out[f"encoder.{m}.{k}"] = a
        for m, F in enumerate(self.factors):
            out[f"factor.{m}"] = F
        out["fusion_bias"] = self.fusion_bias
        if self.head_W is not None:
            out["head.W"] = self.head_W
            out["head.b"] = self.head_b
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.named_arrays().values())

    def copy(self, dtype=None) -> ModelParams:
        def cp(a):
            if a is None:
                return None
            return a.copy() if dtype is None else a.astype(dtype)

        return ModelParams(
            [EncoderParams(cp(e.W1), cp(e.b1), cp(e.W2), cp(e.b2), e.activation)
             for e in self.encoders],
            [cp(F) for F in self.factors],
            cp(self.fusion_bias),
            cp(self.head_W),
            cp(self.head_b),
        )

    def blocks(self) -> dict[str, np.ndarray]:
        """Non-factor arrays, for the model file's extra blocks."""
        return {k: v for k, v in self.named_arrays().items()
                if not k.startswith("factor.") and k != "fusion_bias"}

    @classmethod
    def from_saved(cls, fs: FactorSet, blocks: dict[str, np.ndarray], activation="relu") -> ModelParams:
        encoders = []
        for m in range(fs.n_modalities):
            g = {k: blocks[f"encoder.{m}.{k}"].copy() for k in ("W1", "b1", "W2", "b2")}
            encoders.append(EncoderParams(**g, activation=activation))
        hw, hb = blocks.get("head.W"), blocks.get("head.b")
        return cls(encoders, [F.copy() for F in fs.factors], fs.bias.copy(),
                   None if hw is None else hw.copy(), None if hb is None else hb.copy())


def _model_forward(params: ModelParams, raw_inputs):
    xs = [np.atleast_2d(np.asarray(x)) for x in raw_inputs]
    if len(xs) != len(params.encoders):
        raise ShapeMismatch(f"expected {len(params.encoders)} raw inputs, got {len(xs)}")
    enc = [_encoder_forward(e, x) for e, x in zip(params.encoders, xs)]
    zs = [append_one(z) for z, _ in enc]
    h, P = _fuse_forward(params.factors, params.fusion_bias, zs)
    y = h if params.head_W is None else h @ params.head_W.T + params.head_b
    return y, (enc, zs, P, h)


def model_forward(params: ModelParams, raw_inputs) -> np.ndarray:
    """encoders -> append 1 -> low-rank fusion -> optional affine head."""
    single = np.ndim(raw_inputs[0]) == 1
    y, _ = _model_forward(params, raw_inputs)
    return y[0] if single else y


def mse(pred, target) -> float:
    return float(np.mean((pred - target) ** 2))


def loss_and_grads(params: ModelParams, raw_inputs, target) -> tuple[float, GradientRecord]:
    """Mean squared error over every sample and output, with its full gradient."""
    y, (enc, zs, P, h) = _model_forward(params, raw_inputs)
    target = np.atleast_2d(target)
    diff = y - target
    loss = float(np.mean(diff * diff))
    dy = 2.0 * diff / diff.size
    grads = {}
    if params.head_W is not None:
        grads["head.W"] = dy.T @ h
        grads["head.b"] = dy.sum(0)
        dh = dy @ params.head_W
    else:
        dh = dy
    dF, db, dz = _fuse_backward(params.factors, zs, P, dh)
    for m, d in enumerate(dF):
        grads[f"factor.{m}"] = d
    grads["fusion_bias"] = db
    dz_enc = [d[:, :-1] for d in dz]  # the appended 1 is a constant
    for m, (e, (_, cache)) in enumerate(zip(params.encoders, enc)):
        for k, g in _encoder_backward(e, cache, dz_enc[m]).items():
            grads[f"encoder.{m}.{k}"] = g
    return loss, GradientRecord(grads, dz_enc)


# Synthetic regression tasks ------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    """Targets from a hidden rank-``true_rank`` fusion of the raw inputs, plus noise.

    Raw features are uniform on [0, 1). The ground-truth factors act directly
    on the raw features (with the 1 appended) and are rescaled so the clean
    targets have unit variance.
    """

    raw_dims: tuple[int, ...]
    true_rank: int = 4
    output_dim: int = 1
    noise: float = 0.0
    n_samples: int = 1024
    seed: int = 0

    def ground_truth(self) -> FactorSet:
        fs = init_factors(
            FusionConfig(self.raw_dims, self.true_rank, self.output_dim),
            np.random.default_rng(component_seed(self.seed, "task").spawn(2)[0]),
        )
        x = self._raw(np.random.default_rng(12345), 4096)
        std = np.std(self._clean(fs, x), axis=0)
        scale = 1.0 / np.where(std > 0, std, 1.0)
        return FactorSet([fs.factors[0] * scale] + list(fs.factors[1:]), fs.bias)

    def _raw(self, rng, n):
        return [rng.random((n, d)) for d in self.raw_dims]

    @staticmethod
    def _clean(fs, xs):
        from .lowrank import fuse_arrays

        return fuse_arrays(fs.factors, fs.bias, [append_one(x) for x in xs])

    def generate(self) -> tuple[list[np.ndarray], np.ndarray]:
        rng = np.random.default_rng(component_seed(self.seed, "task").spawn(2)[1])
        xs = self._raw(rng, self.n_samples)
        y = self._clean(self.ground_truth(), xs)
        if self.noise > 0:
            y = y + rng.normal(0.0, self.noise, y.shape)
        return xs, y


# Training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    val_fraction: float = 0.2
    hidden: int | None = None
    activation: str = "relu"


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[tuple[int, float, float]]  # (epoch, train_mse, val_mse); epoch 0 is before training

    @property
    def initial_train_mse(self) -> float:
        return self.curve[0][1]

    @property
    def final_train_mse(self) -> float:
        return self.curve[-1][1]

    @property
    def final_val_mse(self) -> float:
        return self.curve[-1][2]


def _split(xs, y, frac):
    n = y.shape[0]
    n_val = max(1, int(round(n * frac)))
    return [x[:-n_val] for x in xs], y[:-n_val], [x[-n_val:] for x in xs], y[-n_val:]


def train(task: SyntheticTask, cfg: FusionConfig, hyper: TrainHyper = TrainHyper()) -> TrainResult:
    """Mini-batch SGD with momentum on mean squared error.

    Deterministic given ``task.seed`` and ``cfg.seed``. Raises
    :class:`NonFiniteLoss` as soon as a batch loss is not finite.
    """
    if len(cfg.dims) != len(task.raw_dims):
        raise ShapeMismatch(f"{len(cfg.dims)} encoder dims for {len(task.raw_dims)} modalities")
    xs, y = task.generate()
    xs = [x.astype(cfg.dtype) for x in xs]
    y = y.astype(cfg.dtype)
    xtr, ytr, xva, yva = _split(xs, y, hyper.val_fraction)
    params = ModelParams.init(cfg, task.raw_dims, task.output_dim, hyper.hidden, hyper.activation)
    n_params = params.n_params()
    if ytr.shape[0] < 2 * n_params:
        log.info("only %d training samples for %d parameters", ytr.shape[0], n_params)
    arrays = params.named_arrays()
    velocity = {k: np.zeros_like(a) for k, a in arrays.items()}
    rng = np.random.default_rng(component_seed(cfg.seed, "shuffle"))

    def evaluate():
        return (mse(model_forward(params, xtr), ytr), mse(model_forward(params, xva), yva))

    curve = [(0, *evaluate())]
    n = ytr.shape[0]
    # overflow is caught by the finiteness checks and reported as NonFiniteLoss
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, hyper.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, hyper.batch_size):
                idx = order[start:start + hyper.batch_size]
                loss, rec = loss_and_grads(params, [x[idx] for x in xtr], ytr[idx])
                if not np.isfinite(loss):
                    raise NonFiniteLoss(
                        f"loss became {loss} at epoch {epoch} (rank {cfg.rank}, lr {hyper.lr}, "
                        f"momentum {hyper.momentum}); lower the learning rate"
                    )
                for k, a in arrays.items():
                    v = velocity[k]
                    v *= hyper.momentum
                    v += rec.params[k]
                    a -= hyper.lr * v
            tr, va = evaluate()
            if not (np.isfinite(tr) and np.isfinite(va)):
                raise NonFiniteLoss(
                    f"evaluation loss non-finite after epoch {epoch} (lr {hyper.lr}); lower the learning rate"
                )
            curve.append((epoch, tr, va))
    return TrainResult(params, curve)
