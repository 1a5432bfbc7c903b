"""Configuration dataclasses and seed plumbing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ConfigError

PRECISIONS = {"f64": np.float64, "f32": np.float32}

# Fixed order: adding a component at the end never changes earlier streams.
SEED_COMPONENTS = ("task", "init", "shuffle", "bench", "verify")


def dtype_for(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ConfigError("precision", f"expected one of {sorted(PRECISIONS)}, got {precision!r}")


def component_seed(root: int, component: str) -> np.random.SeedSequence:
    """Independent child seed for one component, derived from the root seed."""
    idx = SEED_COMPONENTS.index(component)
    return np.random.SeedSequence(root).spawn(len(SEED_COMPONENTS))[idx]


@dataclass(frozen=True)
class FusionConfig:
    """Shape of one fusion layer. ``dims`` are the encoder output sizes before the 1 is appended."""

    dims: tuple[int, ...]
    rank: int = 4
    output_dim: int = 1
    precision: str = "f64"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 1:
            raise ConfigError("dims", "need at least one modality")
        if any(d < 1 for d in self.dims):
            raise ConfigError("dims", f"all dims must be >= 1, got {list(self.dims)}")
        if self.rank < 1:
            raise ConfigError("rank", f"must be >= 1, got {self.rank}")
        if self.output_dim < 1:
            raise ConfigError("output_dim", f"must be >= 1, got {self.output_dim}")
        dtype_for(self.precision)

    @property
    def n_modalities(self) -> int:
        return len(self.dims)

    @property
    def dtype(self):
        return dtype_for(self.precision)


@dataclass
class RunConfig:
    """Every knob of a CLI run. Serialised next to the outputs so the run can be replayed."""

    dims: list[int] = field(default_factory=lambda: [32, 32, 64])
    rank: int = 4
    output_dim: int = 1
    seed: int = 0
    precision: str = "f64"
    out: str = "runs/latest"

    # verify
    cases: int = 1000
    grad_cases: int = 50
    verify_max_dim: int = 8
    verify_max_rank: int = 4
    verify_max_output: int = 4

    # synthetic task and training
    raw_dims: list[int] = field(default_factory=lambda: [4, 4, 4])
    encoder_dims: list[int] | None = None
    true_rank: int = 4
    noise: float = 0.0
    n_samples: int = 2048
    val_fraction: float = 0.2
    epochs: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    hidden: int | None = None
    activation: str = "relu"

    # bench
    reps: int = 1000
    warmup: int = 100
    time_budget: float = 2.0
    bench_batch: int = 32
    scaling_dim: int = 16
    scaling_modalities: list[int] = field(default_factory=lambda: [2, 3, 4])

    # sweep
    ranks: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16])
    n_seeds: int = 5
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("dims", "raw_dims", "ranks", "scaling_modalities"):
            vals = getattr(self, name)
            if not isinstance(vals, (list, tuple)) or not vals:
                raise ConfigError(name, "must be a nonempty list")
            if any(int(v) < 1 for v in vals):
                raise ConfigError(name, f"all entries must be >= 1, got {list(vals)}")
            setattr(self, name, [int(v) for v in vals])
        if self.encoder_dims is not None:
            if len(self.encoder_dims) != len(self.raw_dims) or any(int(v) < 1 for v in self.encoder_dims):
                raise ConfigError("encoder_dims", "need one positive entry per raw_dims modality")
            self.encoder_dims = [int(v) for v in self.encoder_dims]
        if len(self.raw_dims) < 2:
            raise ConfigError("raw_dims", "the synthetic task needs at least 2 modalities")
        for name in ("rank", "output_dim", "true_rank", "cases", "n_samples", "epochs",
                     "batch_size", "reps", "n_seeds", "workers", "bench_batch", "scaling_dim",
                     "verify_max_dim", "verify_max_rank", "verify_max_output"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("grad_cases", "warmup"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.hidden is not None and int(self.hidden) < 1:
            raise ConfigError("hidden", f"must be >= 1, got {self.hidden}")
        if self.noise < 0:
            raise ConfigError("noise", "must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must be in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction", "must be in (0, 1)")
        if self.time_budget <= 0:
            raise ConfigError("time_budget", "must be > 0")
        if self.activation not in ("relu", "tanh", "identity"):
            raise ConfigError("activation", f"unknown activation {self.activation!r}")
        dtype_for(self.precision)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(tuple(self.dims), self.rank, self.output_dim, self.precision, self.seed)

    @property
    def learner_dims(self) -> list[int]:
        """Encoder output dims for train/sweep; default to the raw input dims."""
        return self.raw_dims if self.encoder_dims is None else self.encoder_dims

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        return cls(**data)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> RunConfig:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path} must contain a mapping")
        return cls.from_dict(data)
