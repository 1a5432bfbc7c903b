"""Parameter counts, fusion throughput, and the rank sweep."""

from __future__ import annotations

import csv
import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from math import prod
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import FusionConfig, component_seed
from .errors import NonFiniteLoss
from .lowrank import fuse_arrays, init_factors
from .model import SyntheticTask, TrainHyper, _fuse_backward, _fuse_forward, train
from .tensor import append_one, check_explicit_size, explicit_backward, explicit_forward

METHODS = ("explicit", "lmf")
BENCH_FIELDS = ("method", "M", "dims", "r", "d_h", "params", "fwd_ips", "fwdbwd_ips",
                "mean_ns", "median_ns", "std_ns", "reps")
SWEEP_FIELDS = ("rank", "seed", "final_train_mse", "final_val_mse")


def count_params(cfg: FusionConfig, method: str) -> int:
    """Fusion-stage parameters including the output bias."""
    sizes = [d + 1 for d in cfg.dims]
    if method == "explicit":
        return cfg.output_dim * prod(sizes) + cfg.output_dim
    if method == "lmf":
        return cfg.rank * cfg.output_dim * sum(sizes) + cfg.output_dim
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


@dataclass
class Timing:
    mean_ns: float
    median_ns: float
    std_ns: float
    reps: int

    @classmethod
    def from_samples(cls, ns: Sequence[int]) -> Timing:
        return cls(statistics.fmean(ns), statistics.median(ns),
                   statistics.stdev(ns) if len(ns) > 1 else 0.0, len(ns))


def time_call(fn: Callable[[], object], reps=1000, warmup=100, time_budget=2.0, min_reps=10) -> Timing:
    """Per-call wall time on the monotonic clock.

    Stops after ``reps`` calls or once ``time_budget`` seconds have been
    spent measuring, whichever comes first, but never before ``min_reps``.
    """
    for _ in range(warmup):
        fn()
    samples = []
    deadline = time.perf_counter_ns() + int(time_budget * 1e9)
    while len(samples) < reps:
        t0 = time.perf_counter_ns()
        fn()
        t1 = time.perf_counter_ns()
        samples.append(t1 - t0)
        if t1 > deadline and len(samples) >= min_reps:
            break
    return Timing.from_samples(samples)


@dataclass
class BenchReport:
    method: str
    dims: tuple[int, ...]
    r: int
    d_h: int
    parameter_count: int
    batch: int
    forward: Timing
    forward_backward: Timing

    @property
    def M(self) -> int:
        return len(self.dims)

    @property
    def fwd_ips(self) -> float:
        return self.batch / (self.forward.median_ns * 1e-9)

    @property
    def fwdbwd_ips(self) -> float:
        return self.batch / (self.forward_backward.median_ns * 1e-9)

    def row(self) -> dict:
        """Flat record; the timing columns describe the forward+backward pass."""
        t = self.forward_backward
        return {
            "method": self.method, "M": self.M, "dims": "x".join(map(str, self.dims)),
            "r": self.r, "d_h": self.d_h, "params": self.parameter_count,
            "fwd_ips": round(self.fwd_ips, 3), "fwdbwd_ips": round(self.fwdbwd_ips, 3),
            "mean_ns": round(t.mean_ns, 1), "median_ns": round(t.median_ns, 1),
            "std_ns": round(t.std_ns, 1), "reps": t.reps,
        }


def bench_inputs(cfg: FusionConfig, batch: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Deterministic fusion inputs (1 already appended) and upstream gradient."""
    rng = np.random.default_rng(component_seed(cfg.seed, "bench"))
    zs = [append_one(rng.uniform(-1, 1, (batch, d))).astype(cfg.dtype) for d in cfg.dims]
    upstream = rng.normal(0, 1, (batch, cfg.output_dim)).astype(cfg.dtype)
    return zs, upstream


def fusion_kernels(cfg: FusionConfig, method: str, batch: int):
    """(forward, forward+backward) closures over fixed parameters and inputs."""
    zs, g = bench_inputs(cfg, batch)
    if method == "lmf":
        fs = init_factors(cfg)
        factors, bias = fs.factors, fs.bias

        def fwd():
            return fuse_arrays(factors, bias, zs)

        def fwdbwd():
            _, P = _fuse_forward(factors, bias, zs)
            return _fuse_backward(factors, zs, P, g)

    elif method == "explicit":
        shape = tuple(d + 1 for d in cfg.dims)
        check_explicit_size(shape)
        check_explicit_size((batch,) + shape, max_order=len(shape) + 1)
        rng = np.random.default_rng(component_seed(cfg.seed, "init"))
        W = rng.normal(0, prod(shape) ** -0.5, (cfg.output_dim,) + shape).astype(cfg.dtype)
        b = np.zeros(cfg.output_dim, cfg.dtype)

        def fwd():
            return explicit_forward(W, b, zs)[0]

        def fwdbwd():
            _, Z = explicit_forward(W, b, zs)
            return explicit_backward(W, zs, Z, g)

    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return fwd, fwdbwd


def bench_fusion(cfg: FusionConfig, method: str, reps=1000, warmup=100, batch=32,
                 time_budget=2.0) -> BenchReport:
    """Time the testing (forward) and training (forward+backward) passes separately."""
    fwd, fwdbwd = fusion_kernels(cfg, method, batch)
    t_fwd = time_call(fwd, reps, warmup, time_budget)
    t_fb = time_call(fwdbwd, reps, warmup, time_budget)
    return BenchReport(method, cfg.dims, cfg.rank, cfg.output_dim, count_params(cfg, method),
                       batch, t_fwd, t_fb)


def scaling(method: str, modalities: Sequence[int], dim: int, rank=4, d_h=1, **kw) -> list[BenchReport]:
    """Bench one method at several modality counts with a fixed per-modality dim."""
    return [bench_fusion(FusionConfig((dim,) * M, rank, d_h), method, **kw) for M in modalities]


# Rank sweep ---------------------------------------------------------------


@dataclass
class SweepResult:
    rank: int
    seeds: list[int] = field(default_factory=list)
    final_train_mse: list[float] = field(default_factory=list)
    final_val_mse: list[float] = field(default_factory=list)
    initial_train_mse: list[float] = field(default_factory=list)
    errors: dict[int, str] = field(default_factory=dict)

    def _finite(self, vals):
        return [v for v in vals if np.isfinite(v)]

    @property
    def mean_train(self) -> float:
        v = self._finite(self.final_train_mse)
        return float(np.mean(v)) if v else float("nan")

    @property
    def std_train(self) -> float:
        v = self._finite(self.final_train_mse)
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    @property
    def mean_val(self) -> float:
        v = self._finite(self.final_val_mse)
        return float(np.mean(v)) if v else float("nan")

    @property
    def std_val(self) -> float:
        v = self._finite(self.final_val_mse)
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def rows(self) -> list[dict]:
        return [{"rank": self.rank, "seed": s, "final_train_mse": tr, "final_val_mse": va}
                for s, tr, va in zip(self.seeds, self.final_train_mse, self.final_val_mse)]


@dataclass(frozen=True)
class SweepCell:
    task: SyntheticTask
    dims: tuple[int, ...]
    rank: int
    seed: int
    hyper: TrainHyper
    output_dim: int = 1
    precision: str = "f64"


def run_cell(cell: SweepCell) -> tuple[int, int, float, float, float, str | None]:
    """(rank, seed, initial train, final train, final val, error message or None)."""
    cfg = FusionConfig(cell.dims, cell.rank, cell.output_dim, cell.precision, cell.seed)
    nan = float("nan")
    try:
        res = train(cell.task, cfg, cell.hyper)
    except NonFiniteLoss as exc:
        return cell.rank, cell.seed, nan, nan, nan, str(exc)
    return (cell.rank, cell.seed, res.initial_train_mse, res.final_train_mse,
            res.final_val_mse, None)


def rank_sweep(task: SyntheticTask, ranks: Sequence[int], seeds: Sequence[int], dims=None,
               hyper: TrainHyper = TrainHyper(), output_dim=None, precision="f64",
               workers=1) -> list[SweepResult]:
    """Train once per (rank, seed); a diverging cell is recorded as NaN, not raised."""
    if not ranks or any(r < 1 for r in ranks):
        raise ValueError(f"ranks must be a nonempty list of positive ints, got {list(ranks)}")
    dims = tuple(task.raw_dims if dims is None else dims)
    output_dim = task.output_dim if output_dim is None else output_dim
    cells = [SweepCell(task, dims, r, s, hyper, output_dim, precision) for r in ranks for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(run_cell, cells))
    else:
        outcomes = [run_cell(c) for c in cells]
    by_rank = {r: SweepResult(r) for r in ranks}
    for rank, seed, init, tr, va, err in sorted(outcomes, key=lambda o: (ranks.index(o[0]), seeds.index(o[1]))):
        res = by_rank[rank]
        res.seeds.append(seed)
        res.initial_train_mse.append(init)
        res.final_train_mse.append(tr)
        res.final_val_mse.append(va)
        if err is not None:
            res.errors[seed] = err
    return [by_rank[r] for r in ranks]


# Output -------------------------------------------------------------------


def write_rows(path_stem, rows: Sequence[dict], fields: Sequence[str]) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and a ``<stem>.json`` mirror with the same field names."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in fields})
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps([{k: row[k] for k in fields} for row in rows], indent=2) + "\n")
    return csv_path, json_path


def report_dict(rep: BenchReport) -> dict:
    d = asdict(rep)
    d["dims"] = list(rep.dims)
    d["fwd_ips"] = rep.fwd_ips
    d["fwdbwd_ips"] = rep.fwdbwd_ips
    return d
