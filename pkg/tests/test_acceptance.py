"""Acceptance gate: one PASS/FAIL line per criterion, printed even under capture.

Run with ``pytest tests/test_acceptance.py -v``. Thresholds below are the
contract values; measured numbers are printed next to them.
"""

import time

import numpy as np
import pytest

from lmfusion.bench import bench_fusion, count_params, rank_sweep, scaling
from lmfusion.config import FusionConfig, RunConfig, component_seed
from lmfusion.model import SyntheticTask, TrainHyper
from lmfusion.verify import bimodal_gap, equivalence_error, gradient_suite, random_case

REFERENCE = FusionConfig((32, 32, 64), rank=4, output_dim=1)


@pytest.fixture
def report(capsys):
    def emit(n, ok, text):
        status = "INFO" if ok is None else "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"\n[criterion {n}] {status}: {text}")
        return ok
    return emit


def test_1_fusion_paths_agree(report):
    rng = np.random.default_rng(component_seed(0, "verify"))
    t0 = time.perf_counter()
    errs = [equivalence_error(random_case(rng)) for _ in range(1000)]
    elapsed = time.perf_counter() - t0
    worst = max(errs)
    ok = worst < 1e-9 and elapsed < 10
    assert report(1, ok, f"1000 cases, max abs err {worst:.2e} (< 1e-9), {elapsed:.2f} s (< 10 s)")


def test_2_rank_one_bimodal(report):
    rng = np.random.default_rng(2)
    worst = max(bimodal_gap(random_case(rng, modalities=(2,), max_rank=1)) for _ in range(100))
    assert report(2, worst < 1e-12, f"100 rank-1 bimodal cases, max abs gap {worst:.2e} (< 1e-12)")


def test_3_full_model_gradients(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = max(max(errs.values()) for _, errs in gradient_suite(rng, 50))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 30
    assert report(3, ok, f"50 models, max rel err {worst:.2e} (< 1e-6), {elapsed:.2f} s (< 30 s)")


def test_4_parameter_counts(report):
    exp, lmf = count_params(REFERENCE, "explicit"), count_params(REFERENCE, "lmf")
    ok = exp == 70786 and lmf == 525
    assert report(4, ok, f"explicit {exp} (70786), lmf {lmf} (525), ratio {exp / lmf:.1f}x")


def test_5_training_throughput(report):
    t0 = time.perf_counter()
    exp = bench_fusion(REFERENCE, "explicit")
    lmf = bench_fusion(REFERENCE, "lmf")
    elapsed = time.perf_counter() - t0
    ratio = lmf.fwdbwd_ips / exp.fwdbwd_ips
    ok = ratio >= 2.0 and elapsed < 120
    assert report(5, ok, f"fwd+bwd IPS lmf {lmf.fwdbwd_ips:.0f} vs explicit {exp.fwdbwd_ips:.0f}, "
                         f"ratio {ratio:.1f}x (>= 2), {elapsed:.1f} s (< 120 s)")


def test_6_scaling_with_modalities(report):
    dim = RunConfig().scaling_dim
    curves = {m: scaling(m, [2, 3, 4], dim) for m in ("explicit", "lmf")}
    med = {m: [r.forward_backward.median_ns for r in reps] for m, reps in curves.items()}
    lmf_growth = med["lmf"][2] / med["lmf"][0]
    exp_growth = med["explicit"][2] / med["explicit"][0]
    size_growth = (dim + 1) ** 2
    ok = lmf_growth <= 3 and exp_growth >= 0.5 * size_growth
    curve_text = "; ".join(f"{m} ns {[round(v) for v in med[m]]}" for m in med)
    assert report(6, ok, f"dim {dim}, M=2->4: lmf x{lmf_growth:.2f} (<= 3), explicit x{exp_growth:.0f} "
                         f"(>= {0.5 * size_growth:.1f}); {curve_text}")


def test_7_rank_recovery(report):
    cfg = RunConfig()
    task = SyntheticTask(tuple(cfg.raw_dims), true_rank=4, noise=0.0, n_samples=cfg.n_samples,
                         seed=cfg.seed)
    hyper = TrainHyper(cfg.epochs, cfg.lr, cfg.momentum, cfg.batch_size, cfg.val_fraction)
    t0 = time.perf_counter()
    r1, r4 = rank_sweep(task, [1, 4], [cfg.seed + k for k in range(5)], hyper=hyper)
    elapsed = time.perf_counter() - t0
    ratios = np.array(r4.final_train_mse) / np.array(r4.initial_train_mse)
    ok = bool(np.all(ratios < 0.1)) and r4.mean_train <= r1.mean_train and elapsed < 300
    assert report(7, ok, f"r=4 final/initial max {ratios.max():.2%} (< 10%); mean final r=4 "
                         f"{r4.mean_train:.4f} <= r=1 {r1.mean_train:.4f}; {elapsed:.0f} s (< 300 s)")


def test_8_benchmark_metrics_not_reproducible(report):
    report(8, None, "informational only: dataset metrics need restricted corpora; nothing depends on them")
    pytest.skip("benchmark-dataset metrics are out of scope")
