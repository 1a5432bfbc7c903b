"""Command-line entry point: ``lmfusion {verify,train,bench,sweep}``.

Exit codes: 0 success, 1 verification/training or I/O failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench, serialize
from .config import FusionConfig, RunConfig, component_seed
from .errors import ConfigError, NonFiniteLoss
from .model import SyntheticTask, TrainHyper, train
from .verify import EQUIV_TOL, GRAD_TOL, corrupt, equivalence_error, gradient_suite, random_case

log = logging.getLogger("lmfusion")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# flag name -> RunConfig field
OVERRIDES = {
    "seed": "seed", "out": "out", "cases": "cases", "ranks": "ranks", "reps": "reps",
    "precision": "precision", "dims": "dims", "rank": "rank", "output_dim": "output_dim",
    "epochs": "epochs", "lr": "lr", "noise": "noise", "workers": "workers",
    "grad_cases": "grad_cases", "n_seeds": "n_seeds", "raw_dims": "raw_dims",
    "true_rank": "true_rank", "warmup": "warmup", "batch": "bench_batch",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file; flags override its values")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=["f32", "f64"])
    common.add_argument("--dims", type=_int_list, help="fusion dims before the appended 1, e.g. 32,32,64")
    common.add_argument("--rank", type=int)
    common.add_argument("--output-dim", dest="output_dim", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lmfusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="equivalence and gradient checks")
    v.add_argument("--cases", type=int, help="random equivalence cases")
    v.add_argument("--grad-cases", dest="grad_cases", type=int, help="random gradient-check models")
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    for name, helptext in (("train", "train on a synthetic task"), ("sweep", "rank sweep")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--noise", type=float)
        s.add_argument("--raw-dims", dest="raw_dims", type=_int_list)
        s.add_argument("--true-rank", dest="true_rank", type=int)
        if name == "sweep":
            s.add_argument("--ranks", type=_int_list, help="comma-separated ranks, e.g. 1,2,4,8,16")
            s.add_argument("--n-seeds", dest="n_seeds", type=int)
            s.add_argument("--workers", type=int)

    b = sub.add_parser("bench", parents=[common], help="parameter counts and throughput")
    b.add_argument("--reps", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--batch", type=int)
    b.add_argument("--no-scaling", action="store_true", help="skip the M-scaling curves")
    return p


def resolve_config(args) -> RunConfig:
    data = {}
    if args.config is not None:
        data = RunConfig.load(args.config).to_dict()
    for flag, fld in OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[fld] = val
    return RunConfig.from_dict(data)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.yaml")
    except OSError as exc:
        raise ConfigError("out", f"output directory not writable: {exc}") from exc
    return out


def _json_safe(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


# Subcommands --------------------------------------------------------------


def cmd_verify(cfg: RunConfig, inject_fault: bool = False) -> int:
    if cfg.precision != "f64":
        raise ConfigError("precision", "verify runs in f64 only")
    out = _prepare_out(cfg)
    rng = np.random.default_rng(component_seed(cfg.seed, "verify"))
    rows, worst = [], 0.0
    for i in range(cfg.cases):
        case = random_case(rng, max_dim=cfg.verify_max_dim, max_rank=cfg.verify_max_rank,
                           max_out=cfg.verify_max_output)
        fused_with = corrupt(case.factors, rng) if inject_fault else None
        err = equivalence_error(case, fused_with)
        worst = max(worst, err)
        print(f"case {i}: M={len(case.inputs)} dims={list(case.factors.dims)} "
              f"r={case.factors.rank} d_h={case.factors.output_dim} max_abs_err={err:.3e}")
        rows.append({"case": i, "M": len(case.inputs), "dims": "x".join(map(str, case.factors.dims)),
                     "r": case.factors.rank, "d_h": case.factors.output_dim, "max_abs_err": err})
        if not err < EQUIV_TOL:
            dump = out / "counterexample.json"
            payload = case.to_dict() | {"case": i, "max_abs_err": err, "tolerance": EQUIV_TOL}
            if fused_with is not None:
                payload["fused_factors"] = [F.tolist() for F in fused_with.factors]
            dump.write_text(json.dumps(payload, indent=2))
            print(f"FAIL: case {i} error {err:.3e} >= {EQUIV_TOL:g}; inputs written to {dump}",
                  file=sys.stderr)
            bench.write_rows(out / "verify", rows, list(rows[0]))
            return EXIT_FAIL
    if rows:
        bench.write_rows(out / "verify", rows, list(rows[0]))
    print(f"equivalence: {cfg.cases} cases, max abs error {worst:.3e} (tol {EQUIV_TOL:g})")

    grad_worst = 0.0
    grng = np.random.default_rng(component_seed(cfg.seed, "verify").spawn(1)[0])
    for i, errs in gradient_suite(grng, cfg.grad_cases):
        e = max(errs.values())
        grad_worst = max(grad_worst, e)
        print(f"grad case {i}: max_rel_err={e:.3e}")
        if not e < GRAD_TOL:
            bad = max(errs, key=errs.get)
            print(f"FAIL: gradient case {i} parameter {bad} rel error {e:.3e}", file=sys.stderr)
            return EXIT_FAIL
    if cfg.grad_cases:
        print(f"gradients: {cfg.grad_cases} models, max rel error {grad_worst:.3e} (tol {GRAD_TOL:g})")
    return EXIT_OK


def _task(cfg: RunConfig) -> SyntheticTask:
    return SyntheticTask(tuple(cfg.raw_dims), cfg.true_rank, cfg.output_dim, cfg.noise,
                         cfg.n_samples, cfg.seed)


def _hyper(cfg: RunConfig) -> TrainHyper:
    return TrainHyper(cfg.epochs, cfg.lr, cfg.momentum, cfg.batch_size, cfg.val_fraction,
                      cfg.hidden, cfg.activation)


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    fcfg = FusionConfig(tuple(cfg.learner_dims), cfg.rank, cfg.output_dim, cfg.precision, cfg.seed)
    try:
        res = train(_task(cfg), fcfg, _hyper(cfg))
    except NonFiniteLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    rows = [{"epoch": e, "train_mse": tr, "val_mse": va} for e, tr, va in res.curve]
    bench.write_rows(out / "loss", rows, ("epoch", "train_mse", "val_mse"))
    serialize.save(out / "model.lmf", res.params.factor_set(), res.params.blocks())
    summary = (f"rank {cfg.rank}, {cfg.epochs} epochs, lr {cfg.lr}\n"
               f"train MSE {res.initial_train_mse:.6g} -> {res.final_train_mse:.6g} "
               f"({res.final_train_mse / res.initial_train_mse:.3%} of initial)\n"
               f"val MSE {res.curve[0][2]:.6g} -> {res.final_val_mse:.6g}\n")
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, scaling: bool = True) -> int:
    out = _prepare_out(cfg)
    fcfg = cfg.fusion_config()
    kw = dict(reps=cfg.reps, warmup=cfg.warmup, batch=cfg.bench_batch, time_budget=cfg.time_budget)
    reports = [bench.bench_fusion(fcfg, m, **kw) for m in ("explicit", "lmf")]
    bench.write_rows(out / "bench", [r.row() for r in reports], bench.BENCH_FIELDS)
    exp, lmf = reports
    lines = [
        f"fusion dims {list(fcfg.dims)}, rank {fcfg.rank}, d_h {fcfg.output_dim}, batch {cfg.bench_batch}",
        f"params: explicit {exp.parameter_count}, lmf {lmf.parameter_count} "
        f"(ratio {exp.parameter_count / lmf.parameter_count:.1f}x)",
        f"training IPS (fwd+bwd): explicit {exp.fwdbwd_ips:.1f}, lmf {lmf.fwdbwd_ips:.1f} "
        f"(ratio {lmf.fwdbwd_ips / exp.fwdbwd_ips:.2f}x)",
        f"testing IPS (fwd): explicit {exp.fwd_ips:.1f}, lmf {lmf.fwd_ips:.1f} "
        f"(ratio {lmf.fwd_ips / exp.fwd_ips:.2f}x)",
    ]
    if scaling:
        rows = []
        for m in ("explicit", "lmf"):
            for r in bench.scaling(m, cfg.scaling_modalities, cfg.scaling_dim, fcfg.rank,
                                   fcfg.output_dim, **kw):
                rows.append(r.row())
        bench.write_rows(out / "scaling", rows, bench.BENCH_FIELDS)
        for m in ("explicit", "lmf"):
            med = [r["median_ns"] for r in rows if r["method"] == m]
            lines.append(f"scaling {m} (dim {cfg.scaling_dim}, M={cfg.scaling_modalities}): "
                         f"median fwd+bwd ns {med}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    seeds = [cfg.seed + k for k in range(cfg.n_seeds)]
    results = bench.rank_sweep(_task(cfg), cfg.ranks, seeds, cfg.learner_dims, _hyper(cfg),
                               cfg.output_dim, cfg.precision, cfg.workers)
    rows = [row for res in results for row in res.rows()]
    csv_rows = [{k: _json_safe(v) for k, v in row.items()} for row in rows]
    bench.write_rows(out / "sweep", csv_rows, bench.SWEEP_FIELDS)
    summary = [{"rank": r.rank, "mean_train_mse": r.mean_train, "std_train_mse": r.std_train,
                "mean_val_mse": r.mean_val, "std_val_mse": r.std_val, "failed": len(r.errors)}
               for r in results]
    bench.write_rows(out / "sweep_summary", [{k: _json_safe(v) for k, v in s.items()} for s in summary],
                     list(summary[0]))
    for s in summary:
        print(f"rank {s['rank']:>3}: train MSE {s['mean_train_mse']:.4g} +- {s['std_train_mse']:.2g}, "
              f"val MSE {s['mean_val_mse']:.4g} +- {s['std_val_mse']:.2g}, failed {s['failed']}")
    for r in results:
        for seed, err in r.errors.items():
            print(f"rank {r.rank} seed {seed}: {err}", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TypeError, ValueError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "verify":
            return cmd_verify(cfg, args.inject_fault)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "bench":
            return cmd_bench(cfg, not args.no_scaling)
        return cmd_sweep(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
