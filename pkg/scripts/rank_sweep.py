"""Rank sweep on a rank-4 synthetic task, printed as a text plot of mean +- std.

    python scripts/rank_sweep.py --out runs/sweep --seeds 5 --ranks 1,2,4,8,16
"""

import argparse
import math

from lmfusion.bench import SWEEP_FIELDS, rank_sweep, write_rows
from lmfusion.config import RunConfig
from lmfusion.model import SyntheticTask, TrainHyper


def bar(value, scale, width=40):
    return "#" * max(1, round(width * value / scale)) if math.isfinite(value) else "(failed)"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ranks", default="1,2,4,8,16")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=RunConfig.epochs)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()

    cfg = RunConfig(epochs=args.epochs, noise=args.noise)
    task = SyntheticTask(tuple(cfg.raw_dims), cfg.true_rank, 1, cfg.noise, cfg.n_samples, cfg.seed)
    hyper = TrainHyper(cfg.epochs, cfg.lr, cfg.momentum, cfg.batch_size, cfg.val_fraction)
    ranks = [int(r) for r in args.ranks.split(",")]
    results = rank_sweep(task, ranks, list(range(args.seeds)), hyper=hyper, workers=args.workers)

    rows = [row for res in results for row in res.rows()]
    write_rows(f"{args.out}/sweep", rows, SWEEP_FIELDS)
    scale = max(r.mean_train for r in results if math.isfinite(r.mean_train))
    print(f"ground-truth rank {cfg.true_rank}; final train MSE over {args.seeds} seeds")
    for r in results:
        print(f"r={r.rank:>3}  {r.mean_train:.4f} +- {r.std_train:.4f}  {bar(r.mean_train, scale)}")


if __name__ == "__main__":
    main()
