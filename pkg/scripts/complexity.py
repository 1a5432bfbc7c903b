"""Parameter counts, training/testing throughput, and M-scaling at the reference dims.

Writes bench.csv, scaling.csv and summary.txt under --out. Equivalent to
``lmfusion bench --dims 32,32,64 --rank 4``; extra flags pass through.
"""

import sys

from lmfusion.cli import main

if __name__ == "__main__":
    base = ["bench", "--dims", "32,32,64", "--rank", "4", "--output-dim", "1",
            "--out", "runs/complexity"]
    sys.exit(main(base + sys.argv[1:]))
