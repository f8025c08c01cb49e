#!/usr/bin/env python3
"""Sweep the cell size on an 8x8 grid (k in {1, 2, 4}), one model per value
per seed, and print the ranked table.

    python scripts/cell_size_ablation.py --seeds 0,1 --out runs/cellsize
"""

import argparse
from pathlib import Path

from nextx.ablate import ablate, format_table
from nextx.config import parse_run_config

CONFIG_TEXT = """
[data]
kind = gaussian_mixture
height = 8
width = 8
channels = 2
num_classes = 8
size = 2048
seed = 7

[layout]
kind = cell
cell_size = 2

[denoiser]
depth = 2
width = 64
heads = 4

[train]
epochs = 25
warmup_epochs = 3
batch_size = 256
peak_lr = 1e-3

[sample]
steps = 8
mode = ode

[eval]
holdout_size = 1024
sample_count = 512
chunk = 256
"""


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0")
    parser.add_argument("--values", default="1,2,4")
    parser.add_argument("--out", type=Path, default=Path("runs/cell-size-ablation"))
    args = parser.parse_args()

    base = parse_run_config(CONFIG_TEXT)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    values = [int(v) for v in args.values.split(",") if v.strip()]
    rows = ablate(base, "cell_size", values, seeds=seeds, out_dir=args.out)
    print(format_table(rows))


if __name__ == "__main__":
    main()
