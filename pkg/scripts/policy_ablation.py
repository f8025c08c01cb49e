#!/usr/bin/env python3
"""Sweep the four context-noise policies over several seeds and print the
ranked table. The interesting comparison is random vs clean (teacher
forcing): the clean-context model reaches a lower training loss but samples
worse, the classic exposure-bias signature.

    python scripts/policy_ablation.py --seeds 0,1,2 --out runs/policy
"""

import argparse
from pathlib import Path

from nextx.ablate import ablate, format_table
from nextx.config import load_run_config
from nextx.flow import TimePolicy

CONFIG = Path(__file__).parent.parent / "configs" / "policy_ablation.cfg"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=CONFIG)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--out", type=Path, default=Path("runs/policy-ablation"))
    args = parser.parse_args()

    base = load_run_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = ablate(
        base, "time_policy",
        [TimePolicy.CLEAN, TimePolicy.INCREASING, TimePolicy.DECREASING,
         TimePolicy.RANDOM],
        seeds=seeds, out_dir=args.out,
    )
    print(format_table(rows))


if __name__ == "__main__":
    main()
