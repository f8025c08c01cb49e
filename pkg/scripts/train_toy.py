#!/usr/bin/env python3
"""Train the toy mixture model end to end, then sample and score it.

Equivalent to `nextx train` + `nextx eval` with the bundled toy config;
handy for a first smoke run:

    python scripts/train_toy.py --out runs/toy --epochs 20
"""

import argparse
import dataclasses
import json
from pathlib import Path

import torch

from nextx.config import config_hash, load_run_config
from nextx.data import holdout_seed, synth_dataset
from nextx.evaluate import evaluate_samples
from nextx.rngutil import derive_generator
from nextx.sampling import batch_generate
from nextx.training import train

CONFIG = Path(__file__).parent.parent / "configs" / "toy_gmm.cfg"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=CONFIG)
    parser.add_argument("--out", type=Path, default=Path("runs/toy"))
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    cfg = load_run_config(args.config)
    train_cfg = cfg.train
    if args.epochs is not None:
        warmup = min(train_cfg.warmup_epochs, max(0, args.epochs - 1))
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs,
                                        warmup_epochs=warmup)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)

    dataset = synth_dataset(train_cfg.data)
    print(f"config {config_hash(cfg)}: {len(dataset)} samples, "
          f"layout {train_cfg.layout.kind.value}, policy {train_cfg.policy.value}")
    result = train(train_cfg, dataset, out_dir=args.out)
    print(f"final loss {result.final_loss:.4f} -> {result.checkpoint_path}")

    layout = train_cfg.layout.build(train_cfg.data.grid_shape)
    count = cfg.eval.sample_count
    labels = torch.arange(count, dtype=torch.long) % train_cfg.data.num_classes
    samples = batch_generate(
        result.model, layout, cfg.sample, count,
        derive_generator(cfg.eval.seed, "script"), labels=labels, chunk=cfg.eval.chunk,
    )
    holdout = synth_dataset(
        dataclasses.replace(train_cfg.data, size=cfg.eval.holdout_size),
        seed=holdout_seed(train_cfg.data),
    )
    report = evaluate_samples(
        samples, holdout.latents, projections=cfg.eval.projections,
        rng=derive_generator(cfg.eval.seed, "proj"),
        generated_labels=labels, reference_labels=holdout.labels,
    )
    print(f"sliced-W2 {report.sliced_w2:.4f}  mean_err {report.mean_err:.4f}  "
          f"cov_err {report.cov_err:.4f}")
    with open(args.out / "report.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
