"""Ablation sweeps: train one model per axis value (per seed), evaluate each
against a held-out draw, and emit a ranked table. Individual run failures
are recorded without stopping the sweep.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import RunConfig, resolve_derived
from .data import holdout_seed, synth_dataset
from .entities import EntityKind
from .errors import DomainError
from .evaluate import evaluate_samples
from .flow import TimePolicy
from .rngutil import derive_generator
from .sampling import batch_generate
from .training import train

AXES = ("cell_size", "time_policy", "entity_kind", "steps")


@dataclass
class AblationRow:
    axis: str
    value: str
    per_seed: dict[int, float] = field(default_factory=dict)
    mean: float = math.nan
    std: float = math.nan
    error: str | None = None


def apply_axis(base: RunConfig, axis: str, value) -> RunConfig:
    t = base.train
    if axis == "cell_size":
        layout = dataclasses.replace(t.layout, kind=EntityKind.CELL, cell_size=int(value))
        cfg = dataclasses.replace(base, train=dataclasses.replace(t, layout=layout))
    elif axis == "time_policy":
        cfg = dataclasses.replace(base, train=dataclasses.replace(t, policy=TimePolicy(value)))
    elif axis == "entity_kind":
        layout = dataclasses.replace(t.layout, kind=EntityKind(value))
        cfg = dataclasses.replace(base, train=dataclasses.replace(t, layout=layout))
    elif axis == "steps":
        cfg = dataclasses.replace(base, sample=dataclasses.replace(base.sample, steps=int(value)))
    else:
        raise DomainError(f"unknown ablation axis {axis!r}; valid: {AXES}")
    return resolve_derived(cfg)


def run_once(cfg: RunConfig, seed: int, out_dir: Path | None = None) -> float:
    """Train under one (config, seed) pair and return the held-out sliced-W2.

    Evaluation samples are class-balanced when eval.conditional is set,
    otherwise unconditional; the projection seed is shared across runs so
    sweep rows are comparable.
    """
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    dataset = synth_dataset(cfg.train.data)
    result = train(cfg.train, dataset, out_dir=out_dir)

    holdout = synth_dataset(
        dataclasses.replace(cfg.train.data, size=cfg.eval.holdout_size),
        seed=holdout_seed(cfg.train.data),
    )
    count = cfg.eval.sample_count
    labels = None
    if cfg.eval.conditional:
        labels = torch.arange(count, dtype=torch.long) % cfg.train.data.num_classes
    layout = cfg.train.layout.build(cfg.train.data.grid_shape)
    samples = batch_generate(
        result.model, layout, cfg.sample, count,
        derive_generator(cfg.eval.seed, seed), labels=labels, chunk=cfg.eval.chunk,
    )
    report = evaluate_samples(
        samples, holdout.latents,
        projections=cfg.eval.projections,
        rng=derive_generator(cfg.eval.seed, "projections"),
    )
    return report.sliced_w2


def ablate(
    base: RunConfig,
    axis: str,
    values: list,
    seeds: list[int] | None = None,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    if axis not in AXES:
        raise DomainError(f"unknown ablation axis {axis!r}; valid: {AXES}")
    seeds = list(seeds) if seeds else [base.train.seed]
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    rows: list[AblationRow] = []
    for value in values:
        label = value.value if isinstance(value, enum.Enum) else str(value)
        row = AblationRow(axis=axis, value=label)
        try:
            cfg = apply_axis(base, axis, value)
            for seed in seeds:
                run_out = None
                if out_path is not None:
                    run_out = out_path / f"{axis}-{value}-seed{seed}"
                start = time.monotonic()
                metric = run_once(cfg, seed, out_dir=run_out)
                row.per_seed[seed] = metric
                if out_path is not None:
                    with open(out_path / "runs.jsonl", "a") as fh:
                        fh.write(json.dumps({
                            "axis": axis, "value": label, "seed": seed,
                            "sliced_w2": metric,
                            "elapsed": round(time.monotonic() - start, 2),
                        }, sort_keys=True) + "\n")
            vals = list(row.per_seed.values())
            row.mean = sum(vals) / len(vals)
            row.std = (
                math.sqrt(sum((v - row.mean) ** 2 for v in vals) / (len(vals) - 1))
                if len(vals) > 1 else 0.0
            )
        except Exception as exc:  # record and keep sweeping
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    ranked = sorted(rows, key=lambda r: (r.error is not None, r.mean))
    if out_path is not None:
        with open(out_path / "table.txt", "w") as fh:
            fh.write(format_table(ranked))
    return ranked


def format_table(rows: list[AblationRow]) -> str:
    lines = [f"{'rank':<5} {'value':<14} {'mean sliced-W2':<15} {'std':<10} seeds"]
    for i, row in enumerate(rows, start=1):
        if row.error is not None:
            lines.append(f"{i:<5} {row.value:<14} FAILED: {row.error}")
        else:
            per_seed = ", ".join(f"{s}:{v:.4f}" for s, v in row.per_seed.items())
            lines.append(
                f"{i:<5} {row.value:<14} {row.mean:<15.5f} {row.std:<10.5f} {per_seed}"
            )
    return "\n".join(lines) + "\n"
