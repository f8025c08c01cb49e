"""Command-line surface: train, sample, eval, ablate, selftest.

Every run writes ``provenance.json`` (canonical config text, its hash, the
git commit when available, and the argv) next to its outputs. The output
root defaults to ``$NEXTX_OUT`` or ``./runs``.
"""

from __future__ import annotations

import dataclasses
import json
import os
import subprocess
import sys
from pathlib import Path

import click
import torch

from . import __version__
from .ablate import AXES, ablate as run_ablation, format_table
from .checkpoint import load_checkpoint
from .config import (
    RunConfig, config_hash, default_run_config, dump_run_config, load_run_config,
)
from .data import holdout_seed, synth_dataset
from .errors import NextXError
from .evaluate import evaluate_samples
from .flow import IntegratorMode
from .raster import save_image_grid
from .rngutil import derive_generator
from .sampling import SampleConfig, batch_generate
from .serialization import save_container
from .training import train as run_training


def _git_commit() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).parent,
        )
    except OSError:
        return None
    return out.stdout.strip() if out.returncode == 0 else None


def _out_dir(explicit: str | None, tag: str) -> Path:
    if explicit is not None:
        path = Path(explicit)
    else:
        path = Path(os.environ.get("NEXTX_OUT", "runs")) / tag
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_provenance(out: Path, cfg: RunConfig | None, argv: list[str]) -> None:
    record = {
        "argv": argv,
        "git_commit": _git_commit(),
        "package_version": __version__,
    }
    if cfg is not None:
        record["config_hash"] = config_hash(cfg)
        record["config_text"] = dump_run_config(cfg)
    with open(out / "provenance.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


@click.group(name="nextx")
def cli() -> None:
    """Next-X autoregressive flow-matching on synthetic latents."""


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out", type=click.Path(), default=None, help="output directory")
def train_cmd(config_path: str, out: str | None) -> None:
    """Train a model from a run-config file."""
    cfg = load_run_config(config_path)
    out_dir = _out_dir(out, f"train-{config_hash(cfg)}")
    _write_provenance(out_dir, cfg, sys.argv[1:])
    result = run_training(cfg.train, synth_dataset(cfg.train.data), out_dir=out_dir)
    click.echo(f"final loss {result.final_loss:.6f}")
    click.echo(f"checkpoint {result.checkpoint_path}")


@cli.command("sample")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--label", type=int, default=-1, help="class id, -1 for unconditional")
@click.option("--count", type=int, default=16)
@click.option("--steps", type=int, default=50)
@click.option("--mode", type=click.Choice(["ode", "sde"]), default="sde")
@click.option("--churn", type=float, default=1.0)
@click.option("--guidance", type=float, default=1.5)
@click.option("--seed", type=int, default=0)
@click.option("--chunk", type=int, default=64, help="batched-forward group size")
@click.option("--out", "out", type=click.Path(), default=None)
def sample_cmd(checkpoint_path, label, count, steps, mode, churn, guidance, seed, chunk, out):
    """Generate latents from a checkpoint; writes a tensor dump and a PNG grid."""
    ck = load_checkpoint(checkpoint_path)
    cfg = ck.run_config
    sample_cfg = SampleConfig(
        steps=steps, mode=IntegratorMode(mode), churn=churn, guidance=guidance,
        label=None if label < 0 else label, seed=seed,
    )
    layout = cfg.train.layout.build(cfg.train.data.grid_shape)
    out_dir = _out_dir(out, f"sample-{config_hash(cfg)}-s{seed}")
    run_cfg = dataclasses.replace(cfg, sample=sample_cfg, sample_count=count)
    _write_provenance(out_dir, run_cfg, sys.argv[1:])
    latents = batch_generate(
        ck.model, layout, sample_cfg, count, derive_generator(seed, "sample"),
        chunk=chunk,
    )
    save_container(
        out_dir / "samples.nxc",
        {"format": "nextx-samples-v1", "seed": seed, "label": label},
        {"latents": latents},
    )
    save_image_grid(out_dir / "samples.png", latents)
    click.echo(f"wrote {count} samples to {out_dir}")


@cli.command("eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--count", type=int, default=None, help="generated sample count")
@click.option("--projections", type=int, default=None)
@click.option("--steps", type=int, default=None, help="override sampler steps")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), default=None)
def eval_cmd(checkpoint_path, count, projections, steps, seed, out):
    """Generate from a checkpoint and score against a held-out draw."""
    ck = load_checkpoint(checkpoint_path)
    cfg = ck.run_config
    ev = cfg.eval
    count = count if count is not None else ev.sample_count
    projections = projections if projections is not None else ev.projections
    seed = seed if seed is not None else ev.seed
    sample_cfg = cfg.sample if steps is None else dataclasses.replace(cfg.sample, steps=steps)

    layout = cfg.train.layout.build(cfg.train.data.grid_shape)
    out_dir = _out_dir(out, f"eval-{config_hash(cfg)}-s{seed}")
    _write_provenance(out_dir, cfg, sys.argv[1:])

    holdout = synth_dataset(
        dataclasses.replace(cfg.train.data, size=ev.holdout_size),
        seed=holdout_seed(cfg.train.data),
    )
    labels = None
    if ev.conditional:
        labels = torch.arange(count, dtype=torch.long) % cfg.train.data.num_classes
    samples = batch_generate(
        ck.model, layout, sample_cfg, count, derive_generator(seed, "eval-sample"),
        labels=labels, chunk=ev.chunk,
    )
    report = evaluate_samples(
        samples, holdout.latents, projections=projections,
        rng=derive_generator(seed, "eval-proj"),
        generated_labels=labels,
        reference_labels=holdout.labels if labels is not None else None,
        meta={"config_hash": config_hash(cfg), "seed": seed, "count": count},
    )
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
    click.echo(
        f"sliced_w2 {report.sliced_w2:.5f}  mean_err {report.mean_err:.5f}  "
        f"cov_err {report.cov_err:.5f}"
    )
    click.echo(f"report in {out_dir}")


@cli.command("ablate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--axis", type=click.Choice(AXES), required=True)
@click.option("--values", default=None, help="comma-separated axis values")
@click.option("--seeds", default="0", help="comma-separated training seeds")
@click.option("--out", "out", type=click.Path(), default=None)
def ablate_cmd(config_path, axis, values, seeds, out):
    """Sweep one axis, training one model per (value, seed)."""
    cfg = load_run_config(config_path) if config_path else default_run_config()
    if values is None:
        defaults = {
            "cell_size": "1,2,4",
            "time_policy": "clean,increasing,decreasing,random",
            "entity_kind": "token,cell,subsample,image",
            "steps": "10,50",
        }
        values = defaults[axis]
    value_list = [v.strip() for v in values.split(",") if v.strip()]
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    out_dir = _out_dir(out, f"ablate-{axis}-{config_hash(cfg)}")
    _write_provenance(out_dir, cfg, sys.argv[1:])
    rows = run_ablation(cfg, axis, value_list, seed_list, out_dir=out_dir)
    click.echo(format_table(rows), nl=False)
    click.echo(f"table in {out_dir / 'table.txt'}")


@cli.command("selftest")
def selftest_cmd() -> None:
    """Run the built-in invariant suite; nonzero exit on any failure."""
    from .selftest import run_selftest

    failures = run_selftest(stream=sys.stdout)
    if failures:
        raise click.ClickException(f"{failures} selftest check(s) failed")


def cli_main(argv: list[str] | None = None) -> int:
    """Entry point returning an exit status (2 on usage errors)."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    except NextXError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


def console_entry() -> None:
    sys.exit(cli_main(sys.argv[1:]))
