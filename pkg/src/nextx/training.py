"""Noisy-context training.

The default (random) policy noises every entity independently and trains the
model to regress each entity's velocity from all preceding noisy entities
plus its own noisy self, in one block-causal pass.

The constrained context policies (clean / increasing / decreasing) cannot be
expressed in a single stream, because the current entity must stay freshly
noised while its context follows the policy. Those run a dual-stream pass:
a context copy noised with the policy's times and a target copy where every
entity gets its own independent time and noise. Entity n's prediction
attends to context entities 1..n-1 and to its own target block, and the
loss is computed on the target stream. For the random policy the two
constructions coincide in distribution, so the cheaper single stream is used.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import DatasetSpec, SyntheticDataset
from .denoiser import (
    DenoiserConfig,
    VelocityDenoiser,
    dual_stream_geometry,
    init_parameters,
    single_stream_geometry,
)
from .entities import EntityLayout, LayoutSpec, batch_latent_to_tokens
from .errors import DomainError, TrainingError
from .flow import TimePolicy, interpolate, sample_times_batch, velocity_target
from .rngutil import derive_generator

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


@dataclass(frozen=True)
class TrainConfig:
    policy: TimePolicy
    epochs: int
    warmup_epochs: int
    batch_size: int
    peak_lr: float
    end_lr: float
    weight_decay: float
    betas: tuple[float, float]
    seed: int
    layout: LayoutSpec
    denoiser: DenoiserConfig
    data: DatasetSpec
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 0  # epochs between checkpoints, 0 = final only

    def __post_init__(self) -> None:
        if not (0 <= self.warmup_epochs < self.epochs):
            raise DomainError(
                f"need 0 <= warmup ({self.warmup_epochs}) < epochs ({self.epochs})"
            )
        if not (0 < self.end_lr <= self.peak_lr):
            raise DomainError(f"need 0 < end_lr <= peak_lr, got {self.end_lr}, {self.peak_lr}")
        if self.batch_size < 1:
            raise DomainError("batch_size must be positive")


@dataclass
class LossReport:
    total: float
    per_entity: list[float]
    grad_norm: float | None = None


@dataclass
class TrainResult:
    model: VelocityDenoiser
    metrics: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None
    final_loss: float = math.nan


def ncl_loss(
    model,
    tokens: torch.Tensor,
    labels: torch.Tensor | None,
    policy: TimePolicy | str,
    layout: EntityLayout,
    rng: torch.Generator,
    train_mode: bool = True,
) -> tuple[torch.Tensor, LossReport]:
    """Velocity-regression loss over all entities of a batch.

    ``tokens`` is the clean entity sequence [B, T, c]. Returns the
    differentiable scalar loss (mean squared error over batch, tokens and
    channels) and a report with the per-entity means; the caller fills in
    the gradient norm after backward.
    """
    policy = TimePolicy(policy)
    if tokens.dim() != 3:
        raise DomainError(f"expected tokens [B, T, c], got {tuple(tokens.shape)}")
    b, t, _ = tokens.shape
    n = layout.num_entities

    if policy is TimePolicy.RANDOM:
        times = torch.rand(b, n, generator=rng)
        eps = torch.randn(tokens.shape, generator=rng, dtype=tokens.dtype)
        noisy = interpolate(tokens, eps, times, layout)
        geom = single_stream_geometry(layout)
        v_hat = model(noisy, times, geom, labels, train_mode, rng)
    else:
        ctx_times = sample_times_batch(policy, b, n, rng)
        tgt_times = torch.rand(b, n, generator=rng)
        ctx_eps = torch.randn(tokens.shape, generator=rng, dtype=tokens.dtype)
        eps = torch.randn(tokens.shape, generator=rng, dtype=tokens.dtype)
        ctx_noisy = interpolate(tokens, ctx_eps, ctx_times, layout)
        tgt_noisy = interpolate(tokens, eps, tgt_times, layout)
        both = torch.cat([ctx_noisy, tgt_noisy], dim=1)
        times = torch.cat([ctx_times, tgt_times], dim=1)
        geom = dual_stream_geometry(layout)
        v_hat = model(both, times, geom, labels, train_mode, rng)[:, t:]

    err = (v_hat - velocity_target(tokens, eps)) ** 2
    loss = err.mean()
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss under policy {policy.value} "
            f"(batch {b}, finite inputs: {bool(torch.isfinite(tokens).all())})"
        )
    with torch.no_grad():
        per_entity = [
            float(err[:, off:off + cnt].mean()) for off, cnt in layout.spans
        ]
    return loss, LossReport(total=float(loss.detach()), per_entity=per_entity)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float, end_lr: float) -> float:
    """Linear warmup to the peak, then cosine decay to the end value."""
    if not (0 <= step <= total_steps):
        raise DomainError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return end_lr + 0.5 * (peak_lr - end_lr) * (1.0 + math.cos(math.pi * progress))


def build_model(config: TrainConfig) -> VelocityDenoiser:
    """Construct and deterministically initialize the denoiser for a config."""
    model = VelocityDenoiser(config.denoiser)
    init_parameters(model, derive_generator(config.seed, "init"))
    return model


def train(
    config: TrainConfig,
    dataset: SyntheticDataset,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the optimization loop; deterministic given config.seed.

    Writes ``metrics.jsonl`` and ``checkpoint.nxc`` under ``out_dir`` when
    given. Aborts with :class:`TrainingError` after
    ``DIVERGENCE_PATIENCE`` consecutive steps above 10x the initial loss.
    """
    from . import checkpoint as ckpt  # local import: checkpoint depends on TrainConfig

    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    layout = config.layout.build(config.data.grid_shape)
    tokens_all = batch_latent_to_tokens(dataset.latents, layout)
    labels_all = dataset.labels

    model = build_model(config)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=0.0, betas=config.betas, weight_decay=config.weight_decay
    )
    order_rng = derive_generator(config.seed, "batch-order")
    loss_rng = derive_generator(config.seed, "loss")

    size = len(dataset)
    steps_per_epoch = math.ceil(size / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_path / "metrics.jsonl", "w")

    metrics: list[dict] = []
    initial_loss = None
    divergence_streak = 0
    step = 0
    start = time.monotonic()
    result = TrainResult(model=model)

    try:
        for epoch in range(config.epochs):
            perm = torch.randperm(size, generator=order_rng)
            for lo in range(0, size, config.batch_size):
                idx = perm[lo:lo + config.batch_size]
                lr = lr_at(step, total_steps, warmup_steps, config.peak_lr, config.end_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                loss, report = ncl_loss(
                    model, tokens_all[idx], labels_all[idx],
                    config.policy, layout, loss_rng,
                )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                grad_norm = float(
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                )
                optimizer.step()
                report.grad_norm = grad_norm

                if initial_loss is None:
                    initial_loss = report.total
                if report.total > DIVERGENCE_FACTOR * initial_loss:
                    divergence_streak += 1
                    if divergence_streak >= DIVERGENCE_PATIENCE:
                        raise TrainingError(
                            f"diverged: loss {report.total:.4g} > "
                            f"{DIVERGENCE_FACTOR}x initial {initial_loss:.4g} "
                            f"for {divergence_streak} consecutive steps (step {step})"
                        )
                else:
                    divergence_streak = 0

                if step % config.log_every == 0 or step == total_steps - 1:
                    row = {
                        "step": step,
                        "epoch": epoch,
                        "loss": report.total,
                        "lr": lr,
                        "grad_norm": grad_norm,
                        "per_entity": report.per_entity,
                        "elapsed": round(time.monotonic() - start, 3),
                    }
                    metrics.append(row)
                    if metrics_fh is not None:
                        metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                        metrics_fh.flush()
                result.final_loss = report.total
                step += 1

            periodic = (
                config.checkpoint_every > 0
                and (epoch + 1) % config.checkpoint_every == 0
                and out_path is not None
            )
            if periodic:
                ckpt.save_checkpoint(
                    out_path / "checkpoint.nxc", model, config,
                    optimizer=optimizer, step=step,
                    rng_states={"batch-order": order_rng, "loss": loss_rng},
                )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    result.metrics = metrics
    if out_path is not None:
        path = out_path / "checkpoint.nxc"
        ckpt.save_checkpoint(
            path, model, config, optimizer=optimizer, step=step,
            rng_states={"batch-order": order_rng, "loss": loss_rng},
        )
        result.checkpoint_path = path
    return result
