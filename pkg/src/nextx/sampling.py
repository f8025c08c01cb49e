"""Autoregressive inference: one flow-matching solve per entity.

Entity n starts from fresh Gaussian noise and is integrated from t = 1 to
t = 0 while attending to the already-generated clean entities 1..n-1, whose
conditioning times are exactly zero (clean) at every inner step. Guidance
combines conditional and null-class velocity predictions per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

from .denoiser import cfg_combine, single_stream_geometry
from .entities import (
    EntityLayout, EntitySequence, batch_tokens_to_latent, entities_to_latent,
)
from .errors import DomainError
from .flow import IntegratorMode, integrate_entity
from .rngutil import derive_generator, draw_seed


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    mode: IntegratorMode = IntegratorMode.SDE
    churn: float = 1.0
    guidance: float = 1.5  # applied only to labeled sampling; 1.0 disables
    label: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if self.guidance < 0:
            raise DomainError(f"guidance must be nonnegative, got {self.guidance}")
        object.__setattr__(self, "mode", IntegratorMode(self.mode))


def _check_compatible(model, layout: EntityLayout) -> None:
    cfg = getattr(model, "config", None)
    if cfg is None:
        return  # oracle stubs carry no config
    if cfg.token_dim != layout.channels:
        raise DomainError(
            f"model token_dim {cfg.token_dim} != layout channels {layout.channels}"
        )
    if layout.num_entities > cfg.max_entities:
        raise DomainError(
            f"layout has {layout.num_entities} entities, model supports {cfg.max_entities}"
        )


def generate(
    model,
    layout: EntityLayout,
    cfg: SampleConfig,
    rng: torch.Generator,
) -> torch.Tensor:
    """Sample one latent grid [h, w, c].

    Each entity uses its own derived noise stream, so the n-th clean
    estimate depends only on the first n streams, the label and the
    parameters. In ODE mode (or churn = 0) the output is a deterministic
    function of the seed.
    """
    _check_compatible(model, layout)
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    dtype = params[0].dtype if params else torch.float32
    c = layout.channels
    master = draw_seed(rng)
    geom_full = single_stream_geometry(layout)
    label = cfg.label
    guided = label is not None and cfg.guidance != 1.0

    prefix = torch.zeros(1, 0, c, dtype=dtype)
    with torch.no_grad():
        for n, (offset, count) in enumerate(layout.spans):
            geom = geom_full.prefix(n + 1)

            def velocity(f: torch.Tensor, t: float) -> torch.Tensor:
                toks = torch.cat([prefix, f.unsqueeze(0)], dim=1)
                times = torch.zeros(1, n + 1, dtype=dtype)
                times[0, n] = t
                if label is None:
                    v = model(toks, times, geom, None)
                else:
                    v = model(toks, times, geom, label)
                    if guided:
                        v_uncond = model(toks, times, geom, None)
                        v = cfg_combine(v, v_uncond, cfg.guidance)
                return v[0, offset:offset + count]

            entity_rng = derive_generator(master, n)
            clean = integrate_entity(
                velocity, (count, c), cfg.steps, cfg.mode, cfg.churn,
                entity_rng, dtype=dtype,
            )
            prefix = torch.cat([prefix, clean.unsqueeze(0)], dim=1)

    seq = EntitySequence(prefix[0], layout)
    return entities_to_latent(seq)


def _generate_chunk(
    model,
    layout: EntityLayout,
    cfg: SampleConfig,
    labels: torch.Tensor | None,
    masters: list[int],
    dtype: torch.dtype,
) -> torch.Tensor:
    """Batched replay of the sequential sampler for a group of samples.

    Noise is drawn per sample from exactly the streams the sequential path
    would use (init draw, then SDE step draws, per entity), so outputs match
    per-sample generation up to the float reduction order of batched matmuls.
    """
    b = len(masters)
    c = layout.channels
    geom_full = single_stream_geometry(layout)
    guided = labels is not None and cfg.guidance != 1.0
    stochastic = cfg.mode is IntegratorMode.SDE and cfg.churn > 0
    dt = 1.0 / cfg.steps
    prefix = torch.zeros(b, 0, c, dtype=dtype)
    with torch.no_grad():
        for n, (offset, count) in enumerate(layout.spans):
            gens = [derive_generator(m, n) for m in masters]
            f = torch.stack(
                [torch.randn(count, c, generator=g, dtype=dtype) for g in gens]
            )
            geom = geom_full.prefix(n + 1)
            for i in range(cfg.steps):
                t = (cfg.steps - i) / cfg.steps
                toks = torch.cat([prefix, f], dim=1)
                times = torch.zeros(b, n + 1, dtype=dtype)
                times[:, n] = t
                if labels is None:
                    v = model(toks, times, geom, None)
                else:
                    v = model(toks, times, geom, labels)
                    if guided:
                        v_uncond = model(toks, times, geom, None)
                        v = cfg_combine(v, v_uncond, cfg.guidance)
                f = f - dt * v[:, offset:offset + count]
                if stochastic:
                    xi = torch.stack(
                        [torch.randn(count, c, generator=g, dtype=dtype) for g in gens]
                    )
                    f = f + cfg.churn * math.sqrt(dt) * t * xi
            prefix = torch.cat([prefix, f], dim=1)
    return batch_tokens_to_latent(prefix, layout)


def batch_generate(
    model,
    layout: EntityLayout,
    cfg: SampleConfig,
    count: int,
    rng: torch.Generator,
    labels: torch.Tensor | list[int] | None = None,
    chunk: int | None = None,
) -> torch.Tensor:
    """Draw ``count`` independent samples, stacked [count, h, w, c].

    Sample i runs under the stream derived from (master, i), where master is
    one draw from ``rng``; results do not depend on generation order, and
    sample 0 equals ``generate`` under that derived stream. ``labels``
    optionally overrides ``cfg.label`` per sample.

    ``chunk`` batches the model passes over groups of that size for
    throughput. The per-sample noise streams are identical either way;
    chunked outputs can differ from sequential ones only at float epsilon.
    """
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    if labels is not None and len(labels) != count:
        raise DomainError(f"got {len(labels)} labels for {count} samples")
    master = draw_seed(rng)
    if chunk is None:
        outputs = []
        for i in range(count):
            sample_cfg = cfg if labels is None else replace(cfg, label=int(labels[i]))
            stream = derive_generator(master, i)
            outputs.append(generate(model, layout, sample_cfg, stream))
        return torch.stack(outputs)

    if chunk < 1:
        raise DomainError(f"chunk must be >= 1, got {chunk}")
    _check_compatible(model, layout)
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    dtype = params[0].dtype if params else torch.float32
    masters = [draw_seed(derive_generator(master, i)) for i in range(count)]
    if labels is None and cfg.label is not None:
        labels = torch.full((count,), cfg.label, dtype=torch.long)
    elif labels is not None and not torch.is_tensor(labels):
        labels = torch.tensor([int(v) for v in labels], dtype=torch.long)
    pieces = []
    for lo in range(0, count, chunk):
        hi = min(lo + chunk, count)
        sub = None if labels is None else labels[lo:hi]
        pieces.append(_generate_chunk(model, layout, cfg, sub, masters[lo:hi], dtype))
    return torch.cat(pieces, dim=0)


def sample_stream(rng: torch.Generator, index: int) -> torch.Generator:
    """The per-sample stream :func:`batch_generate` uses, for replay.

    Consumes one draw from ``rng``, exactly as batch_generate does.
    """
    return derive_generator(draw_seed(rng), index)
