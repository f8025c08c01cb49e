"""Velocity-prediction transformer with block-causal entity attention.

Each token attends to every token of its own entity and of earlier entities,
never later ones. Conditioning (noise time per entity + class label) enters
through adaptive layer-norm modulation computed per entity and broadcast to
that entity's tokens. The final projection is zero-initialized so a fresh
model predicts zero velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import torch
import torch.nn as nn

from .entities import EntityLayout, entity_ids, token_grid_coords
from .errors import DomainError, MaskError

Spans = tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int
    width: int
    heads: int
    token_dim: int
    max_tokens: int
    num_classes: int
    max_entities: int | None = None
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    attn_dropout: float = 0.0
    label_dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.width % self.heads != 0:
            raise DomainError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 4 != 0:
            raise DomainError(f"width must be divisible by 4 for 2D position features")
        for name in ("dropout", "attn_dropout", "label_dropout"):
            rate = getattr(self, name)
            if not (0.0 <= rate < 1.0):
                raise DomainError(f"{name} must be in [0, 1), got {rate}")
        if self.max_entities is None:
            object.__setattr__(self, "max_entities", self.max_tokens)

    @property
    def null_class(self) -> int:
        return self.num_classes


def _validate_spans(spans: Spans) -> None:
    offset = 0
    for span_offset, count in spans:
        if count < 1:
            raise MaskError(f"empty span {span_offset, count}")
        if span_offset != offset:
            raise MaskError(f"spans overlap or leave gaps at offset {span_offset}")
        offset += count


def build_block_causal_mask(spans: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Boolean [T, T] mask; True means "query may attend to key".

    Tokens of entity n see all tokens of entities 1..n, including the full
    diagonal block, and nothing later.
    """
    spans = tuple(spans)
    _validate_spans(spans)
    counts = torch.tensor([c for _, c in spans], dtype=torch.long)
    ids = torch.repeat_interleave(torch.arange(len(spans)), counts)
    return ids.unsqueeze(1) >= ids.unsqueeze(0)


def build_dual_stream_mask(spans: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Mask [2T, 2T] for noisy-context training with a separate target stream.

    Layout: tokens [0, T) are the context copy, tokens [T, 2T) the target
    copy. Context tokens are block-causal among themselves. A target token
    of entity n sees context entities 1..n-1 plus its own target-entity
    block, and no other target tokens.
    """
    spans = tuple(spans)
    _validate_spans(spans)
    counts = torch.tensor([c for _, c in spans], dtype=torch.long)
    ids = torch.repeat_interleave(torch.arange(len(spans)), counts)
    total = int(counts.sum())
    mask = torch.zeros(2 * total, 2 * total, dtype=torch.bool)
    ctx_causal = ids.unsqueeze(1) >= ids.unsqueeze(0)
    mask[:total, :total] = ctx_causal
    mask[total:, :total] = ids.unsqueeze(1) > ids.unsqueeze(0)
    mask[total:, total:] = ids.unsqueeze(1) == ids.unsqueeze(0)
    return mask


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: v_uncond + w * (v_cond - v_uncond).

    The endpoints w = 1 and w = 0 return the corresponding input exactly
    rather than through the (round-off-prone) affine form.
    """
    if w < 0:
        raise DomainError(f"guidance scale must be nonnegative, got {w}")
    if v_cond.shape != v_uncond.shape:
        raise DomainError("conditional/unconditional shapes differ")
    if w == 1.0:
        return v_cond
    if w == 0.0:
        return v_uncond
    return v_uncond + w * (v_cond - v_uncond)


@dataclass(frozen=True)
class TokenGeometry:
    """Per-token structure the model needs: conditioning slot, entity index,
    grid coordinates, and the attention mask. Built once per layout."""

    spans: Spans
    slot_ids: torch.Tensor      # [T'] long, row into the times matrix
    entity_ids: torch.Tensor    # [T'] long, entity-index embedding id
    coords: torch.Tensor        # [T', 2] float in [0, 1]
    mask: torch.Tensor          # [T', T'] bool
    num_slots: int

    def prefix(self, n_entities: int) -> "TokenGeometry":
        """Restrict a single-stream geometry to the first n entities."""
        offset, count = self.spans[n_entities - 1]
        upto = offset + count
        return TokenGeometry(
            spans=self.spans[:n_entities],
            slot_ids=self.slot_ids[:upto],
            entity_ids=self.entity_ids[:upto],
            coords=self.coords[:upto],
            mask=self.mask[:upto, :upto],
            num_slots=n_entities,
        )


@lru_cache(maxsize=64)
def single_stream_geometry(layout: EntityLayout) -> TokenGeometry:
    ids = entity_ids(layout)
    return TokenGeometry(
        spans=layout.spans,
        slot_ids=ids,
        entity_ids=ids,
        coords=token_grid_coords(layout),
        mask=build_block_causal_mask(layout.spans),
        num_slots=layout.num_entities,
    )


@lru_cache(maxsize=64)
def dual_stream_geometry(layout: EntityLayout) -> TokenGeometry:
    """Geometry for the two-stream training pass.

    Conditioning slots 0..N-1 hold the context times and N..2N-1 the target
    times; both copies of entity n share entity index n and grid coords.
    """
    ids = entity_ids(layout)
    n = layout.num_entities
    coords = token_grid_coords(layout)
    return TokenGeometry(
        spans=layout.spans,
        slot_ids=torch.cat([ids, ids + n]),
        entity_ids=torch.cat([ids, ids]),
        coords=torch.cat([coords, coords]),
        mask=build_dual_stream_mask(layout.spans),
        num_slots=2 * n,
    )


def sinusoidal_embedding(x: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Sin/cos features of a scalar in [0, 1], shape [..., dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / half
    )
    args = x.unsqueeze(-1) * scale * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _dropout(
    x: torch.Tensor, p: float, train_mode: bool, rng: torch.Generator | None
) -> torch.Tensor:
    if not train_mode or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, device=x.device, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale) + shift


class EntityAttention(nn.Module):
    """Masked multi-head self-attention with explicit softmax."""

    def __init__(self, width: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor,
        attn_dropout: float,
        train_mode: bool,
        rng: torch.Generator | None,
    ) -> torch.Tensor:
        b, t, _ = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each [b, heads, t, hd]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = _dropout(attn, attn_dropout, train_mode, rng)
        out = (attn @ v).transpose(1, 2).reshape(b, t, -1)
        return self.proj(out)


class DenoiserBlock(nn.Module):
    """Pre-norm transformer block with per-token adaptive-norm modulation."""

    def __init__(self, width: int, heads: int, mlp_ratio: float) -> None:
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = EntityAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)
        self.ada = nn.Linear(width, 6 * width)

    def forward(self, x, cond, mask, cfg, train_mode, rng):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(
            torch.nn.functional.silu(cond)
        ).chunk(6, dim=-1)
        h = self.attn(
            _modulate(self.norm1(x), shift1, scale1),
            mask, cfg.attn_dropout, train_mode, rng,
        )
        x = x + gate1 * _dropout(h, cfg.dropout, train_mode, rng)
        h = self.fc2(torch.nn.functional.gelu(self.fc1(_modulate(self.norm2(x), shift2, scale2))))
        return x + gate2 * _dropout(h, cfg.dropout, train_mode, rng)


class VelocityDenoiser(nn.Module):
    """The per-entity velocity field v_hat = f(noisy tokens, times, label)."""

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        w = config.width
        self.in_proj = nn.Linear(config.token_dim, w)
        self.entity_embed = nn.Embedding(config.max_entities, w)
        self.class_embed = nn.Embedding(config.num_classes + 1, w)
        self.time_fc1 = nn.Linear(w, w)
        self.time_fc2 = nn.Linear(w, w)
        self.blocks = nn.ModuleList(
            DenoiserBlock(w, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.final_norm = nn.LayerNorm(w, elementwise_affine=False)
        self.final_ada = nn.Linear(w, 2 * w)
        self.head = nn.Linear(w, config.token_dim)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _position_features(self, geom: TokenGeometry, dtype: torch.dtype) -> torch.Tensor:
        w = self.config.width
        coords = geom.coords.to(dtype)
        row = sinusoidal_embedding(coords[:, 0], w // 2)
        col = sinusoidal_embedding(coords[:, 1], w // 2)
        return torch.cat([row, col], dim=-1)

    def forward(
        self,
        tokens: torch.Tensor,
        times: torch.Tensor,
        geom: TokenGeometry,
        labels: torch.Tensor | int | None = None,
        train_mode: bool = False,
        rng: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Predict per-token velocities.

        tokens: [B, T', c]; times: [B, num_slots]; labels: [B] class ids,
        a single int, or None for unconditional. In train mode label dropout
        and the configured dropout rates are active and draw from ``rng``.
        """
        cfg = self.config
        if tokens.dim() != 3 or tokens.shape[-1] != cfg.token_dim:
            raise DomainError(f"expected tokens [B, T, {cfg.token_dim}], got {tuple(tokens.shape)}")
        b, t, _ = tokens.shape
        if t != geom.slot_ids.shape[0]:
            raise DomainError(f"got {t} tokens for geometry of {geom.slot_ids.shape[0]}")
        if times.dim() != 2 or times.shape != (b, geom.num_slots):
            raise DomainError(f"expected times [{b}, {geom.num_slots}], got {tuple(times.shape)}")
        if int(geom.entity_ids.max()) >= cfg.max_entities:
            raise DomainError("layout has more entities than the model was built for")
        stochastic = cfg.dropout > 0 or cfg.attn_dropout > 0 or (
            cfg.label_dropout > 0 and labels is not None
        )
        if train_mode and stochastic and rng is None:
            raise DomainError("train_mode forward with active dropout needs an rng")
        dtype = self.head.weight.dtype

        if labels is None:
            label_ids = torch.full((b,), cfg.null_class, dtype=torch.long)
        else:
            if isinstance(labels, int):
                labels = torch.full((b,), labels, dtype=torch.long)
            label_ids = labels.long()
            if int(label_ids.min()) < 0 or int(label_ids.max()) >= cfg.num_classes:
                raise DomainError("class label out of range")
            if train_mode and cfg.label_dropout > 0.0:
                if rng is None:
                    raise DomainError("train_mode with label dropout needs an rng")
                drop = torch.rand(b, generator=rng) < cfg.label_dropout
                label_ids = torch.where(drop, torch.full_like(label_ids, cfg.null_class), label_ids)

        t_emb = sinusoidal_embedding(times.to(dtype), cfg.width)
        t_emb = self.time_fc2(torch.nn.functional.silu(self.time_fc1(t_emb)))  # [B, M, W]
        cond_slots = t_emb + self.class_embed(label_ids).unsqueeze(1)
        cond = cond_slots[:, geom.slot_ids]  # [B, T', W]

        x = self.in_proj(tokens.to(dtype))
        x = x + self._position_features(geom, dtype) + self.entity_embed(geom.entity_ids)
        mask = geom.mask
        for block in self.blocks:
            x = block(x, cond, mask, cfg, train_mode, rng)

        shift, scale = self.final_ada(torch.nn.functional.silu(cond)).chunk(2, dim=-1)
        x = _modulate(self.final_norm(x), shift, scale)
        return self.head(x)


def init_parameters(model: VelocityDenoiser, rng: torch.Generator | None = None) -> None:
    """Deterministic initialization from an explicit generator.

    Truncated-normal weights (std 0.02), zero biases; every adaptive-norm
    projection and the output head start at exactly zero so the initial
    model is the zero velocity field.
    """
    for name, param in sorted(model.named_parameters()):
        if name.endswith("bias") or ".ada." in name or name.startswith(("final_ada", "head")):
            nn.init.zeros_(param)
        else:
            nn.init.trunc_normal_(param, std=0.02, generator=rng)


def predict_velocity(
    model: VelocityDenoiser,
    seq_tokens: torch.Tensor,
    times: torch.Tensor,
    layout: EntityLayout,
    labels: torch.Tensor | int | None = None,
    train_mode: bool = False,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Single-stream forward over a full layout; accepts [T, c] or [B, T, c]."""
    geom = single_stream_geometry(layout)
    squeeze = seq_tokens.dim() == 2
    if squeeze:
        seq_tokens = seq_tokens.unsqueeze(0)
        times = times.unsqueeze(0)
    out = model(seq_tokens, times, geom, labels, train_mode, rng)
    return out[0] if squeeze else out
