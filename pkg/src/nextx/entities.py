"""Prediction-entity construction.

A latent grid (h, w, c) is decomposed into an ordered sequence of entities,
each a contiguous run of tokens. Five granularities are supported:

- ``token``:     one grid position per entity, row-major order.
- ``cell``:      k x k spatially adjacent positions per entity, cells in
                 raster order, tokens inside a cell in raster order.
- ``subsample``: d^2 entities; entity (d1, d2) collects the positions
                 (d1 + i*d, d2 + j*d), i.e. a non-local grouping of tokens
                 at uniform stride d, offsets in raster order.
- ``scale``:     a coarse-to-fine pyramid; entity i is the latent resized
                 (area-averaged) to s_i x s_i and flattened row-major, with
                 the final scale equal to the full grid.
- ``image``:     the whole grid as a single entity.

All non-scale decompositions are pure index permutations and invert exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

import torch
import torch.nn.functional as F
from einops import rearrange

from .errors import LayoutError, ScheduleError


class EntityKind(str, Enum):
    TOKEN = "token"
    CELL = "cell"
    SUBSAMPLE = "subsample"
    SCALE = "scale"
    IMAGE = "image"


@dataclass(frozen=True)
class EntityLayout:
    """Immutable description of one grid-to-entity decomposition.

    ``spans`` lists (token_offset, token_count) per entity, contiguous and
    covering the token sequence exactly.
    """

    kind: EntityKind
    grid_shape: tuple[int, int, int]
    cell_size: int | None = None
    distance: int | None = None
    scales: tuple[int, ...] | None = None
    spans: tuple[tuple[int, int], ...] = ()

    @property
    def h(self) -> int:
        return self.grid_shape[0]

    @property
    def w(self) -> int:
        return self.grid_shape[1]

    @property
    def channels(self) -> int:
        return self.grid_shape[2]

    @property
    def num_entities(self) -> int:
        return len(self.spans)

    @property
    def total_tokens(self) -> int:
        return sum(count for _, count in self.spans)

    @property
    def span_counts(self) -> tuple[int, ...]:
        return tuple(count for _, count in self.spans)


@dataclass(frozen=True)
class LayoutSpec:
    """Grid-independent layout request, as written in run-config files."""

    kind: EntityKind
    cell_size: int | None = None
    distance: int | None = None
    scales: tuple[int, ...] | None = None
    num_scales: int | None = None

    def build(self, grid_shape: tuple[int, int, int]) -> EntityLayout:
        kind = EntityKind(self.kind)
        if kind is EntityKind.CELL:
            return build_layout(kind, grid_shape, self.cell_size)
        if kind is EntityKind.SUBSAMPLE:
            return build_layout(kind, grid_shape, self.distance)
        if kind is EntityKind.SCALE:
            if self.scales is not None:
                return build_layout(kind, grid_shape, list(self.scales))
            return build_layout(kind, grid_shape, self.num_scales)
        return build_layout(kind, grid_shape)


def default_scale_schedule(base: int, num_scales: int) -> list[int]:
    """Halving schedule [base / 2^(N-1), ..., base / 2, base].

    ``base`` must be divisible by 2^(N-1) so every scale is an integer.
    """
    if num_scales < 1:
        raise ScheduleError(f"need at least one scale, got {num_scales}")
    factor = 1 << (num_scales - 1)
    if base % factor != 0:
        raise ScheduleError(
            f"base {base} not divisible by 2^{num_scales - 1} = {factor}"
        )
    return [base // (1 << (num_scales - 1 - i)) for i in range(num_scales)]


def _spans_from_counts(counts: Sequence[int]) -> tuple[tuple[int, int], ...]:
    spans = []
    offset = 0
    for count in counts:
        spans.append((offset, count))
        offset += count
    return tuple(spans)


def build_layout(
    kind: EntityKind | str,
    grid_shape: tuple[int, int, int],
    param: int | Sequence[int] | None = None,
) -> EntityLayout:
    """Construct the entity layout for one grid shape.

    ``param`` is the cell size k (cell), the stride d (subsample), and for
    scale either an explicit ascending scale list or an integer count that
    selects the default halving schedule. Token and image take no param.
    """
    kind = EntityKind(kind)
    h, w, c = grid_shape
    if h < 1 or w < 1 or c < 1:
        raise LayoutError(f"invalid grid shape {grid_shape}")

    if kind is EntityKind.TOKEN:
        spans = _spans_from_counts([1] * (h * w))
        return EntityLayout(kind, grid_shape, spans=spans)

    if kind is EntityKind.IMAGE:
        return EntityLayout(kind, grid_shape, spans=((0, h * w),))

    if kind is EntityKind.CELL:
        if not isinstance(param, int):
            raise LayoutError(f"cell layout needs integer cell size, got {param!r}")
        k = param
        if k < 1 or h % k != 0 or w % k != 0:
            raise LayoutError(f"cell size {k} does not divide grid {h}x{w}")
        n = (h // k) * (w // k)
        spans = _spans_from_counts([k * k] * n)
        return EntityLayout(kind, grid_shape, cell_size=k, spans=spans)

    if kind is EntityKind.SUBSAMPLE:
        if not isinstance(param, int):
            raise LayoutError(f"subsample layout needs integer distance, got {param!r}")
        d = param
        if d < 1 or h % d != 0 or w % d != 0:
            raise LayoutError(f"distance {d} does not divide grid {h}x{w}")
        count = (h // d) * (w // d)
        spans = _spans_from_counts([count] * (d * d))
        return EntityLayout(kind, grid_shape, distance=d, spans=spans)

    if kind is EntityKind.SCALE:
        if h != w:
            raise LayoutError(f"scale layout requires a square grid, got {h}x{w}")
        if param is None:
            raise LayoutError("scale layout needs a scale list or a scale count")
        if isinstance(param, int):
            scales = default_scale_schedule(h, param)
        else:
            scales = list(param)
        if not scales or any(s < 1 for s in scales):
            raise LayoutError(f"scales must be positive, got {scales}")
        if any(a >= b for a, b in zip(scales, scales[1:])):
            raise LayoutError(f"scales must be strictly ascending, got {scales}")
        if scales[-1] != h:
            raise LayoutError(f"final scale {scales[-1]} must equal grid side {h}")
        spans = _spans_from_counts([s * s for s in scales])
        return EntityLayout(kind, grid_shape, scales=tuple(scales), spans=spans)

    raise LayoutError(f"unknown entity kind {kind!r}")


@dataclass
class EntitySequence:
    """Ordered entity tokens [total_tokens, c] plus the layout that made them."""

    tokens: torch.Tensor
    layout: EntityLayout

    def __post_init__(self) -> None:
        expected = (self.layout.total_tokens, self.layout.channels)
        if tuple(self.tokens.shape) != expected:
            raise LayoutError(
                f"token tensor {tuple(self.tokens.shape)} does not match layout {expected}"
            )


def _permute_to_tokens(latents: torch.Tensor, layout: EntityLayout) -> torch.Tensor:
    """The pure-permutation part of tokenization, any channel count."""
    kind = layout.kind
    h, w = layout.h, layout.w
    if kind in (EntityKind.TOKEN, EntityKind.IMAGE):
        return latents.reshape(latents.shape[0], h * w, -1)
    if kind is EntityKind.CELL:
        k = layout.cell_size
        return rearrange(latents, "b (hc k1) (wc k2) c -> b (hc wc k1 k2) c", k1=k, k2=k)
    if kind is EntityKind.SUBSAMPLE:
        d = layout.distance
        return rearrange(latents, "b (hs d1) (ws d2) c -> b (d1 d2 hs ws) c", d1=d, d2=d)
    raise LayoutError(f"kind {kind!r} is not a pure permutation")


def batch_latent_to_tokens(latents: torch.Tensor, layout: EntityLayout) -> torch.Tensor:
    """Convert [B, h, w, c] grids to [B, total_tokens, c] entity tokens."""
    h, w, c = layout.grid_shape
    if tuple(latents.shape[1:]) != (h, w, c):
        raise LayoutError(
            f"latent shape {tuple(latents.shape[1:])} does not match layout grid {(h, w, c)}"
        )
    if layout.kind is not EntityKind.SCALE:
        return _permute_to_tokens(latents, layout)
    x = latents.permute(0, 3, 1, 2)
    parts = []
    for s in layout.scales:
        if s == h:
            pooled = latents
        else:
            pooled = F.adaptive_avg_pool2d(x, (s, s)).permute(0, 2, 3, 1)
        parts.append(pooled.reshape(latents.shape[0], s * s, c))
    return torch.cat(parts, dim=1)


def batch_tokens_to_latent(tokens: torch.Tensor, layout: EntityLayout) -> torch.Tensor:
    """Invert :func:`batch_latent_to_tokens`; scale keeps only the final level."""
    h, w, c = layout.grid_shape
    if tuple(tokens.shape[1:]) != (layout.total_tokens, c):
        raise LayoutError(
            f"token shape {tuple(tokens.shape[1:])} does not match layout "
            f"({layout.total_tokens}, {c})"
        )
    kind = layout.kind
    if kind in (EntityKind.TOKEN, EntityKind.IMAGE):
        return tokens.reshape(-1, h, w, c)
    if kind is EntityKind.CELL:
        k = layout.cell_size
        return rearrange(
            tokens, "b (hc wc k1 k2) c -> b (hc k1) (wc k2) c",
            hc=h // k, wc=w // k, k1=k, k2=k,
        )
    if kind is EntityKind.SUBSAMPLE:
        d = layout.distance
        return rearrange(
            tokens, "b (d1 d2 hs ws) c -> b (hs d1) (ws d2) c",
            d1=d, d2=d, hs=h // d, ws=w // d,
        )
    if kind is EntityKind.SCALE:
        offset, count = layout.spans[-1]
        return tokens[:, offset:offset + count].reshape(-1, h, w, c)
    raise LayoutError(f"unknown entity kind {kind!r}")


def latent_to_entities(latent: torch.Tensor, layout: EntityLayout) -> EntitySequence:
    """Decompose one [h, w, c] grid into its entity token sequence."""
    tokens = batch_latent_to_tokens(latent.unsqueeze(0), layout)[0]
    return EntitySequence(tokens, layout)


def entities_to_latent(seq: EntitySequence) -> torch.Tensor:
    """Reassemble the grid; for scale layouts this reads the final level only."""
    return batch_tokens_to_latent(seq.tokens.unsqueeze(0), seq.layout)[0]


def entity_token_spans(layout: EntityLayout) -> list[tuple[int, int]]:
    """The ordered (offset, count) spans, one per entity."""
    return list(layout.spans)


@lru_cache(maxsize=64)
def entity_ids(layout: EntityLayout) -> torch.Tensor:
    """Long tensor [total_tokens] mapping each token to its entity index."""
    counts = torch.tensor(layout.span_counts, dtype=torch.long)
    return torch.repeat_interleave(torch.arange(layout.num_entities), counts)


@lru_cache(maxsize=64)
def token_grid_coords(layout: EntityLayout) -> torch.Tensor:
    """Normalized (row, col) center coordinates per token, shape [T, 2].

    Non-scale tokens sit on the full h x w grid; scale tokens sit on their
    own s_i x s_i grid, so centers of coarse and fine levels align.
    """
    h, w, c = layout.grid_shape
    if layout.kind is EntityKind.SCALE:
        parts = []
        for s in layout.scales:
            r = (torch.arange(s, dtype=torch.float32) + 0.5) / s
            rr, cc = torch.meshgrid(r, r, indexing="ij")
            parts.append(torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=1))
        return torch.cat(parts, dim=0)
    index_grid = torch.arange(h * w).reshape(1, h, w, 1)
    order = _permute_to_tokens(index_grid, layout)[0, :, 0]
    rows = (order // w).float()
    cols = (order % w).float()
    return torch.stack([(rows + 0.5) / h, (cols + 0.5) / w], dim=1)
