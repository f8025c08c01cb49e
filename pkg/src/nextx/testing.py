"""Stub models used by the self-test command and the test suite."""

from __future__ import annotations

import torch

from .denoiser import TokenGeometry
from .entities import EntityLayout, latent_to_entities


class OracleVelocityModel:
    """Exact straight-line velocity field toward a fixed target latent.

    On the interpolant F = (1 - t) X + t eps the true velocity eps - X
    equals (F - X) / t for t > 0, so the field can be evaluated from the
    current state alone. Tokens conditioned at t = 0 (the clean prefix at
    inference) get zero velocity; their outputs are never read.
    """

    def __init__(self, target_latent: torch.Tensor, layout: EntityLayout,
                 dtype: torch.dtype = torch.float64) -> None:
        self.layout = layout
        self.dtype = dtype
        self.target = latent_to_entities(target_latent.to(dtype), layout).tokens

    def parameters(self):
        return iter([torch.zeros(1, dtype=self.dtype)])

    def __call__(
        self,
        tokens: torch.Tensor,
        times: torch.Tensor,
        geom: TokenGeometry,
        labels=None,
        train_mode: bool = False,
        rng=None,
    ) -> torch.Tensor:
        t_tok = times[:, geom.slot_ids].unsqueeze(-1).to(tokens.dtype)
        target = self.target[: tokens.shape[1]].to(tokens.dtype)
        velocity = torch.where(
            t_tok > 0,
            (tokens - target) / t_tok.clamp(min=torch.finfo(tokens.dtype).tiny),
            torch.zeros_like(tokens),
        )
        return velocity


class ZeroVelocityModel:
    """Predicts zero velocity everywhere (the fresh-initialization behavior)."""

    def __init__(self, dtype: torch.dtype = torch.float32) -> None:
        self.dtype = dtype

    def parameters(self):
        return iter([torch.zeros(1, dtype=self.dtype)])

    def __call__(self, tokens, times, geom, labels=None, train_mode=False, rng=None):
        return torch.zeros_like(tokens)


def randomize_parameters(model, rng: torch.Generator, std: float = 0.05) -> None:
    """Add noise to every parameter, including the zero-initialized output
    path, so probes see a non-degenerate function."""
    with torch.no_grad():
        for _, param in sorted(model.named_parameters()):
            param.add_(std * torch.randn(param.shape, generator=rng, dtype=param.dtype))
