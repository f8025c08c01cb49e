"""Raster export of latent grids as a tiled PNG."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def save_image_grid(
    path: str | Path,
    latents: torch.Tensor,
    columns: int = 8,
    upscale: int = 24,
) -> None:
    """Tile [n, h, w, c] latents into one grayscale PNG.

    Channels are averaged and values min-max normalized over the full batch,
    so relative structure is preserved across tiles.
    """
    if latents.dim() != 4:
        raise ValueError(f"expected [n, h, w, c] latents, got {tuple(latents.shape)}")
    n, h, w, _ = latents.shape
    gray = latents.float().mean(dim=-1)
    lo, hi = float(gray.min()), float(gray.max())
    scale = (hi - lo) if hi > lo else 1.0
    gray = ((gray - lo) / scale * 255.0).round().clamp(0, 255).to(torch.uint8)

    columns = max(1, min(columns, n))
    rows = math.ceil(n / columns)
    canvas = np.zeros((rows * h, columns * w), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = gray[i].numpy()
    image = Image.fromarray(canvas, mode="L")
    if upscale > 1:
        image = image.resize((canvas.shape[1] * upscale, canvas.shape[0] * upscale), Image.NEAREST)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    image.save(path)
