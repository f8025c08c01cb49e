"""Synthetic class-conditional latent distributions with known ground truth,
plus a lossless space-to-depth codec standing in for a learned tokenizer.

Every dataset kind exposes its exact per-class mean via :func:`class_means`,
so moment-level evaluation has an analytic reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
from einops import rearrange

from .errors import CodecError, DomainError
from .rngutil import derive_generator, derive_seed


class DatasetKind(str, Enum):
    GAUSSIAN_MIXTURE = "gaussian_mixture"
    STRUCTURED_PATTERNS = "structured_patterns"
    TINY_IMAGES = "tiny_images"


@dataclass(frozen=True)
class DatasetSpec:
    kind: DatasetKind
    grid_shape: tuple[int, int, int]
    num_classes: int
    size: int
    seed: int = 0
    noise_scale: float = 0.25
    mean_scale: float = 1.0
    image_factor: int = 2  # tiny_images only: codec downsampling factor

    def __post_init__(self) -> None:
        h, w, c = self.grid_shape
        if h < 1 or w < 1 or c < 1:
            raise DomainError(f"bad grid shape {self.grid_shape}")
        if self.num_classes < 1:
            raise DomainError("need at least one class")
        if self.size < 0:
            raise DomainError("size must be nonnegative")
        if self.noise_scale <= 0:
            raise DomainError("noise scale must be positive")
        if self.kind is DatasetKind.TINY_IMAGES and c % self.image_factor ** 2 != 0:
            raise DomainError(
                f"tiny_images needs channels divisible by f^2 = {self.image_factor ** 2}"
            )


@dataclass
class SyntheticDataset:
    latents: torch.Tensor  # [size, h, w, c]
    labels: torch.Tensor   # [size] long
    spec: DatasetSpec

    def __len__(self) -> int:
        return self.latents.shape[0]


def patchify_codec_encode(image: torch.Tensor, f: int) -> torch.Tensor:
    """Lossless space-to-depth: [H, W, C] -> [H/f, W/f, C*f*f]."""
    if image.dim() != 3:
        raise CodecError(f"expected [H, W, C] image, got shape {tuple(image.shape)}")
    h, w, _ = image.shape
    if f < 1 or h % f != 0 or w % f != 0:
        raise CodecError(f"factor {f} does not divide image {h}x{w}")
    return rearrange(image, "(h f1) (w f2) c -> h w (f1 f2 c)", f1=f, f2=f)


def patchify_codec_decode(latent: torch.Tensor, f: int) -> torch.Tensor:
    """Exact inverse of :func:`patchify_codec_encode`."""
    if latent.dim() != 3:
        raise CodecError(f"expected [h, w, c] latent, got shape {tuple(latent.shape)}")
    if f < 1 or latent.shape[2] % (f * f) != 0:
        raise CodecError(f"latent channels {latent.shape[2]} not divisible by f^2 = {f * f}")
    return rearrange(latent, "h w (f1 f2 c) -> (h f1) (w f2) c", f1=f, f2=f)


def _mixture_means(spec: DatasetSpec) -> torch.Tensor:
    h, w, c = spec.grid_shape
    gen = derive_generator(spec.seed, "mixture-means")
    return spec.mean_scale * torch.randn(spec.num_classes, h, w, c, generator=gen)


def _pattern_means(spec: DatasetSpec) -> torch.Tensor:
    """Oriented sinusoidal gratings; class sets orientation and frequency."""
    h, w, c = spec.grid_shape
    rows = (torch.arange(h, dtype=torch.float32) + 0.5) / h
    cols = (torch.arange(w, dtype=torch.float32) + 0.5) / w
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    means = torch.empty(spec.num_classes, h, w, c)
    for j in range(spec.num_classes):
        theta = math.pi * j / spec.num_classes
        freq = 1.0 + (j % 4)
        phase_axis = rr * math.cos(theta) + cc * math.sin(theta)
        for ch in range(c):
            means[j, :, :, ch] = torch.sin(
                2.0 * math.pi * freq * phase_axis + ch * math.pi / 2.0
            )
    return spec.mean_scale * means


def _blob_means(spec: DatasetSpec) -> torch.Tensor:
    """Per-class Gaussian blob rendered in pixel space, then codec-encoded."""
    h, w, c = spec.grid_shape
    f = spec.image_factor
    H, W, C = h * f, w * f, c // (f * f)
    side = max(1, math.ceil(math.sqrt(spec.num_classes)))
    rows = (torch.arange(H, dtype=torch.float32) + 0.5) / H
    cols = (torch.arange(W, dtype=torch.float32) + 0.5) / W
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    means = torch.empty(spec.num_classes, h, w, c)
    for j in range(spec.num_classes):
        cy = (j // side + 0.5) / side
        cx = (j % side + 0.5) / side
        radius = 0.15 + 0.1 * (j % 3) / 2.0
        blob = torch.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2.0 * radius ** 2))
        image = blob.unsqueeze(-1).expand(H, W, C)
        means[j] = patchify_codec_encode(image * spec.mean_scale, f)
    return means


def class_means(spec: DatasetSpec) -> torch.Tensor:
    """Exact class-conditional means, shape [num_classes, h, w, c]."""
    if spec.kind is DatasetKind.GAUSSIAN_MIXTURE:
        return _mixture_means(spec)
    if spec.kind is DatasetKind.STRUCTURED_PATTERNS:
        return _pattern_means(spec)
    if spec.kind is DatasetKind.TINY_IMAGES:
        return _blob_means(spec)
    raise DomainError(f"unknown dataset kind {spec.kind!r}")


def synth_dataset(spec: DatasetSpec, seed: int | None = None) -> SyntheticDataset:
    """Draw a dataset: balanced shuffled labels, class mean plus isotropic noise.

    ``seed`` overrides the spec seed for the *draw* only (the class means are
    always tied to the spec seed), which is how held-out splits are made.
    """
    h, w, c = spec.grid_shape
    draw_seed = spec.seed if seed is None else seed
    means = class_means(spec)
    labels = torch.arange(spec.size, dtype=torch.long) % spec.num_classes
    if spec.size > 0:
        perm_gen = derive_generator(draw_seed, "labels")
        labels = labels[torch.randperm(spec.size, generator=perm_gen)]
    noise_gen = derive_generator(draw_seed, "noise")
    noise = torch.randn(spec.size, h, w, c, generator=noise_gen)
    latents = means[labels] + spec.noise_scale * noise
    return SyntheticDataset(latents=latents, labels=labels, spec=spec)


def holdout_seed(spec: DatasetSpec, offset: int = 1) -> int:
    """Seed for a disjoint draw from the same distribution."""
    return derive_seed(spec.seed, f"holdout-{offset}")


def save_dataset(path, dataset: SyntheticDataset) -> None:
    """Cache a generated dataset in the shared container format.

    Header carries the full spec; body is the row-major latent and label
    tensors. Identical datasets produce byte-identical files.
    """
    from .serialization import save_container

    spec = dataset.spec
    meta = {
        "format": "nextx-dataset-v1",
        "kind": spec.kind.value,
        "grid_shape": list(spec.grid_shape),
        "num_classes": spec.num_classes,
        "size": spec.size,
        "seed": spec.seed,
        "noise_scale": spec.noise_scale,
        "mean_scale": spec.mean_scale,
        "image_factor": spec.image_factor,
    }
    save_container(path, meta, {"latents": dataset.latents, "labels": dataset.labels})


def load_dataset(path) -> SyntheticDataset:
    from .serialization import load_container

    meta, tensors = load_container(path)
    if meta.get("format") != "nextx-dataset-v1":
        raise DomainError(f"{path}: not a dataset cache ({meta.get('format')!r})")
    spec = DatasetSpec(
        kind=DatasetKind(meta["kind"]),
        grid_shape=tuple(meta["grid_shape"]),
        num_classes=meta["num_classes"],
        size=meta["size"],
        seed=meta["seed"],
        noise_scale=meta["noise_scale"],
        mean_scale=meta["mean_scale"],
        image_factor=meta["image_factor"],
    )
    return SyntheticDataset(latents=tensors["latents"], labels=tensors["labels"], spec=spec)
