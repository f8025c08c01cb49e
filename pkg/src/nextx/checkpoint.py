"""Checkpoint container: config text, parameters, optimizer state, rng state.

Stored via :mod:`nextx.serialization`, so identical training runs produce
byte-identical files. The embedded config text is the canonical run-config
rendering; loading rebuilds the model from it and restores weights exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .denoiser import VelocityDenoiser
from .errors import ConfigError
from .serialization import load_container, save_container
from .training import TrainConfig

FORMAT = "nextx-checkpoint-v1"


@dataclass
class Checkpoint:
    run_config: "RunConfig"
    model: VelocityDenoiser
    step: int
    optimizer_tensors: dict[str, torch.Tensor]
    rng_states: dict[str, torch.Tensor]

    @property
    def train_config(self) -> TrainConfig:
        return self.run_config.train


def _wrap_run_config(train_config: TrainConfig):
    from .config import EvalSettings, RunConfig
    from .sampling import SampleConfig

    return RunConfig(train=train_config, sample=SampleConfig(), eval=EvalSettings())


def save_checkpoint(
    path: str | Path,
    model: VelocityDenoiser,
    train_config: TrainConfig,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    rng_states: dict[str, torch.Generator] | None = None,
) -> None:
    from .config import dump_run_config

    tensors: dict[str, torch.Tensor] = {
        f"model.{name}": value for name, value in model.state_dict().items()
    }
    if optimizer is not None:
        for name, param in model.named_parameters():
            state = optimizer.state.get(param)
            if not state:
                continue
            for key in ("step", "exp_avg", "exp_avg_sq"):
                value = state[key]
                if not torch.is_tensor(value):
                    value = torch.tensor(float(value))
                tensors[f"opt.{name}.{key}"] = value
    for role, gen in (rng_states or {}).items():
        tensors[f"rng.{role}"] = gen.get_state()
    meta = {
        "format": FORMAT,
        "step": step,
        "config_text": dump_run_config(_wrap_run_config(train_config)),
    }
    save_container(path, meta, tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .config import parse_run_config

    meta, tensors = load_container(path)
    if meta.get("format") != FORMAT:
        raise ConfigError(f"{path}: not a checkpoint (format {meta.get('format')!r})")
    run_config = parse_run_config(meta["config_text"])
    model = VelocityDenoiser(run_config.train.denoiser)
    state = {
        name[len("model."):]: value
        for name, value in tensors.items()
        if name.startswith("model.")
    }
    model.load_state_dict(state, strict=True)
    opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    rng_states = {k[len("rng."):]: v for k, v in tensors.items() if k.startswith("rng.")}
    return Checkpoint(
        run_config=run_config,
        model=model,
        step=int(meta["step"]),
        optimizer_tensors=opt_tensors,
        rng_states=rng_states,
    )


def restore_optimizer(
    optimizer: torch.optim.Optimizer,
    model: VelocityDenoiser,
    optimizer_tensors: dict[str, torch.Tensor],
) -> None:
    """Install saved AdamW moments onto a freshly built optimizer."""
    for name, param in model.named_parameters():
        prefix = f"opt.{name}."
        entry = {
            key[len(prefix):]: value
            for key, value in optimizer_tensors.items()
            if key.startswith(prefix)
        }
        if entry:
            optimizer.state[param] = entry
