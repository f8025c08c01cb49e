"""Flow-matching primitives.

Convention throughout: t = 0 is clean data, t = 1 is pure noise. The
interpolant is the straight line F(t) = (1 - t) * X + t * eps, whose time
derivative is the constant velocity V = eps - X. Integration therefore runs
time downward from 1 to 0.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Callable, Sequence

import torch

from .entities import EntityLayout
from .errors import DomainError


class TimePolicy(str, Enum):
    CLEAN = "clean"
    INCREASING = "increasing"
    DECREASING = "decreasing"
    RANDOM = "random"


class IntegratorMode(str, Enum):
    ODE = "ode"
    SDE = "sde"


def sample_times(
    policy: TimePolicy | str, n: int, rng: torch.Generator | None = None
) -> torch.Tensor:
    """Draw one per-entity time vector [n] under the given policy.

    Random is i.i.d. Uniform[0,1]; increasing/decreasing are the same draws
    sorted, which keeps each marginal uniform; clean is all zeros.
    """
    return sample_times_batch(policy, 1, n, rng)[0]


def sample_times_batch(
    policy: TimePolicy | str, batch: int, n: int, rng: torch.Generator | None = None
) -> torch.Tensor:
    """Batched :func:`sample_times`, shape [batch, n]."""
    policy = TimePolicy(policy)
    if n < 1:
        raise DomainError(f"need at least one entity, got n={n}")
    if policy is TimePolicy.CLEAN:
        return torch.zeros(batch, n)
    u = torch.rand(batch, n, generator=rng)
    if policy is TimePolicy.INCREASING:
        u, _ = torch.sort(u, dim=1)
    elif policy is TimePolicy.DECREASING:
        u, _ = torch.sort(u, dim=1, descending=True)
    return u


def per_token_times(times: torch.Tensor, layout: EntityLayout) -> torch.Tensor:
    """Expand per-entity times [..., N] to per-token times [..., T]."""
    if times.shape[-1] != layout.num_entities:
        raise DomainError(
            f"times last dim {times.shape[-1]} != entity count {layout.num_entities}"
        )
    counts = torch.tensor(layout.span_counts, device=times.device)
    return torch.repeat_interleave(times, counts, dim=-1)


def interpolate(
    tokens: torch.Tensor,
    eps: torch.Tensor,
    times: torch.Tensor,
    layout: EntityLayout,
) -> torch.Tensor:
    """Per-entity linear interpolation (1 - t_n) * X_n + t_n * eps_n.

    ``tokens`` and ``eps`` are [..., T, c]; ``times`` is [..., N], one scalar
    per entity, broadcast over that entity's tokens.
    """
    if tokens.shape != eps.shape:
        raise DomainError(f"token shape {tuple(tokens.shape)} != eps shape {tuple(eps.shape)}")
    if times.min() < 0.0 or times.max() > 1.0:
        raise DomainError("times must lie in [0, 1]")
    t = per_token_times(times.to(tokens.dtype), layout).unsqueeze(-1)
    return (1.0 - t) * tokens + t * eps


def velocity_target(tokens: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Straight-line flow velocity eps - X, independent of t."""
    if tokens.shape != eps.shape:
        raise DomainError(f"token shape {tuple(tokens.shape)} != eps shape {tuple(eps.shape)}")
    return eps - tokens


def euler_ode_step(f: torch.Tensor, v_hat: torch.Tensor, dt: float) -> torch.Tensor:
    """One Euler step down the flow: F' = F - dt * v_hat."""
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")
    return f - dt * v_hat


def euler_maruyama_step(
    f: torch.Tensor,
    v_hat: torch.Tensor,
    t: float,
    dt: float,
    churn: float,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Euler drift plus vanishing stochastic churn.

    F' = F - dt * v_hat + churn * sqrt(dt) * t * xi with xi ~ N(0, I). The
    noise scale decays linearly with t, so the update degenerates to the
    deterministic step as t -> 0. churn = 0 skips the draw entirely, which
    keeps the rng stream identical to a pure ODE run.
    """
    if churn < 0:
        raise DomainError(f"churn must be nonnegative, got {churn}")
    if not (0 < dt <= t <= 1):
        raise DomainError(f"need 0 < dt <= t <= 1, got dt={dt}, t={t}")
    out = euler_ode_step(f, v_hat, dt)
    if churn == 0:
        return out
    xi = torch.randn(f.shape, generator=rng, dtype=f.dtype, device=f.device)
    return out + churn * math.sqrt(dt) * t * xi


def integrate_entity(
    velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
    shape: Sequence[int],
    steps: int,
    mode: IntegratorMode | str = IntegratorMode.ODE,
    churn: float = 1.0,
    rng: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str = "cpu",
) -> torch.Tensor:
    """Solve one entity's flow from t = 1 down to t = 0.

    Starts from a fresh standard-normal draw and takes ``steps`` uniform
    steps, querying ``velocity_fn(F, t)`` at the left endpoint of each.
    Returns the clean estimate at t = 0.
    """
    mode = IntegratorMode(mode)
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    f = torch.randn(tuple(shape), generator=rng, dtype=dtype, device=device)
    dt = 1.0 / steps
    for i in range(steps):
        t = (steps - i) / steps  # same division as dt, so the final t == dt exactly
        v_hat = velocity_fn(f, t)
        if mode is IntegratorMode.ODE or churn == 0:
            f = euler_ode_step(f, v_hat, dt)
        else:
            f = euler_maruyama_step(f, v_hat, t, dt, churn, rng)
    return f
