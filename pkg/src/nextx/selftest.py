"""Built-in invariant suite behind the ``selftest`` CLI command.

Each check is a small self-contained assertion of a core contract: exact
round trips, frozen orderings, flow identities, causality, degeneracies,
and determinism. Runs in seconds on a fresh checkout and needs no test
dependencies.
"""

from __future__ import annotations

import io
import tempfile
import traceback
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .config import default_run_config, dump_run_config, parse_run_config
from .data import (
    DatasetKind, DatasetSpec, patchify_codec_decode, patchify_codec_encode, synth_dataset,
)
from .denoiser import (
    DenoiserConfig, VelocityDenoiser, build_block_causal_mask, cfg_combine,
    init_parameters, single_stream_geometry,
)
from .entities import (
    EntityKind, build_layout, default_scale_schedule, entities_to_latent,
    latent_to_entities,
)
from .evaluate import sliced_wasserstein
from .flow import (
    IntegratorMode, TimePolicy, euler_maruyama_step, euler_ode_step,
    interpolate, sample_times, velocity_target,
)
from .rngutil import derive_generator
from .sampling import SampleConfig, generate
from .testing import OracleVelocityModel, randomize_parameters
from .training import lr_at

_FROZEN_CELL_K2 = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
_FROZEN_SUBSAMPLE_D2 = [0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15]


def _grid_0_15() -> torch.Tensor:
    return torch.arange(16.0).reshape(4, 4, 1)


def check_frozen_orderings() -> None:
    grid = _grid_0_15()
    cell = latent_to_entities(grid, build_layout(EntityKind.CELL, (4, 4, 1), 2))
    assert cell.tokens.flatten().tolist() == _FROZEN_CELL_K2
    sub = latent_to_entities(grid, build_layout(EntityKind.SUBSAMPLE, (4, 4, 1), 2))
    assert sub.tokens.flatten().tolist() == _FROZEN_SUBSAMPLE_D2


def check_round_trips() -> None:
    gen = derive_generator(0, "selftest-roundtrip")
    grid = torch.randn(8, 8, 2, generator=gen)
    for kind, param in [
        (EntityKind.TOKEN, None), (EntityKind.IMAGE, None),
        (EntityKind.CELL, 2), (EntityKind.CELL, 4),
        (EntityKind.SUBSAMPLE, 2), (EntityKind.SUBSAMPLE, 4),
    ]:
        layout = build_layout(kind, (8, 8, 2), param)
        back = entities_to_latent(latent_to_entities(grid, layout))
        assert torch.equal(back, grid), f"round trip failed for {kind}"
    scale_layout = build_layout(EntityKind.SCALE, (8, 8, 2), [2, 4, 8])
    seq = latent_to_entities(grid, scale_layout)
    assert torch.equal(entities_to_latent(seq), grid)


def check_scale_schedule() -> None:
    assert default_scale_schedule(16, 4) == [2, 4, 8, 16]
    assert default_scale_schedule(16, 1) == [16]
    assert default_scale_schedule(8, 3) == [2, 4, 8]


def check_flow_identities() -> None:
    layout = build_layout(EntityKind.CELL, (4, 4, 2), 2)
    gen = derive_generator(0, "selftest-flow")
    x = torch.randn(layout.total_tokens, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(layout.total_tokens, 2, generator=gen, dtype=torch.float64)
    n = layout.num_entities
    assert torch.equal(interpolate(x, eps, torch.zeros(n), layout), x)
    assert torch.equal(interpolate(x, eps, torch.ones(n), layout), eps)
    t = torch.rand(n, generator=gen, dtype=torch.float64)
    h = 1e-6
    fd = (interpolate(x, eps, t + h * 0.5, layout)
          - interpolate(x, eps, t - h * 0.5, layout)) / h
    assert (fd - velocity_target(x, eps)).abs().max() < 1e-8
    # one Euler step with the true velocity recovers the target exactly
    recovered = euler_ode_step(eps, velocity_target(x, eps), 1.0)
    assert (recovered - x).abs().max() < 1e-12


def check_sde_degeneracy() -> None:
    gen = derive_generator(0, "selftest-sde")
    f = torch.randn(5, 3, generator=gen)
    v = torch.randn(5, 3, generator=gen)
    ode = euler_ode_step(f, v, 0.1)
    sde = euler_maruyama_step(f, v, t=0.5, dt=0.1, churn=0.0, rng=gen)
    assert torch.equal(ode, sde)


def check_time_policies() -> None:
    gen = derive_generator(0, "selftest-times")
    assert torch.equal(sample_times(TimePolicy.CLEAN, 4), torch.zeros(4))
    inc = sample_times(TimePolicy.INCREASING, 6, gen)
    assert (inc[1:] >= inc[:-1]).all()
    dec = sample_times(TimePolicy.DECREASING, 6, gen)
    assert (dec[1:] <= dec[:-1]).all()
    r1 = sample_times(TimePolicy.RANDOM, 6, derive_generator(7, 0))
    r2 = sample_times(TimePolicy.RANDOM, 6, derive_generator(7, 0))
    assert torch.equal(r1, r2)
    assert (r1 >= 0).all() and (r1 <= 1).all()


def check_mask_structure() -> None:
    mask = build_block_causal_mask([(0, 2), (2, 2)])
    assert mask.tolist() == [
        [True, True, False, False],
        [True, True, False, False],
        [True, True, True, True],
        [True, True, True, True],
    ]
    single = build_block_causal_mask([(0, 16)])
    assert bool(single.all())


def check_causality() -> None:
    layout = build_layout(EntityKind.CELL, (4, 4, 1), 2)
    config = DenoiserConfig(
        depth=2, width=32, heads=2, token_dim=1,
        max_tokens=16, num_classes=3, max_entities=4,
    )
    model = VelocityDenoiser(config)
    init_parameters(model, derive_generator(0, "selftest-model"))
    randomize_parameters(model, derive_generator(0, "selftest-randomize"))
    gen = derive_generator(0, "selftest-causal")
    geom = single_stream_geometry(layout)
    tokens = torch.randn(1, 16, 1, generator=gen)
    times = torch.rand(1, 4, generator=gen)
    base = model(tokens, times, geom, labels=1)
    perturbed = tokens.clone()
    perturbed[0, 8:] += 100.0  # entities 3 and 4
    bumped_times = times.clone()
    bumped_times[0, 2:] = 0.9
    out = model(perturbed, bumped_times, geom, labels=1)
    assert torch.equal(base[0, :8], out[0, :8]), "causality leak"
    assert not torch.equal(base[0, 8:], out[0, 8:])


def check_null_label_dropout() -> None:
    config = DenoiserConfig(
        depth=1, width=16, heads=2, token_dim=1,
        max_tokens=4, num_classes=3, max_entities=4, label_dropout=0.999999,
    )
    model = VelocityDenoiser(config)
    init_parameters(model, derive_generator(1, "selftest-null"))
    layout = build_layout(EntityKind.TOKEN, (2, 2, 1))
    geom = single_stream_geometry(layout)
    tokens = torch.randn(1, 4, 1, generator=derive_generator(2, 0))
    times = torch.rand(1, 4, generator=derive_generator(2, 1))
    dropped = model(tokens, times, geom, labels=2, train_mode=True,
                    rng=derive_generator(2, 2))
    null = model(tokens, times, geom, labels=None)
    assert torch.equal(dropped, null)


def check_cfg_combine() -> None:
    v_c = torch.full((3,), 2.0)
    v_u = torch.zeros(3)
    assert torch.equal(cfg_combine(v_c, v_u, 1.0), v_c)
    assert torch.equal(cfg_combine(v_c, v_u, 0.0), v_u)
    assert torch.equal(cfg_combine(v_c, v_u, 1.5), torch.full((3,), 3.0))


def check_oracle_sampler() -> None:
    for kind, param in [(EntityKind.CELL, 2), (EntityKind.TOKEN, None),
                        (EntityKind.IMAGE, None)]:
        layout = build_layout(kind, (4, 4, 2), param)
        target = torch.randn(4, 4, 2, generator=derive_generator(3, str(kind)))
        model = OracleVelocityModel(target, layout)
        for steps in (1, 50):
            cfg = SampleConfig(steps=steps, mode=IntegratorMode.ODE, seed=0)
            out = generate(model, layout, cfg, derive_generator(4, steps))
            err = (out - target.double()).abs().max()
            assert err < 1e-5, f"{kind} steps={steps}: max err {err}"


def check_sampler_determinism() -> None:
    layout = build_layout(EntityKind.CELL, (4, 4, 1), 2)
    config = DenoiserConfig(depth=1, width=16, heads=2, token_dim=1,
                            max_tokens=16, num_classes=2, max_entities=4)
    model = VelocityDenoiser(config)
    init_parameters(model, derive_generator(5, 0))
    cfg = SampleConfig(steps=4, mode=IntegratorMode.ODE, label=0)
    a = generate(model, layout, cfg, derive_generator(6, 0))
    b = generate(model, layout, cfg, derive_generator(6, 0))
    assert torch.equal(a, b)
    sde0 = SampleConfig(steps=4, mode=IntegratorMode.SDE, churn=0.0, label=0)
    c = generate(model, layout, sde0, derive_generator(6, 0))
    assert torch.equal(a, c), "SDE churn=0 differs from ODE"


def check_codec() -> None:
    gen = derive_generator(7, 0)
    image = torch.randn(8, 8, 1, generator=gen)
    latent = patchify_codec_encode(image, 2)
    assert tuple(latent.shape) == (4, 4, 4)
    assert torch.equal(patchify_codec_decode(latent, 2), image)
    assert torch.equal(patchify_codec_encode(image, 1), image)


def check_dataset_determinism() -> None:
    spec = DatasetSpec(DatasetKind.GAUSSIAN_MIXTURE, (4, 4, 2), 4, 32, seed=11)
    a, b = synth_dataset(spec), synth_dataset(spec)
    assert torch.equal(a.latents, b.latents) and torch.equal(a.labels, b.labels)
    empty = synth_dataset(DatasetSpec(DatasetKind.GAUSSIAN_MIXTURE, (4, 4, 2), 4, 0))
    assert len(empty) == 0


def check_sliced_w2() -> None:
    gen = derive_generator(8, 0)
    a = torch.randn(64, 4, 4, 1, generator=gen)
    assert sliced_wasserstein(a, a.clone(), 16, derive_generator(8, 1)) == 0.0
    b = torch.randn(64, 4, 4, 1, generator=gen) + 1.0
    d_ab = sliced_wasserstein(a, b, 32, derive_generator(8, 2))
    d_ba = sliced_wasserstein(b, a, 32, derive_generator(8, 2))
    assert abs(d_ab - d_ba) < 1e-12 and d_ab > 0


def check_lr_schedule() -> None:
    assert lr_at(100, 1000, 100, 4e-4, 1e-5) == 4e-4
    assert abs(lr_at(1000, 1000, 100, 4e-4, 1e-5) - 1e-5) < 1e-18
    mid = lr_at(550, 1000, 100, 4e-4, 1e-5)
    assert abs(mid - (4e-4 + 1e-5) / 2) < 1e-12


def check_config_round_trip() -> None:
    cfg = default_run_config()
    text = dump_run_config(cfg)
    assert parse_run_config(text) == cfg


def check_checkpoint_round_trip() -> None:
    cfg = parse_run_config(
        "[data]\nsize = 8\n[denoiser]\nwidth = 16\ndepth = 1\nheads = 2\n"
        "[train]\nepochs = 2\nwarmup_epochs = 0\nbatch_size = 8\n"
    )
    model = VelocityDenoiser(cfg.train.denoiser)
    init_parameters(model, derive_generator(9, 0))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ck.nxc"
        ckpt.save_checkpoint(path, model, cfg.train, step=3)
        loaded = ckpt.load_checkpoint(path)
        assert loaded.step == 3
        for (name, a), (_, b) in zip(
            model.state_dict().items(), loaded.model.state_dict().items()
        ):
            assert torch.equal(a, b), f"parameter {name} differs"


CHECKS = [
    ("frozen-orderings", check_frozen_orderings),
    ("entity-round-trips", check_round_trips),
    ("scale-schedule", check_scale_schedule),
    ("flow-identities", check_flow_identities),
    ("sde-degeneracy", check_sde_degeneracy),
    ("time-policies", check_time_policies),
    ("mask-structure", check_mask_structure),
    ("block-causality", check_causality),
    ("null-label-dropout", check_null_label_dropout),
    ("cfg-combine", check_cfg_combine),
    ("oracle-sampler", check_oracle_sampler),
    ("sampler-determinism", check_sampler_determinism),
    ("patchify-codec", check_codec),
    ("dataset-determinism", check_dataset_determinism),
    ("sliced-wasserstein", check_sliced_w2),
    ("lr-schedule", check_lr_schedule),
    ("config-round-trip", check_config_round_trip),
    ("checkpoint-round-trip", check_checkpoint_round_trip),
]


def run_selftest(stream=None) -> int:
    """Run every check; print one line each; return the failure count."""
    out = stream or io.StringIO()
    failures = 0
    for name, check in CHECKS:
        try:
            check()
        except Exception:
            failures += 1
            out.write(f"FAIL {name}\n")
            out.write(traceback.format_exc())
        else:
            out.write(f"PASS {name}\n")
    out.write(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed\n")
    return failures
