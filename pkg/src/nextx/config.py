"""Run configuration: a flat key-value text format with sections.

One file drives every command. Unknown sections or keys are rejected so
typos fail loudly. ``dump_run_config`` emits a canonical rendering (fixed
section and key order) whose sha256 is the run's config hash.

Sections and defaults::

    [run]       seed=0
    [data]      kind=gaussian_mixture height=4 width=4 channels=2
                num_classes=8 size=4096 seed=7 noise_scale=0.25
                mean_scale=1.0 image_factor=2
    [layout]    kind=cell cell_size=2 distance=2 num_scales=3 scales=
    [denoiser]  depth=3 width=128 heads=4 mlp_ratio=4.0 dropout=0.0
                attn_dropout=0.0 label_dropout=0.1
    [train]     policy=random epochs=40 warmup_epochs=4 batch_size=256
                peak_lr=4e-4 end_lr=1e-5 weight_decay=0.02 beta1=0.9
                beta2=0.96 grad_clip=1.0 log_every=50 checkpoint_every=0
    [sample]    steps=50 mode=sde churn=1.0 guidance=1.5 label=-1 seed=0
                count=64
    [eval]      projections=128 holdout_size=1024 sample_count=512 seed=123

The denoiser's token_dim / max_tokens / max_entities / num_classes are
derived from [data] and [layout], never written by hand.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .data import DatasetKind, DatasetSpec
from .denoiser import DenoiserConfig
from .entities import EntityKind, LayoutSpec
from .errors import ConfigError
from .flow import IntegratorMode, TimePolicy
from .sampling import SampleConfig
from .training import TrainConfig


@dataclass(frozen=True)
class EvalSettings:
    projections: int = 128
    holdout_size: int = 1024
    sample_count: int = 512
    seed: int = 123
    conditional: bool = True  # balanced per-class labels vs unconditional sampling
    chunk: int = 128          # batched-forward group size for eval sampling


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    sample: SampleConfig
    eval: EvalSettings
    sample_count: int = 64  # [sample] count: default number of grids to emit


_SECTIONS = ("run", "data", "layout", "denoiser", "train", "sample", "eval")

_DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0"},
    "data": {
        "kind": "gaussian_mixture", "height": "4", "width": "4", "channels": "2",
        "num_classes": "8", "size": "4096", "seed": "7",
        "noise_scale": "0.25", "mean_scale": "1.0", "image_factor": "2",
    },
    "layout": {
        "kind": "cell", "cell_size": "2", "distance": "2",
        "num_scales": "3", "scales": "",
    },
    "denoiser": {
        "depth": "3", "width": "128", "heads": "4", "mlp_ratio": "4.0",
        "dropout": "0.0", "attn_dropout": "0.0", "label_dropout": "0.1",
    },
    "train": {
        "policy": "random", "epochs": "40", "warmup_epochs": "4",
        "batch_size": "256", "peak_lr": "4e-4", "end_lr": "1e-5",
        "weight_decay": "0.02", "beta1": "0.9", "beta2": "0.96",
        "grad_clip": "1.0", "log_every": "50", "checkpoint_every": "0",
    },
    "sample": {
        "steps": "50", "mode": "sde", "churn": "1.0", "guidance": "1.5",
        "label": "-1", "seed": "0", "count": "64",
    },
    "eval": {
        "projections": "128", "holdout_size": "1024",
        "sample_count": "512", "seed": "123",
        "conditional": "true", "chunk": "128",
    },
}


def _merged(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {section: dict(keys) for section, keys in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in values:
            raise ConfigError(f"unknown config section [{section}]")
        for key, val in parser[section].items():
            if key not in values[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[section][key] = val
    return values


def _int(section: dict[str, str], key: str) -> int:
    try:
        return int(section[key])
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected integer, got {section[key]!r}") from exc


def _float(section: dict[str, str], key: str) -> float:
    try:
        return float(section[key])
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected number, got {section[key]!r}") from exc


def parse_run_config(text: str) -> RunConfig:
    v = _merged(text)
    run_seed = _int(v["run"], "seed")

    d = v["data"]
    data = DatasetSpec(
        kind=DatasetKind(d["kind"]),
        grid_shape=(_int(d, "height"), _int(d, "width"), _int(d, "channels")),
        num_classes=_int(d, "num_classes"),
        size=_int(d, "size"),
        seed=_int(d, "seed"),
        noise_scale=_float(d, "noise_scale"),
        mean_scale=_float(d, "mean_scale"),
        image_factor=_int(d, "image_factor"),
    )

    ly = v["layout"]
    scales = tuple(int(s) for s in ly["scales"].split(",") if s.strip()) or None
    layout_spec = LayoutSpec(
        kind=EntityKind(ly["kind"]),
        cell_size=_int(ly, "cell_size"),
        distance=_int(ly, "distance"),
        scales=scales,
        num_scales=_int(ly, "num_scales"),
    )
    layout = layout_spec.build(data.grid_shape)  # validates divisibility early

    dn = v["denoiser"]
    denoiser = DenoiserConfig(
        depth=_int(dn, "depth"),
        width=_int(dn, "width"),
        heads=_int(dn, "heads"),
        token_dim=data.grid_shape[2],
        max_tokens=layout.total_tokens,
        num_classes=data.num_classes,
        max_entities=layout.num_entities,
        mlp_ratio=_float(dn, "mlp_ratio"),
        dropout=_float(dn, "dropout"),
        attn_dropout=_float(dn, "attn_dropout"),
        label_dropout=_float(dn, "label_dropout"),
    )

    tr = v["train"]
    train = TrainConfig(
        policy=TimePolicy(tr["policy"]),
        epochs=_int(tr, "epochs"),
        warmup_epochs=_int(tr, "warmup_epochs"),
        batch_size=_int(tr, "batch_size"),
        peak_lr=_float(tr, "peak_lr"),
        end_lr=_float(tr, "end_lr"),
        weight_decay=_float(tr, "weight_decay"),
        betas=(_float(tr, "beta1"), _float(tr, "beta2")),
        seed=run_seed,
        layout=layout_spec,
        denoiser=denoiser,
        data=data,
        grad_clip=_float(tr, "grad_clip"),
        log_every=_int(tr, "log_every"),
        checkpoint_every=_int(tr, "checkpoint_every"),
    )

    sp = v["sample"]
    label = _int(sp, "label")
    sample = SampleConfig(
        steps=_int(sp, "steps"),
        mode=IntegratorMode(sp["mode"]),
        churn=_float(sp, "churn"),
        guidance=_float(sp, "guidance"),
        label=None if label < 0 else label,
        seed=_int(sp, "seed"),
    )

    ev = v["eval"]
    conditional = ev["conditional"].strip().lower()
    if conditional not in ("true", "false"):
        raise ConfigError(f"key 'conditional': expected true/false, got {conditional!r}")
    eval_settings = EvalSettings(
        projections=_int(ev, "projections"),
        holdout_size=_int(ev, "holdout_size"),
        sample_count=_int(ev, "sample_count"),
        seed=_int(ev, "seed"),
        conditional=conditional == "true",
        chunk=_int(ev, "chunk"),
    )
    return RunConfig(
        train=train, sample=sample, eval=eval_settings,
        sample_count=_int(sp, "count"),
    )


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def dump_run_config(cfg: RunConfig) -> str:
    """Canonical text rendering; parse(dump(cfg)) reproduces cfg."""
    t, s, e = cfg.train, cfg.sample, cfg.eval
    d, ly = t.data, t.layout
    scales = ",".join(str(x) for x in ly.scales) if ly.scales else ""
    sections = {
        "run": {"seed": t.seed},
        "data": {
            "kind": d.kind.value, "height": d.grid_shape[0], "width": d.grid_shape[1],
            "channels": d.grid_shape[2], "num_classes": d.num_classes, "size": d.size,
            "seed": d.seed, "noise_scale": d.noise_scale, "mean_scale": d.mean_scale,
            "image_factor": d.image_factor,
        },
        "layout": {
            "kind": ly.kind.value,
            "cell_size": ly.cell_size if ly.cell_size is not None else 2,
            "distance": ly.distance if ly.distance is not None else 2,
            "num_scales": ly.num_scales if ly.num_scales is not None else 3,
            "scales": scales,
        },
        "denoiser": {
            "depth": t.denoiser.depth, "width": t.denoiser.width,
            "heads": t.denoiser.heads, "mlp_ratio": t.denoiser.mlp_ratio,
            "dropout": t.denoiser.dropout, "attn_dropout": t.denoiser.attn_dropout,
            "label_dropout": t.denoiser.label_dropout,
        },
        "train": {
            "policy": t.policy.value, "epochs": t.epochs,
            "warmup_epochs": t.warmup_epochs, "batch_size": t.batch_size,
            "peak_lr": t.peak_lr, "end_lr": t.end_lr, "weight_decay": t.weight_decay,
            "beta1": t.betas[0], "beta2": t.betas[1], "grad_clip": t.grad_clip,
            "log_every": t.log_every, "checkpoint_every": t.checkpoint_every,
        },
        "sample": {
            "steps": s.steps, "mode": s.mode.value, "churn": s.churn,
            "guidance": s.guidance, "label": -1 if s.label is None else s.label,
            "seed": s.seed, "count": cfg.sample_count,
        },
        "eval": {
            "projections": e.projections, "holdout_size": e.holdout_size,
            "sample_count": e.sample_count, "seed": e.seed,
            "conditional": "true" if e.conditional else "false", "chunk": e.chunk,
        },
    }
    out = io.StringIO()
    for name in _SECTIONS:
        out.write(f"[{name}]\n")
        for key, val in sections[name].items():
            out.write(f"{key} = {val}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_run_config(cfg).encode("utf-8")).hexdigest()[:12]


def default_run_config() -> RunConfig:
    return parse_run_config("")


def resolve_derived(cfg: RunConfig) -> RunConfig:
    """Recompute the denoiser fields that follow from [data] and [layout].

    Needed after programmatic edits of the data spec or layout spec, since
    token_dim / max_tokens / max_entities / num_classes are derived values.
    """
    import dataclasses

    t = cfg.train
    layout = t.layout.build(t.data.grid_shape)
    denoiser = dataclasses.replace(
        t.denoiser,
        token_dim=t.data.grid_shape[2],
        max_tokens=layout.total_tokens,
        max_entities=layout.num_entities,
        num_classes=t.data.num_classes,
    )
    return dataclasses.replace(cfg, train=dataclasses.replace(t, denoiser=denoiser))
