"""Next-X prediction: autoregressive generation over flexible entities with
per-entity flow matching, noisy-context training, and sequential sampling."""

__version__ = "0.1.0"

from .data import DatasetKind, DatasetSpec, SyntheticDataset, class_means, synth_dataset
from .denoiser import (
    DenoiserConfig,
    VelocityDenoiser,
    build_block_causal_mask,
    cfg_combine,
    init_parameters,
)
from .entities import (
    EntityKind,
    EntityLayout,
    EntitySequence,
    LayoutSpec,
    build_layout,
    default_scale_schedule,
    entities_to_latent,
    entity_token_spans,
    latent_to_entities,
)
from .errors import (
    CodecError,
    ConfigError,
    DomainError,
    LayoutError,
    MaskError,
    NextXError,
    ScheduleError,
    TrainingError,
)
from .evaluate import MetricReport, evaluate_samples, sliced_wasserstein
from .flow import (
    IntegratorMode,
    TimePolicy,
    euler_maruyama_step,
    euler_ode_step,
    integrate_entity,
    interpolate,
    sample_times,
    velocity_target,
)
from .sampling import SampleConfig, batch_generate, generate
from .training import LossReport, TrainConfig, lr_at, ncl_loss, train

__all__ = [name for name in dir() if not name.startswith("_")]
