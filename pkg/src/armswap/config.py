"""Experiment configuration: one section per stage, strict JSON round-trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidArgument


@dataclass
class DatagenConfig:
    frame_size: tuple = (64, 64)
    n_frames: int = 16
    train_clips: int = 128
    eval_clips: int = 32
    fps: int = 8
    seed: int = 3


@dataclass
class GanConfig:
    cycle_weight: float = 10.0
    nce_weight: float = 1.0
    adv_mode: str = "least_squares"
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    epochs: int = 60
    image_buffer_size: int = 50
    identity_loss_weight: float = 0.0
    batch_size: int = 4
    base_width: int = 32
    n_residual_blocks: int = 4
    disc_width: int = 32
    disc_layers: int = 3
    resolution: int = 64
    images_per_domain: int = 200
    crop_mode: str = "arm_bbox"
    crop_dilate: int = 4
    nce_patches: int = 64
    nce_temperature: float = 0.07
    nce_dim: int = 128
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.cycle_weight < 0 or self.nce_weight < 0:
            raise InvalidArgument("loss weights must be >= 0")
        if self.adv_mode not in ("least_squares", "nonsaturating_log"):
            raise InvalidArgument(f"unknown adv_mode {self.adv_mode!r}")
        if self.crop_mode not in ("arm_bbox", "full_frame"):
            raise InvalidArgument(f"unknown crop_mode {self.crop_mode!r}")


@dataclass
class VaeConfig:
    latent_channels: int = 16
    downsample: int = 8
    width: int = 48
    kl_weight: float = 1e-6
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    max_frames: int = 1024
    cross_env: bool = True
    checkpoint_every: int = 5
    seed: int = 0


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"
    sigma_mode: str = "beta_tilde"
    width: int = 64
    n_blocks: int = 4
    cond_dim: int = 64
    temporal: bool = True
    steps: int = 20000
    batch_size: int = 4
    lr: float = 2e-4
    ema_decay: float = 0.999
    distort: bool = True
    distortion: dict = field(default_factory=lambda: {
        "elastic_alpha": 4.0, "elastic_sigma": 8.0, "perspective_jitter": 0.03,
        "blur_sigma_range": [0.3, 1.2],
    })
    reference_variants: int = 4
    cross_env: bool = True
    zero_reference: bool = False
    lora_rank: int = 0
    checkpoint_every: int = 1000
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ("linear", "cosine"):
            raise InvalidArgument(f"unknown schedule {self.schedule!r}")
        if self.sigma_mode not in ("beta", "beta_tilde"):
            raise InvalidArgument(f"unknown sigma_mode {self.sigma_mode!r}")


@dataclass
class SamplerConfig:
    steps: int = 50
    background_mode: str = "ground_truth"
    seed: int = 0


@dataclass
class MetricsConfig:
    metrics: tuple = ("motion_smoothness", "background_consistency", "subject_consistency",
                      "temporal_flickering", "paired", "swap_rate")
    projection_seed: int = 0
    classifier_crops: int = 500


SECTIONS = {
    "datagen": DatagenConfig,
    "gan": GanConfig,
    "vae": VaeConfig,
    "diffusion": DiffusionConfig,
    "sampler": SamplerConfig,
    "metrics": MetricsConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_root: str = "runs/default"
    workers: int = 1
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in d.items():
            if name in SECTIONS:
                kwargs[name] = _section(SECTIONS[name], value, name)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    def hash(self, *sections) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def override(self, dotted: dict) -> "ExperimentConfig":
        """Apply ``{"gan.epochs": 5, ...}`` style overrides, returning a new config."""
        d = self.to_dict()
        for key, value in dotted.items():
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise InvalidArgument(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise InvalidArgument(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def _section(cls, value, name):
    if not isinstance(value, dict):
        raise InvalidArgument(f"config section {name!r} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(value) - set(names)
    if unknown:
        raise InvalidArgument(f"unknown keys in [{name}]: {sorted(unknown)}")
    kwargs = {}
    for k, v in value.items():
        default = names[k].default
        kwargs[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    return cls(**kwargs)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
