"""Run configuration: dataclasses for every pipeline stage + YAML round-trip."""

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

MODALITIES = ("CT", "MRI", "SYNTH")
BACKBONES = ("dilated_cnn", "foundation_vit_large")
INPUT_MODES = ("replicate_1slice", "stack_3slice", "slice_adapter")
VARIANTS = ("base", "cca", "ttt", "slice_adapter")


class ConfigError(ValueError):
    pass


def _check_range(name, rng):
    lo, hi = rng
    if not (float("-inf") < lo <= hi < float("inf")):
        raise ConfigError(f"{name} must be a finite ordered range, got {rng!r}")


@dataclass
class FelzenszwalbParams:
    scale: float = 100.0
    sigma: float = 0.8
    min_size: int = 400


@dataclass
class GeometricAug:
    """Affine + optional elastic deformation parameter ranges."""

    rotation: tuple = (-20.0, 20.0)  # degrees
    scale: tuple = (0.9, 1.1)
    shear: tuple = (-5.0, 5.0)  # degrees
    translate: tuple = (-0.1, 0.1)  # fraction of image size
    elastic: bool = False
    elastic_magnitude: float = 2.0

    def validate(self):
        for name in ("rotation", "scale", "shear", "translate"):
            _check_range(name, getattr(self, name))


@dataclass
class IntensityAug:
    gamma: tuple = (0.7, 1.4)
    noise_std: float = 0.02
    brightness: tuple = (-0.1, 0.1)
    contrast: tuple = (0.9, 1.1)

    def validate(self):
        for name in ("gamma", "brightness", "contrast"):
            _check_range(name, getattr(self, name))
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class AugmentationSpec:
    geometric: GeometricAug = field(default_factory=GeometricAug)
    intensity: IntensityAug = field(default_factory=IntensityAug)
    seed: int = 0

    def validate(self):
        self.geometric.validate()
        self.intensity.validate()

    @staticmethod
    def identity():
        """Spec that leaves images and labels untouched."""
        return AugmentationSpec(
            geometric=GeometricAug((0, 0), (1, 1), (0, 0), (0, 0), False, 0.0),
            intensity=IntensityAug((1, 1), 0.0, (0, 0), (1, 1)),
        )


@dataclass
class LowRankAdapterSpec:
    rank: int = 16
    alpha: float = 16.0
    target_blocks: tuple = ("q", "v")

    def validate(self):
        if self.rank < 1:
            raise ConfigError("lora rank must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("lora alpha must be > 0")
        bad = set(self.target_blocks) - {"q", "k", "v", "o"}
        if bad:
            raise ConfigError(f"unknown lora targets: {sorted(bad)}")


@dataclass
class ViTParams:
    patch_size: int = 14
    embed_dim: int = 1024
    depth: int = 24
    num_heads: int = 16
    mlp_ratio: float = 4.0
    pos_grid: tuple = (18, 18)  # base grid for learned position embeddings


@dataclass
class CNNParams:
    width: int = 32
    out_channels: int = 32


@dataclass
class EncoderConfig:
    backbone: str = "dilated_cnn"
    input_mode: str = "replicate_1slice"
    train_resolution: tuple = (256, 256)
    test_resolution: tuple = (672, 672)
    lora: typing.Optional[LowRankAdapterSpec] = None
    # "quarter" = 1/4 of the (padded) input, a fixed (H, W), or null for the
    # raw backbone grid.
    feature_upsample: typing.Union[str, tuple, None] = "quarter"
    vit: ViTParams = field(default_factory=ViTParams)
    cnn: CNNParams = field(default_factory=CNNParams)
    weights_path: typing.Optional[str] = None
    weights_digest: typing.Optional[str] = None

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if isinstance(self.feature_upsample, str) and self.feature_upsample != "quarter":
            raise ConfigError(f"feature_upsample must be 'quarter', a size, or null")
        if self.lora is not None:
            self.lora.validate()
            if self.backbone != "foundation_vit_large":
                raise ConfigError("lora requires the foundation_vit_large backbone")


@dataclass
class PrototypeConfig:
    window: tuple = (4, 4)
    coverage_threshold: float = 0.95

    def validate(self):
        if min(self.window) < 1:
            raise ConfigError("pooling window dims must be >= 1")
        if not 0.0 <= self.coverage_threshold <= 1.0:
            raise ConfigError("coverage_threshold must be in [0, 1]")


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    decay_every: int = 0  # 0 disables the stepwise decay
    decay_gamma: float = 0.95


@dataclass
class TrainConfig:
    episodes: int = 1000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    reg_weight: float = 1.0
    grad_clip: typing.Optional[float] = None
    seed: int = 0
    checkpoint_every: int = 500

    def validate(self):
        if self.episodes <= 0:
            raise ConfigError("episodes must be > 0")
        if self.optimizer.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.checkpoint_every <= 0:
            raise ConfigError("checkpoint_every must be > 0")


@dataclass
class TTTConfig:
    iterations: int = 100
    lr: float = 1e-4
    aug: AugmentationSpec = field(default_factory=AugmentationSpec)
    refresh_labels: bool = True

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("ttt iterations must be >= 0")
        self.aug.validate()


@dataclass
class InferenceConfig:
    sections: int = 3  # support/query slice ranges are split into this many parts
    cca: bool = True
    connectivity: int = 8
    cca_3d: bool = False
    save_probabilities: bool = False

    def validate(self):
        if self.sections < 1:
            raise ConfigError("sections must be >= 1")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")


@dataclass
class DataConfig:
    manifest: typing.Optional[str] = None
    felzenszwalb: FelzenszwalbParams = field(default_factory=FelzenszwalbParams)
    ct_window: tuple = (-275.0, 125.0)  # HU clip window before min-max
    mri_percentiles: tuple = (0.5, 99.5)
    cache_root: typing.Optional[str] = None


@dataclass
class ExperimentSpec:
    dataset: str = "SYNTH"
    organ_groups: dict = field(default_factory=dict)  # fold name -> class id list
    n_way: int = 1
    k_shot: int = 1
    variants: tuple = ("base", "cca")
    seeds: tuple = (0,)

    def validate(self):
        if self.dataset not in MODALITIES:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        seen = set()
        for fold, classes in self.organ_groups.items():
            overlap = seen & set(classes)
            if overlap:
                raise ConfigError(f"organ groups overlap on classes {sorted(overlap)}")
            seen |= set(classes)
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")


@dataclass
class RunConfig:
    """Merged view of every stage's configuration plus paths and the root seed."""

    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prototype: PrototypeConfig = field(default_factory=PrototypeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ttt: TTTConfig = field(default_factory=TTTConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    aug: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self):
        self.encoder.validate()
        self.prototype.validate()
        self.train.validate()
        self.ttt.validate()
        self.inference.validate()
        self.experiment.validate()
        self.aug.validate()
        return self


def _build(cls, value):
    """Recursively build a dataclass from plain dict/list data."""
    if value is None:
        return None
    if dataclasses.is_dataclass(cls):
        if not isinstance(value, dict):
            raise ConfigError(f"expected mapping for {cls.__name__}, got {type(value).__name__}")
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(value) - known
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        kwargs = {k: _build(hints[k], v) for k, v in value.items()}
        return cls(**kwargs)
    origin = typing.get_origin(cls)
    if origin is typing.Union:
        args = [a for a in typing.get_args(cls) if a is not type(None)]
        if isinstance(value, (list, tuple)):
            return tuple(value)
        for a in args:
            if dataclasses.is_dataclass(a) and isinstance(value, dict):
                return _build(a, value)
        return value
    if cls is tuple or origin is tuple:
        return tuple(value)
    return value


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def encoder_from_dict(data: dict) -> EncoderConfig:
    enc = _build(EncoderConfig, data)
    enc.validate()
    return enc


def load_config(path) -> RunConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)
    return path


def config_digest(cfg: RunConfig) -> str:
    """Short stable digest of the resolved configuration."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
