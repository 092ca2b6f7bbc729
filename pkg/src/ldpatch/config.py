"""Pipeline configuration: one JSON document with a section per stage.

Every section maps onto the dataclass of the module it configures, so the
module's own validation runs when the config is loaded. Unknown keys are
rejected rather than silently ignored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .autoencoder import AEConfig
from .detector import GridConfig
from .diffusion import DiffusionConfig
from .patch import LossWeights, OptimizerConfig, TransformConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """Natural-image corpus for the autoencoder and diffusion model."""

    synthetic: bool = True
    corpus_path: str | None = None
    n_images: int = 500
    holdout: int = 100

    def __post_init__(self):
        if not self.synthetic and not self.corpus_path:
            raise ConfigError("data.corpus_path is required when data.synthetic is false")
        if self.n_images < 1 or self.holdout < 0:
            raise ConfigError("data.n_images must be positive and data.holdout non-negative")


@dataclass
class DetectorTrainConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    n_scenes: int = 2000
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 2e-3
    width: int = 16
    occlusion: float = 0.0

    def __post_init__(self):
        if min(self.n_scenes, self.epochs, self.batch_size, self.width) < 1:
            raise ConfigError("detector sizes and counts must be positive")
        if self.learning_rate <= 0 or not 0.0 <= self.occlusion <= 1.0:
            raise ConfigError("invalid detector learning_rate or occlusion")


def _desk_transforms() -> TransformConfig:
    # a 0.3 box-height patch is only about 10 pixels wide on 64-pixel scenes
    return TransformConfig(patch_scale=0.45)


def _desk_optimizer() -> OptimizerConfig:
    # 1e-4 barely moves mu within a few hundred steps at this scale
    return OptimizerConfig(learning_rate=0.05)


@dataclass
class AttackConfig:
    """Attack settings. Loss weights and Adam moments keep the class
    defaults; patch scale and step size are tuned for 64-pixel scenes."""

    weights: LossWeights = field(default_factory=LossWeights)
    transforms: TransformConfig = field(default_factory=_desk_transforms)
    optimizer: OptimizerConfig = field(default_factory=_desk_optimizer)
    n_scenes: int = 300

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ConfigError("attack.n_scenes must be positive")


@dataclass
class EvalConfig:
    threshold: float | None = None
    iou_thresh: float = 0.5
    n_scenes: int = 200
    control: bool = True

    def __post_init__(self):
        if self.threshold is not None and not 0.0 < self.threshold < 1.0:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if not 0.0 < self.iou_thresh < 1.0:
            raise ConfigError("eval.iou_thresh must lie in (0, 1)")
        if self.n_scenes < 1:
            raise ConfigError("eval.n_scenes must be positive")


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    autoencoder: AEConfig = field(default_factory=AEConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    detector: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# nested dataclass fields, keyed by (owner, field name)
_NESTED = {
    (PipelineConfig, "data"): DataConfig,
    (PipelineConfig, "autoencoder"): AEConfig,
    (PipelineConfig, "diffusion"): DiffusionConfig,
    (PipelineConfig, "detector"): DetectorTrainConfig,
    (PipelineConfig, "attack"): AttackConfig,
    (PipelineConfig, "eval"): EvalConfig,
    (DetectorTrainConfig, "grid"): GridConfig,
    (AttackConfig, "weights"): LossWeights,
    (AttackConfig, "transforms"): TransformConfig,
    (AttackConfig, "optimizer"): OptimizerConfig,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        path = f"{where}.{key}" if where else key
        kwargs[key] = _build(sub, value, path) if sub is not None else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from None


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(data: dict) -> PipelineConfig:
    """Overlay ``data`` on the default pipeline config and validate every section."""
    if not isinstance(data, dict):
        raise ConfigError("config must be an object")
    return _build(PipelineConfig, _merge(PipelineConfig().to_dict(), data), "")


def load_config(path=None, seed: int | None = None) -> PipelineConfig:
    """Read a JSON config (defaults when ``path`` is None); ``seed`` overrides the file."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if seed is not None:
        data = {**data, "seed": seed}
    return config_from_dict(data)
