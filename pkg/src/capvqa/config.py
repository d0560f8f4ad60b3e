"""Configuration objects shared by the model, training loops, and CLI.

All CLI commands read a single JSON config file; anything not present
falls back to the dataclass defaults below.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class RoutingConfig:
    """Settings for the EM routing layer between capsule layers."""

    iterations: int = 3
    inverse_temperatures: tuple[float, ...] = (1.0, 2.0, 3.0)
    epsilon: float = 1e-6

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("routing iterations must be >= 1")
        if len(self.inverse_temperatures) != self.iterations:
            raise ConfigError(
                f"inverse temperature schedule length {len(self.inverse_temperatures)} "
                f"!= iterations {self.iterations}"
            )
        if any(t <= 0 for t in self.inverse_temperatures):
            raise ConfigError("inverse temperatures must be positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the full-scale configuration (d=768, 5+2 layers, 12 heads,
    16 capsules with 4x4 poses over a 7x7 grid).  ``desk_scale`` returns the
    small CPU-tractable variant used by the synthetic pipeline.
    """

    dim: int = 768
    layers: int = 5
    heads: int = 12
    ffn_dim: int = 3072
    dropout: float = 0.1
    cross_layers: int = 2

    capsules: int = 16
    pose_size: int = 4

    grid_h: int = 7
    grid_w: int = 7
    stem_channels: int = 2048
    image_size: int = 224

    max_text_len: int = 24
    vocab_size: int = 1000
    answer_vocab_size: int = 1000
    vqa_hidden: int = 0  # 0 -> same as dim

    routing: RoutingConfig = field(default_factory=RoutingConfig)

    @property
    def capsule_dim(self) -> int:
        """Packed size of one capsule block: K*K pose entries plus activation."""
        return self.pose_size * self.pose_size + 1

    @property
    def packed_dim(self) -> int:
        """Packed size of all capsules at one spatial cell (d_c)."""
        return self.capsules * self.capsule_dim

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if min(self.dim, self.layers, self.heads, self.cross_layers) < 1:
            raise ConfigError("dim/layers/heads/cross_layers must be >= 1")
        if min(self.capsules, self.pose_size, self.grid_h, self.grid_w) < 1:
            raise ConfigError("capsules/pose_size/grid must be >= 1")
        if self.image_size % self.grid_h != 0 or self.image_size % self.grid_w != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible into {self.grid_h}x{self.grid_w} cells"
            )
        self.routing.validate()

    @classmethod
    def desk_scale(cls, **overrides) -> "ModelConfig":
        base = dict(
            dim=128,
            layers=3,
            heads=4,
            ffn_dim=256,
            cross_layers=1,
            capsules=8,
            pose_size=3,
            grid_h=7,
            grid_w=7,
            stem_channels=32,
            image_size=56,
            max_text_len=16,
            vocab_size=64,
            answer_vocab_size=16,
        )
        base.update(overrides)
        return cls(**base)


STAGES = ("pretrain1", "pretrain2", "finetune")


@dataclass
class StageConfig:
    """Per-stage optimization settings and loss-task toggles."""

    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 3
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    use_mlm: bool = True
    use_itm: bool = True
    use_vqa: bool = True
    mlm_mask_rate: float = 0.15
    itm_negative_prob: float = 0.5
    log_every: int = 10

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1, epochs >= 0")
        if not (0.0 <= self.mlm_mask_rate < 1.0):
            raise ConfigError("mlm_mask_rate must be in [0, 1)")
        if not (0.0 <= self.itm_negative_prob <= 1.0):
            raise ConfigError("itm_negative_prob must be in [0, 1]")


def _default_stages() -> dict:
    return {
        "pretrain1": StageConfig(lr=1e-4, epochs=4),
        "pretrain2": StageConfig(lr=1e-4, epochs=2),
        "finetune": StageConfig(
            lr=1e-3, epochs=8, use_mlm=False, use_itm=False, use_vqa=True
        ),
    }


@dataclass
class Config:
    """Top-level config: model + per-stage training settings + seed."""

    model: ModelConfig = field(default_factory=ModelConfig.desk_scale)
    stages: dict = field(default_factory=_default_stages)
    seed: int = 17

    def validate(self) -> None:
        self.model.validate()
        for name, stage in self.stages.items():
            if name not in STAGES:
                raise ConfigError(f"unknown training stage {name!r}")
            stage.validate()

    def stage(self, name: str) -> StageConfig:
        if name not in STAGES:
            raise ConfigError(f"unknown training stage {name!r}")
        return self.stages.get(name) or StageConfig()


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(cfg: Config) -> dict:
    return {
        "model": _to_jsonable(cfg.model),
        "stages": {k: _to_jsonable(v) for k, v in cfg.stages.items()},
        "seed": cfg.seed,
    }


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> Config:
    model_data = dict(data.get("model", {}))
    routing_data = model_data.pop("routing", None)
    model = _build(ModelConfig, model_data) if model_data else ModelConfig.desk_scale()
    if routing_data is not None:
        routing_data = dict(routing_data)
        if "inverse_temperatures" in routing_data:
            routing_data["inverse_temperatures"] = tuple(
                routing_data["inverse_temperatures"]
            )
        model.routing = _build(RoutingConfig, routing_data)
    stages = _default_stages()
    for name, stage_data in data.get("stages", {}).items():
        if name not in STAGES:
            raise ConfigError(f"unknown training stage {name!r}")
        stages[name] = _build(StageConfig, dict(stage_data))
    cfg = Config(model=model, stages=stages, seed=int(data.get("seed", 17)))
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
