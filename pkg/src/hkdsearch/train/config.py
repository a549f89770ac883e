"""Training configuration, dataset presets and the learning-rate schedule."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..data.synth import SynthConfig
from ..model.config import ModelConfig, tiny_config

CONFIG_VERSION = 1


@dataclass
class OimConfig:
    temperature: float = 1.0 / 30
    momentum: float = 0.5
    queue_size: int = 2000


@dataclass
class EvalConfig:
    gallery_size: int = 50
    positives: int = 10
    protocol_seed: int = 0
    stratify: bool = False


@dataclass
class TrainConfig:
    dataset: str = "g2aps"
    train_annotations: str | None = None
    test_annotations: str | None = None
    protocol: str | None = None
    synth: dict | None = None
    batch_size: int = 2
    initial_lr: float = 0.001
    lr_decay_epoch: int = 16  # 1-based ordinal of the first decayed epoch
    lr_decay_factor: float = 0.1
    total_epochs: int = 21
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_prob: float = 1.0
    lambda_rela: float = 300.0
    relation_distance: str = "kl"
    relation_direction: str = "student_teacher"
    detach_teacher: bool = True
    enable_prob_kd: bool = True
    enable_rela_kd: bool = True
    det_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    grad_clip: float | None = None
    hflip: bool = True
    max_steps_per_epoch: int | None = None
    seed: int = 0
    oim: OimConfig = field(default_factory=OimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not 1 <= self.lr_decay_epoch <= self.total_epochs:
            raise ValueError("lr_decay_epoch must lie within the run")
        if self.lr_decay_factor <= 0 or self.initial_lr <= 0:
            raise ValueError("learning rate and decay factor must be positive")
        if self.relation_distance not in ("kl", "mse", "mutual_info"):
            raise ValueError(f"unknown relation_distance {self.relation_distance!r}")
        if self.synth is not None:
            # JSON-normal form, so a saved config reloads equal
            self.synth = json.loads(json.dumps(self.synth))

    def to_json(self) -> dict:
        d = {"version": CONFIG_VERSION}
        d.update(asdict(self))
        d["det_weights"] = list(self.det_weights)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        version = obj.pop("version", None)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "oim" in obj:
            obj["oim"] = OimConfig(**obj["oim"])
        if "eval" in obj:
            obj["eval"] = EvalConfig(**obj["eval"])
        if "model" in obj:
            obj["model"] = ModelConfig.from_json(obj["model"])
        if "det_weights" in obj:
            obj["det_weights"] = tuple(obj["det_weights"])
        return cls(**obj)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def synth_config(self) -> SynthConfig:
        return SynthConfig.from_json(self.synth or {})


def load_config(path) -> TrainConfig:
    return TrainConfig.from_json(json.loads(Path(path).read_text()))


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(cfg.dumps())


PRESETS = {
    "g2aps": dict(dataset="g2aps", batch_size=2, initial_lr=0.001, oim=OimConfig(queue_size=2000)),
    "prw": dict(dataset="prw", batch_size=4, initial_lr=0.0018, oim=OimConfig(queue_size=5000)),
    "cuhk-sysu": dict(dataset="cuhk-sysu", batch_size=3, initial_lr=0.0018, oim=OimConfig(queue_size=500)),
}


def synthetic_config(**overrides) -> TrainConfig:
    """Desk-scale recipe: tiny backbone on generated dual-view data."""
    base = dict(
        dataset="synthetic",
        synth=SynthConfig(seed=0, num_ids=8, images_per_view=64, scale_ratio_uav=0.75).to_json(),
        batch_size=2,
        initial_lr=0.005,
        total_epochs=16,
        lr_decay_epoch=13,
        oim=OimConfig(queue_size=64),
        grad_clip=5.0,  # from-scratch tiny trunk: early loss spikes otherwise derail some seeds
        model=tiny_config(),
    )
    base.update(overrides)
    return TrainConfig(**base)


def default_config(name: str = "g2aps") -> TrainConfig:
    if name == "synthetic":
        return synthetic_config()
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS) + ['synthetic']}")
    return TrainConfig(**PRESETS[name])


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for the 0-based ``epoch`` index.

    ``lr_decay_epoch`` counts epochs from 1, so with the default of 16 the
    rate drops from index 15 onward.
    """
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch + 1 >= cfg.lr_decay_epoch:
        return cfg.initial_lr * cfg.lr_decay_factor
    return cfg.initial_lr
