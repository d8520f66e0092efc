"""Experiment configuration, loaded from JSON with field names mirrored exactly."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from pets_lab.boxes import ConsensusConfig
from pets_lab.model import Arch
from pets_lab.scheduler import FlowStrategy
from pets_lab.synthdata import FOG_PRESETS, AugConfig, DomainConfig

MODES = ("consensus", "single_dt", "single_st")


@dataclass(frozen=True)
class DataConfig:
    num_source_scenes: int = 400
    num_target_scenes: int = 400
    num_eval_scenes: int = 200
    max_objects: int = 4
    fog: str = "fog_0.6"
    seed: int = 0
    source_seed: int = 0
    prototype_seed: int = 7
    prototype_norm: float = 1.0
    size_cells: tuple[float, float] = (2.5, 3.5)
    center_jitter: float = 0.15
    contrast_range: tuple[float, float] = (0.5, 1.5)

    @property
    def domain(self) -> DomainConfig:
        return DomainConfig.preset(self.fog)


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.5
    batch_size: int = 8
    epochs: int = 20
    lr_decay: float = 0.1
    decay_epoch: int | None = None

    @property
    def decay_at(self) -> int:
        # Default milestone: 80% of training.
        return self.decay_epoch if self.decay_epoch is not None else int(0.8 * self.epochs)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 60
    lr: float = 0.5
    batch_size: int = 8


@dataclass(frozen=True)
class PetsConfig:
    ema_alpha: float = 0.99
    ema_stepsize: int = 1
    warmup_epochs: int = 2
    strategy: str = "swap"
    mode: str = "consensus"
    delta: float = 0.5
    eta: float = 0.5
    beta: float = 0.5
    nms_iou: float = 0.5
    obj_thresh: float = 0.05

    @property
    def consensus(self) -> ConsensusConfig:
        return ConsensusConfig(self.delta, self.eta, self.beta, self.nms_iou)


@dataclass(frozen=True)
class EvalConfig:
    iou: float = 0.5
    eval_every: int = 1


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    arch: Arch = field(default_factory=Arch)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    pets: PetsConfig = field(default_factory=PetsConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self) -> None:
        p = self.pets
        for name in ("ema_alpha", "delta", "eta", "beta", "nms_iou", "obj_thresh"):
            if not 0.0 <= getattr(p, name) <= 1.0:
                raise ValueError(f"pets.{name} must lie in [0, 1]")
        if not 0.0 <= self.eval.iou <= 1.0:
            raise ValueError("eval.iou must lie in [0, 1]")
        FlowStrategy(p.strategy)
        if p.mode not in MODES:
            raise ValueError(f"pets.mode must be one of {MODES}")
        if p.ema_stepsize < 1 or self.eval.eval_every < 1:
            raise ValueError("ema_stepsize and eval_every must be >= 1")
        if self.optimizer.epochs < p.warmup_epochs:
            raise ValueError("optimizer.epochs must be >= pets.warmup_epochs")
        if self.data.fog not in FOG_PRESETS:
            raise ValueError(f"unknown fog preset {self.data.fog!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {"arch", "data", "optimizer", "pretrain", "pets", "aug", "eval", "output"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        data = dict(raw.get("data", {}))
        for key in ("size_cells", "contrast_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(
            arch=Arch(**raw.get("arch", {})),
            data=DataConfig(**data),
            optimizer=OptimizerConfig(**raw.get("optimizer", {})),
            pretrain=PretrainConfig(**raw.get("pretrain", {})),
            pets=PetsConfig(**raw.get("pets", {})),
            aug=AugConfig.from_dict(raw.get("aug", {})),
            eval=EvalConfig(**raw.get("eval", {})),
            output=OutputConfig(**raw.get("output", {})),
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, data=replace(self.data, seed=seed))

    def with_pets(self, **changes) -> "ExperimentConfig":
        return replace(self, pets=replace(self.pets, **changes))


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    """Read a JSON config; ``PETS_SEED`` in the environment overrides data.seed."""
    cfg = ExperimentConfig() if path is None else ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    env_seed = os.environ.get("PETS_SEED")
    if env_seed is not None:
        cfg = cfg.with_seed(int(env_seed))
    return cfg
