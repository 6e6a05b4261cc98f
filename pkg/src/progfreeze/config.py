"""Experiment configuration: a YAML document validated by strict pydantic models.

Unknown keys are rejected. ``ConfigError.key_path`` names the offending
entry (e.g. ``train.grid.0.epochs``) so the CLI can report it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .augment import AugmentConfig, CutMixConfig
from .cohort import ImageModel
from .fedsim import FederationConfig, Phase1Mode
from .freeze import Mode
from .nnet import ArchConfig
from .trainer import Init, OptimConfig, TrainConfig, default_grid


class ConfigError(ValueError):
    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CohortSection(_Strict):
    seed: Optional[int] = None
    n_pos: int = Field(57, ge=1)
    n_neg: int = Field(104, ge=1)
    images_per_patient: tuple[int, int] = (1, 3)
    signal_strength: float = Field(0.3, ge=0.0)
    irds_coupling: float = 0.15
    irds_missing_rate: float = Field(0.0, ge=0.0, le=1.0)
    image_size: int = Field(32, ge=8)


class ArchSection(_Strict):
    stem_channels: int = Field(8, ge=1)
    widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    blocks: tuple[int, int, int, int] = (1, 1, 1, 1)
    stem_stride: int = Field(2, ge=1)


class PretrainSection(_Strict):
    epochs: int = Field(8, ge=1)
    samples: int = Field(1200, ge=8)


class GridEntry(_Strict):
    init: Init = Init.XRAY_LIKE_PRETRAIN
    mode: Mode = Mode.PROG_FREEZE
    probe_epochs: int = Field(0, ge=0)
    epochs: int = Field(30, ge=1)
    cutmix: bool = False
    probe_mix: bool = False
    name: Optional[str] = None


class TrainSection(_Strict):
    grid: Literal["default"] | list[GridEntry] = "default"
    batch_size: int = Field(16, ge=1)
    max_lr: float = Field(1e-3, gt=0)
    probe_lr: float = Field(1e-2, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    lr_decay: float = Field(0.3, gt=0, le=1)
    augment: bool = True
    threshold: float = 0.5


class SplitSection(_Strict):
    k: int = Field(5, ge=2)
    repeats: int = Field(6, ge=1)
    test_image: Literal["first", "random"] = "first"
    seed: Optional[int] = None


class FedSection(_Strict):
    n_sites: int = Field(3, ge=1)
    rounds_per_phase: tuple[int, int, int] = (2, 4, 2)
    local_epochs_per_round: int = Field(2, ge=1)
    phase1_mode: Phase1Mode = Phase1Mode.FEATURE_STREAM
    skew_concentration: float = Field(10.0, gt=0)
    aggregate: bool = True
    labels_shareable: bool = True


class OutputSection(_Strict):
    directory: str = "runs"


class ExperimentConfig(_Strict):
    seed: int = 0
    cohort: CohortSection = CohortSection()
    architecture: ArchSection = ArchSection()
    pretrain: PretrainSection = PretrainSection()
    train: TrainSection = TrainSection()
    split: SplitSection = SplitSection()
    fedsim: FedSection = FedSection()
    output: OutputSection = OutputSection()

    # ---------------------------------------------------------- conversions

    def arch(self) -> ArchConfig:
        a = self.architecture
        return ArchConfig(self.cohort.image_size, a.stem_channels, a.widths, a.blocks, a.stem_stride)

    def image_model(self) -> ImageModel:
        return ImageModel(size=self.cohort.image_size)

    def cohort_seed(self) -> int:
        return self.seed if self.cohort.seed is None else self.cohort.seed

    def split_seed(self) -> int:
        return self.seed if self.split.seed is None else self.split.seed

    def _common(self) -> dict:
        t = self.train
        optim = OptimConfig(max_lr=t.max_lr, weight_decay=t.weight_decay, lr_decay=t.lr_decay)
        return dict(optim=optim, probe_lr=t.probe_lr, batch_size=t.batch_size,
                    threshold=t.threshold,
                    augment=AugmentConfig() if t.augment else AugmentConfig.disabled())

    def base_train_config(self) -> TrainConfig:
        """Shared optimizer/augmentation settings with default init and freeze mode."""
        return TrainConfig(seed=self.seed, **self._common())

    def train_configs(self) -> list[TrainConfig]:
        t = self.train
        common = self._common()
        if t.grid == "default":
            return default_grid(self.seed, **common)
        return [TrainConfig(init=g.init, mode=g.mode, probe_epochs=g.probe_epochs,
                            total_epochs=g.epochs, name=g.name,
                            cutmix=CutMixConfig(enabled=g.cutmix, during_probe=g.probe_mix),
                            seed=self.seed, **common)
                for g in t.grid]

    def federation(self) -> FederationConfig:
        f = self.fedsim
        return FederationConfig(f.n_sites, tuple(f.rounds_per_phase), f.local_epochs_per_round,
                                f.phase1_mode, f.skew_concentration, f.aggregate, f.labels_shareable)


def _pick(err: ValidationError) -> dict:
    # unknown keys first; otherwise the most specific location
    errs = err.errors()
    extra = [e for e in errs if e["type"] == "extra_forbidden"]
    return (extra or sorted(errs, key=lambda e: -len(e["loc"])))[0]


def _key_path(e: dict) -> str:
    # union branches show up in the location as type tags like "list[GridEntry]"
    parts = [str(p) for p in e["loc"] if not (isinstance(p, str) and "[" in p)]
    return ".".join(parts) or "<root>"


def parse_config(data: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as e:
        first = _pick(e)
        raise ConfigError(_key_path(first), first["msg"]) from None


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("<document>", f"not valid YAML: {e}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("<root>", "top level must be a mapping")
    return parse_config(data)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def to_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)
