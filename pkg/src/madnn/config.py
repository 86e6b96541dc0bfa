"""Experiment configuration files (YAML), validated with pydantic.

Units are carried in field names: ``_m`` meters, ``_w`` watts, ``_db`` decibels.
Unknown keys are rejected at every level.
"""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .channel import Scenario
from .e2e import ModelConfig
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioBlock(_Strict):
    wavelength_m: float = Field(0.1, gt=0)
    num_users: int = Field(2, ge=1)
    num_mas: int = Field(4, ge=1)
    tx_paths: int = Field(3, ge=1)
    rx_paths: int = Field(3, ge=1)
    rician_factor_db: float = 10.0
    region_size_m: tuple[float, float] = (0.175, 0.025)
    grid_spacing_m: Optional[float] = Field(None, gt=0, description="default: wavelength / 4")
    measurement_spacing_m: Optional[float] = Field(None, gt=0, description="default: wavelength / 2")
    noise_power_w: float = Field(0.01, gt=0)
    max_power_w: float = Field(1.0, gt=0)
    bs_position_m: tuple[float, float, float] = (50.0, 0.0, 10.0)
    area_x_m: tuple[float, float] = (0.0, 100.0)
    area_y_m: tuple[float, float] = (0.0, 100.0)
    area_z_m: tuple[float, float] = (-5.0, 5.0)
    num_scatterers: int = Field(40, ge=0)

    def build(self, seed: int) -> Scenario:
        lam = self.wavelength_m
        return Scenario(
            wavelength=lam, num_users=self.num_users, num_mas=self.num_mas, tx_paths=self.tx_paths,
            rx_paths=self.rx_paths, rician_factor=10 ** (self.rician_factor_db / 10),
            region_size=self.region_size_m,
            grid_spacing=self.grid_spacing_m if self.grid_spacing_m is not None else lam / 4,
            measurement_spacing=self.measurement_spacing_m if self.measurement_spacing_m is not None else lam / 2,
            noise_power=self.noise_power_w, max_power=self.max_power_w, bs_position=self.bs_position_m,
            area_x=self.area_x_m, area_y=self.area_y_m, area_z=self.area_z_m,
            num_scatterers=self.num_scatterers, rng_seed=seed)


class DataBlock(_Strict):
    num_samples: int = Field(2000, ge=0)
    regime: Literal["instantaneous", "statistical"] = "instantaneous"
    slots_per_episode: int = Field(16, ge=1)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    file: str = "data.bin"


class ModelBlock(_Strict):
    feedback_bits: int = Field(10, ge=1)
    pilot_length: int = Field(8, ge=1)
    encoder_hidden: tuple[int, ...] = (64, 32)
    trunk_channels: tuple[int, int, int] = (16, 32, 16)
    trunk_features: int = Field(128, ge=1)
    position_hidden: int = Field(64, ge=1)
    precoder_hidden: int = Field(128, ge=1)
    temperature: float = Field(1.0, gt=0)
    csi_mode: Literal["bits", "perfect"] = "bits"
    stat_d_model: int = Field(64, ge=1)
    stat_heads: int = Field(4, ge=1)
    stat_layers: int = Field(2, ge=1)
    stat_ff: int = Field(128, ge=1)
    stat_positional: bool = False

    @model_validator(mode="after")
    def _heads(self):
        if self.stat_d_model % self.stat_heads:
            raise ValueError("stat_d_model must be divisible by stat_heads")
        return self


class TrainBlock(_Strict):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_decay: float = Field(0.99, gt=0, le=1)
    lr_floor: float = Field(1e-6, ge=0)
    omega0: float = Field(1.0, gt=0)
    omega_growth: float = Field(1.01, ge=1)
    omega_max: float = Field(10.0, gt=0)
    distance_weight_per_m2: float = Field(2000.0, ge=0)
    alternation_period: int = Field(2, ge=1)
    feasibility: bool = False
    random_bits: bool = False
    val_batch: int = Field(256, ge=1)


class BaselineBlock(_Strict):
    methods: list[str] = Field(default_factory=lambda: ["fixed-zf", "zf-perfect"])
    feedback_bits: Optional[int] = Field(None, ge=1, description="default: model.feedback_bits")
    pilot_length: Optional[int] = Field(None, ge=1, description="default: model.pilot_length")
    limit: Optional[int] = Field(None, ge=1)
    prior_samples: int = Field(512, ge=1)


SWEEP_VARIABLES = ("feedback_bits", "region_size_m", "paths", "num_users", "num_mas")


class SweepBlock(_Strict):
    variable: Literal["feedback_bits", "region_size_m", "paths", "num_users", "num_mas"]
    values: list = Field(min_length=1)

    @field_validator("values")
    @classmethod
    def _values(cls, v):
        return list(v)


class ExperimentConfig(_Strict):
    seed: int = 0
    output_dir: str = "runs/default"
    scenario: ScenarioBlock = Field(default_factory=ScenarioBlock)
    data: DataBlock = Field(default_factory=DataBlock)
    model: ModelBlock = Field(default_factory=ModelBlock)
    train: TrainBlock = Field(default_factory=TrainBlock)
    baseline: BaselineBlock = Field(default_factory=BaselineBlock)
    sweep: Optional[SweepBlock] = None

    # builders
    def build_scenario(self) -> Scenario:
        return self.scenario.build(self.seed)

    def build_model_config(self) -> ModelConfig:
        d = self.model.model_dump()
        d["selector"] = "statistical" if self.data.regime == "statistical" else "instantaneous"
        return ModelConfig(seed=self.seed, **d)

    def build_train_config(self) -> TrainConfig:
        d = self.train.model_dump()
        d["distance_weight"] = d.pop("distance_weight_per_m2")
        return TrainConfig(regime=self.data.regime, seed=self.seed, **d)

    @property
    def data_path(self) -> Path:
        return Path(self.output_dir) / self.data.file

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    """Parse and validate a YAML experiment file; ``seed``/``output_dir`` override it."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    cfg = ExperimentConfig.model_validate(raw)
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    if output_dir is not None:
        updates["output_dir"] = str(output_dir)
    return cfg.model_copy(update=updates) if updates else cfg


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "x".join(_fmt(x) for x in v)
    return f"{v:g}" if isinstance(v, float) else str(v)


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[str, object, ExperimentConfig]]:
    """One config per sweep value, each writing to ``output_dir/<variable>=<value>``.

    ``region_size_m`` values may be a single width (the height is kept) or a
    pair; ``paths`` sets both transmit and receive path counts.
    Without a sweep block the config itself is returned with empty labels.
    """
    if cfg.sweep is None:
        return [("", "", cfg)]
    out = []
    for value in cfg.sweep.values:
        d = copy.deepcopy(cfg.model_dump())
        d["sweep"] = None
        var = cfg.sweep.variable
        if var == "feedback_bits":
            d["model"]["feedback_bits"] = int(value)
        elif var == "region_size_m":
            if isinstance(value, (list, tuple)):
                d["scenario"]["region_size_m"] = [float(x) for x in value]
            else:
                d["scenario"]["region_size_m"] = [float(value), d["scenario"]["region_size_m"][1]]
        elif var == "paths":
            d["scenario"]["tx_paths"] = d["scenario"]["rx_paths"] = int(value)
        else:
            d["scenario"][var] = int(value)
        d["output_dir"] = str(Path(cfg.output_dir) / f"{var}={_fmt(value)}")
        out.append((var, value, ExperimentConfig.model_validate(d)))
    return out


def full_scale_config() -> ExperimentConfig:
    """Full-size reference settings (not run at desk scale).

    N = 16 antennas and K = 8 users on a 5 lambda x 5 lambda region with 6 paths
    per user, 1000 epochs of batch 32 at learning rate 1e-4, 30000 samples.
    """
    lam = 0.1
    return ExperimentConfig(
        scenario=ScenarioBlock(wavelength_m=lam, num_users=8, num_mas=16, tx_paths=6, rx_paths=6,
                               region_size_m=(5 * lam, 5 * lam)),
        data=DataBlock(num_samples=30000, val_fraction=0.1),
        model=ModelBlock(feedback_bits=30, encoder_hidden=(1024, 512), trunk_channels=(1024, 2048, 1024),
                         trunk_features=1024, position_hidden=512, precoder_hidden=1024),
        train=TrainBlock(epochs=1000, batch_size=32, lr=1e-4, omega0=1.0),
    )

