"""Run configuration: one dataclass tree holding every tunable, JSON-backed.

Defaults follow the reference (full-scale) setup; ``RunConfig.desk()`` is the
small synthetic-data preset used for CPU verification runs.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .compression import ActionLadder, MixupParams
from .datamodel import SyntheticSpec
from .evaluation import DownstreamConfig
from .losses import LossWeights
from .model import BackboneSpec
from .training import StageConfig, TauSchedule


def _build(dc_cls, data: dict):
    """Construct a dataclass from a plain dict, coercing lists to tuples
    where the field is tuple-typed."""
    hints = typing.get_type_hints(dc_cls)
    kwargs = {}
    for f in dataclasses.fields(dc_cls):
        if f.name not in data or not f.init:
            continue
        v = data[f.name]
        if isinstance(v, list) and "tuple" in str(hints.get(f.name, "")):
            v = tuple(v)
        kwargs[f.name] = v
    return dc_cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    """All tunables of a run. Paper-stated values are the defaults wherever
    the source gives one."""

    out_dir: str = "runs/default"
    data_dir: str = "data"
    seed: int = 0
    num_classes: int = 2

    # action ladder and model
    actions: tuple[int, ...] = (1, 3, 5, 7)
    resolutions: tuple[int, ...] = (224, 168, 112, 84)
    backbone: str = "mobilenet_v2"
    width_mult: float = 0.75
    hidden_dim: int = 512
    num_stations: int = 2
    policy_groups: int = 8

    # mixup and objective
    alpha: float = 0.3
    eval_lambda: float = 0.5
    beta: float = 0.3
    gamma: float = 0.1
    balance_norm: str = "abs"
    include_station_cost: bool = True
    soft_feature_scale: bool = True
    tau0: float = 5.0
    tau_min: float = 0.01

    # distillation
    score_variant: str = "s1"
    score_decay: str = "geometric"
    k_list: tuple[int, ...] = (8, 20, 28)
    distill_tau: float = 1.0
    distill_mode: str = "sample"  # sample (stochastic rollouts) | eval
    downstream_seeds: int = 3

    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    stage1: StageConfig = field(
        default_factory=lambda: StageConfig(
            stage=1, epochs=100, lr=0.01, milestones=(50, 70, 90), batch_size=64
        )
    )
    stage2: StageConfig = field(
        default_factory=lambda: StageConfig(stage=2, epochs=20, lr=1.45e-5, batch_size=16)
    )
    stage3: StageConfig = field(
        default_factory=lambda: StageConfig(stage=3, epochs=30, lr=0.01, batch_size=16)
    )
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)

    # --- derived views --------------------------------------------------

    def ladder(self) -> ActionLadder:
        return ActionLadder(self.actions, self.resolutions)

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(architecture=self.backbone, width_mult=self.width_mult)

    def mixup(self) -> MixupParams:
        return MixupParams(alpha=self.alpha, eval_lambda=self.eval_lambda)

    def loss_weights(self) -> LossWeights:
        return LossWeights(beta=self.beta, gamma=self.gamma)

    def tau_schedule(self) -> TauSchedule:
        return TauSchedule(tau0=self.tau0, tau_min=self.tau_min, total_epochs=self.stage3.epochs)

    def stage(self, n: int) -> StageConfig:
        return {1: self.stage1, 2: self.stage2, 3: self.stage3}[n]

    # --- presets ----------------------------------------------------------

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Desk-scale preset: tiny backbone, 32 px synthetic event videos."""
        base = cls(
            out_dir="runs/desk",
            data_dir="data/synthetic",
            backbone="tiny_conv",
            width_mult=1.0,
            resolutions=(32, 24, 16, 12),
            hidden_dim=128,
            k_list=(4, 8, 16),
            synthetic=SyntheticSpec(seed=7),
            stage1=StageConfig(
                stage=1,
                epochs=8,
                lr=0.05,
                milestones=(6,),
                batch_size=128,
                multi_resolution=True,
                mixup_augment=0.5,
            ),
            stage2=StageConfig(
                stage=2,
                epochs=20,
                lr=0.05,
                milestones=(15,),
                batch_size=16,
                compression_augment=0.5,
                feature_scale_jitter=(0.25, 1.0),
            ),
            stage3=StageConfig(
                stage=3,
                epochs=25,
                lr=0.01,
                batch_size=16,
                val_fraction=0.2,
                early_stop_patience=5,
            ),
            downstream=DownstreamConfig(lr=0.02),
        )
        return replace(base, **overrides) if overrides else base

    # --- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        nested = {
            "synthetic": SyntheticSpec,
            "stage1": StageConfig,
            "stage2": StageConfig,
            "stage3": StageConfig,
            "downstream": DownstreamConfig,
        }
        for key, sub_cls in nested.items():
            if key in data and isinstance(data[key], dict):
                data[key] = _build(sub_cls, data[key])
        return _build(cls, data)

    @classmethod
    def from_json(cls, path: Path | str) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``dotted.path=value`` overrides; values parse as JSON when
        possible, otherwise as strings. Flags win over the config file."""
        data = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not of the form key=value")
            path, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = path.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise KeyError(f"unknown config key {path!r}")
                node = node[part]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key {path!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(data)
