"""AccSampler: adaptive clip compression and frame sampling for efficient
video classification, with preference-score dataset distillation."""

from .compression import ActionLadder, CostTable, MixupParams, build_cost_table
from .config import RunConfig
from .datamodel import (
    FrameRecord,
    Manifest,
    SyntheticSpec,
    VideoSample,
    build_clips,
    generate_synthetic,
    load_manifest,
    write_manifest,
)
from .losses import LossWeights
from .model import AccSamplerModel, BackboneSpec, load_checkpoint, save_checkpoint
from .sampler import EpisodeTrace, StepRecord, rollout
from .training import StageConfig, TauSchedule, TrainSettings, run_stage

__version__ = "0.1.0"

__all__ = [
    "ActionLadder",
    "AccSamplerModel",
    "BackboneSpec",
    "CostTable",
    "EpisodeTrace",
    "FrameRecord",
    "LossWeights",
    "Manifest",
    "MixupParams",
    "RunConfig",
    "StageConfig",
    "StepRecord",
    "SyntheticSpec",
    "TauSchedule",
    "TrainSettings",
    "VideoSample",
    "build_clips",
    "build_cost_table",
    "generate_synthetic",
    "load_checkpoint",
    "load_manifest",
    "rollout",
    "run_stage",
    "save_checkpoint",
    "write_manifest",
    "__version__",
]
