from __future__ import annotations

import numpy as np
import pytest
import torch

from accsampler.compression import ActionLadder, build_cost_table
from accsampler.datamodel import FrameRecord, VideoSample
from accsampler.model import AccSamplerModel, BackboneSpec

DESK_LADDER = ActionLadder((1, 3, 5, 7), (32, 24, 16, 12))


def make_video(
    n: int = 16, size: int = 32, seed: int = 0, label: int = 0, video_id: str = "v"
) -> VideoSample:
    rng = np.random.default_rng(seed)
    frames = [
        FrameRecord(rng.uniform(0, 1, (size, size, 3)).astype(np.float32), frame_label=label)
        for _ in range(n)
    ]
    return VideoSample(video_id=video_id, frames=frames, label=label)


def make_model(
    ladder: ActionLadder = DESK_LADDER,
    hidden_dim: int = 64,
    num_stations: int = 2,
    seed: int = 0,
) -> AccSamplerModel:
    torch.manual_seed(seed)
    return AccSamplerModel(
        backbone_spec=BackboneSpec("tiny_conv"),
        ladder=ladder,
        hidden_dim=hidden_dim,
        num_stations=num_stations,
    )


@pytest.fixture(scope="session")
def desk_cost_table():
    return build_cost_table(BackboneSpec("tiny_conv"), DESK_LADDER, 64)
