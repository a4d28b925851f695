"""Clip mixup, resolution resizing, and per-resolution compute-cost accounting.

The cost table maps each ladder resolution to the GFLOPs of one fused-frame
step: the convolutional feature extractor at that resolution plus one
recurrent update. Costs count conv/linear multiply-accumulates with
1 MAC = 2 FLOPs; normalization and activations are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class ActionLadder:
    """Paired action space and resolution set.

    ``actions[j]`` frames get fused into one frame at ``resolutions[j]`` px;
    action 1 always pairs with the largest resolution.
    """

    actions: tuple[int, ...] = (1, 3, 5, 7)
    resolutions: tuple[int, ...] = (224, 168, 112, 84)

    def __post_init__(self) -> None:
        if len(self.actions) != len(self.resolutions):
            raise ValueError("actions and resolutions must have equal length")
        if self.actions[0] != 1:
            raise ValueError("the first action must be 1 (full-detail step)")
        if any(a >= b for a, b in zip(self.actions, self.actions[1:])):
            raise ValueError("actions must be strictly increasing")
        if any(a <= b for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError("resolutions must be strictly decreasing")

    def __len__(self) -> int:
        return len(self.actions)

    def resolution_for(self, action: int) -> int:
        return self.resolutions[self.actions.index(action)]


@dataclass(frozen=True)
class MixupParams:
    """Clip-mixup sampling parameters: Beta(alpha, alpha) in training, a
    fixed lambda at inference."""

    alpha: float = 0.3
    eval_lambda: float = 0.5

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.eval_lambda <= 1.0:
            raise ValueError("eval_lambda must be in [0, 1]")


def sample_lambda(params: MixupParams, mode: str, rng: np.random.Generator | None = None) -> float:
    """Draw the mixup scale: Beta(alpha, alpha) per clip in train mode,
    the fixed eval value otherwise."""
    if mode == "eval":
        return params.eval_lambda
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("train mode requires an rng")
    return float(rng.beta(params.alpha, params.alpha))


def clip_mixup(first: torch.Tensor, last: torch.Tensor, lam: float) -> torch.Tensor:
    """Pixelwise convex combination lam * first + (1 - lam) * last."""
    if first.shape != last.shape:
        raise ValueError(f"frame shapes differ: {tuple(first.shape)} vs {tuple(last.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * first + (1.0 - lam) * last


def resize_frame(frame: torch.Tensor, target: int) -> torch.Tensor:
    """Bilinear resize of a (C, H, W) frame to target x target, corners not aligned."""
    if frame.ndim != 3:
        raise ValueError(f"expected (C, H, W) frame, got shape {tuple(frame.shape)}")
    if frame.shape[1] == target and frame.shape[2] == target:
        return frame
    out = F.interpolate(
        frame.unsqueeze(0), size=(target, target), mode="bilinear", align_corners=False
    )
    return out.squeeze(0)


def fuse_clip(frames: Sequence[torch.Tensor], lam: float, target_resolution: int) -> torch.Tensor:
    """Collapse a clip into one frame at the target resolution.

    Single-frame clips are resized only; longer clips resize their first and
    last frames and blend them with ``clip_mixup``.
    """
    if len(frames) == 0:
        raise ValueError("cannot fuse an empty clip")
    first = resize_frame(frames[0], target_resolution)
    if len(frames) == 1:
        return first
    last = resize_frame(frames[-1], target_resolution)
    return clip_mixup(first, last, lam)


# --- compute-cost accounting -------------------------------------------------


@dataclass(frozen=True)
class ConvOp:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    groups: int = 1


@dataclass(frozen=True)
class LinearOp:
    name: str
    in_features: int
    out_features: int


LayerOp = ConvOp | LinearOp


def conv_output_size(size: int, op: ConvOp) -> int:
    out = (size + 2 * op.padding - op.kernel) // op.stride + 1
    if out < 1:
        raise ValueError(f"layer {op.name}: input size {size} too small")
    return out


def plan_macs(plan: Sequence[LayerOp], resolution: int) -> int:
    """Exact multiply-accumulate count of a conv/linear plan at a square input size."""
    macs = 0
    size = resolution
    for op in plan:
        if isinstance(op, ConvOp):
            size = conv_output_size(size, op)
            macs += size * size * op.out_channels * (op.kernel * op.kernel * op.in_channels // op.groups)
        elif isinstance(op, LinearOp):
            macs += op.in_features * op.out_features
        else:
            raise ValueError(f"unsupported layer type in backbone plan: {type(op).__name__}")
    return macs


def gru_step_macs(input_dim: int, hidden_dim: int) -> int:
    """MACs of one gated-recurrent-unit update (three input and three hidden matmuls)."""
    return 3 * (input_dim * hidden_dim + hidden_dim * hidden_dim)


def _make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


# MobileNet-v2 inverted-residual stages: (expansion, channels, repeats, stride)
_MBV2_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def mobilenet_v2_plan(width_mult: float = 1.0) -> list[LayerOp]:
    plan: list[LayerOp] = []
    c = _make_divisible(32 * width_mult)
    plan.append(ConvOp("stem", 3, c, kernel=3, stride=2, padding=1))
    for s_idx, (t, channels, n, s) in enumerate(_MBV2_STAGES):
        out_c = _make_divisible(channels * width_mult)
        for i in range(n):
            stride = s if i == 0 else 1
            hidden = c * t
            tag = f"ir{s_idx}.{i}"
            if t != 1:
                plan.append(ConvOp(f"{tag}.expand", c, hidden, kernel=1, stride=1, padding=0))
            plan.append(
                ConvOp(f"{tag}.dw", hidden, hidden, kernel=3, stride=stride, padding=1, groups=hidden)
            )
            plan.append(ConvOp(f"{tag}.project", hidden, out_c, kernel=1, stride=1, padding=0))
            c = out_c
    plan.append(ConvOp("head", c, 1280, kernel=1, stride=1, padding=0))
    return plan


def tiny_conv_plan() -> list[LayerOp]:
    plan: list[LayerOp] = []
    channels = (3, 16, 32, 48, 64)
    for i, (cin, cout) in enumerate(zip(channels, channels[1:])):
        plan.append(ConvOp(f"block{i}", cin, cout, kernel=3, stride=2, padding=1))
    return plan


_PLANS = {
    "tiny_conv": lambda width: tiny_conv_plan(),
    "mobilenet_v2": mobilenet_v2_plan,
}


def backbone_plan(architecture: str, width_mult: float = 1.0) -> list[LayerOp]:
    if architecture not in _PLANS:
        raise ValueError(f"unknown backbone architecture {architecture!r}")
    return _PLANS[architecture](width_mult)


def plan_feature_dim(plan: Sequence[LayerOp]) -> int:
    """Output feature length after global average pooling the last conv."""
    for op in reversed(plan):
        if isinstance(op, ConvOp):
            return op.out_channels
        if isinstance(op, LinearOp):
            return op.out_features
    raise ValueError("empty backbone plan")


@dataclass(frozen=True)
class CostTable:
    """Per-resolution step cost in GFLOPs (feature extraction + one recurrent step)."""

    gflops_per_frame: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        items = sorted(self.gflops_per_frame.items())
        if any(v <= 0 for _, v in items):
            raise ValueError("all cost entries must be positive")
        costs = [v for _, v in items]
        if any(a >= b for a, b in zip(costs, costs[1:])):
            raise ValueError("cost must be strictly increasing in resolution")

    def cost(self, resolution: int) -> float:
        try:
            return self.gflops_per_frame[resolution]
        except KeyError:
            raise KeyError(f"no cost entry for resolution {resolution}") from None

    def costs_for(self, ladder: ActionLadder) -> list[float]:
        return [self.cost(r) for r in ladder.resolutions]

    def write(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for res, cost in sorted(self.gflops_per_frame.items()):
                fh.write(f"{res} {cost:.9f}\n")

    @classmethod
    def read(cls, path: Path | str) -> "CostTable":
        table = {}
        with open(path) as fh:
            for line in fh:
                res, cost = line.split()
                table[int(res)] = float(cost)
        return cls(gflops_per_frame=table)


def build_cost_table(backbone_spec, ladder: ActionLadder, hidden_dim: int) -> CostTable:
    """Cost table for a backbone at every ladder resolution.

    ``backbone_spec`` needs ``architecture`` and ``width_mult`` attributes
    (see model.BackboneSpec).
    """
    plan = backbone_plan(backbone_spec.architecture, backbone_spec.width_mult)
    feature_dim = plan_feature_dim(plan)
    recurrent = gru_step_macs(feature_dim, hidden_dim)
    table = {}
    for res in ladder.resolutions:
        macs = plan_macs(plan, res) + recurrent
        table[res] = 2.0 * macs / 1e9
    return CostTable(gflops_per_frame=table)
