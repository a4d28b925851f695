"""Learnable components: feature extractor, recurrent aggregator, classifier,
and the GroupNorm + linear policy head.

The station-point extractor shares weights with the rollout feature
extractor; both are the same backbone instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .compression import (
    ActionLadder,
    ConvOp,
    LayerOp,
    backbone_plan,
    plan_feature_dim,
)


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture choice for the per-frame feature extractor.

    ``tiny_conv`` is the desk-scale default; ``mobilenet_v2`` (width 0.75)
    is the full-scale reference configuration.
    """

    architecture: str = "tiny_conv"
    width_mult: float = 1.0
    weights: str | None = None

    @property
    def feature_dim(self) -> int:
        return plan_feature_dim(backbone_plan(self.architecture, self.width_mult))


@dataclass
class RecurrentState:
    """Hidden state of the recurrent aggregator after ``t`` steps."""

    h: torch.Tensor
    t: int = 0


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class Backbone(nn.Module):
    """Conv stack built from a layer plan, with GroupNorm + ReLU after each
    conv and global average pooling at the output, so the feature length is
    resolution-invariant."""

    def __init__(self, plan: list[LayerOp]):
        super().__init__()
        layers: list[nn.Module] = []
        for op in plan:
            if not isinstance(op, ConvOp):
                raise ValueError(f"backbone plan supports conv layers only, got {op!r}")
            layers.append(
                nn.Conv2d(
                    op.in_channels,
                    op.out_channels,
                    kernel_size=op.kernel,
                    stride=op.stride,
                    padding=op.padding,
                    groups=op.groups,
                    bias=False,
                )
            )
            layers.append(nn.GroupNorm(_norm_groups(op.out_channels), op.out_channels))
            layers.append(nn.ReLU(inplace=True))
        self.features = nn.Sequential(*layers)
        self.feature_dim = plan_feature_dim(plan)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.features(x)
        return out.mean(dim=(2, 3))


class PolicyHead(nn.Module):
    """GroupNorm over the concatenated [hidden : station] vector followed by
    a single fully connected layer producing one logit per action."""

    def __init__(self, in_dim: int, num_actions: int, groups: int = 8):
        super().__init__()
        if in_dim % groups != 0:
            raise ValueError(f"policy input dim {in_dim} not divisible by {groups} groups")
        self.norm = nn.GroupNorm(groups, in_dim)
        self.fc = nn.Linear(in_dim, num_actions)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        normed = self.norm(x.unsqueeze(-1)).squeeze(-1)
        return self.fc(normed)


class AccSamplerModel(nn.Module):
    """Backbone + GRU aggregator + classifier + policy head."""

    def __init__(
        self,
        backbone_spec: BackboneSpec = BackboneSpec(),
        ladder: ActionLadder = ActionLadder(),
        hidden_dim: int = 512,
        num_classes: int = 2,
        num_stations: int = 2,
        policy_groups: int = 8,
    ):
        super().__init__()
        self.backbone_spec = backbone_spec
        self.ladder = ladder
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes
        self.num_stations = num_stations
        self.policy_groups = policy_groups

        self.backbone = Backbone(backbone_plan(backbone_spec.architecture, backbone_spec.width_mult))
        self.feature_dim = self.backbone.feature_dim
        self.gru = nn.GRUCell(self.feature_dim, hidden_dim)
        self.classifier = nn.Linear(hidden_dim, num_classes)
        self.frame_head = nn.Linear(self.feature_dim, num_classes)
        policy_in = hidden_dim + (self.feature_dim if num_stations > 0 else 0)
        self.policy = PolicyHead(policy_in, len(ladder), groups=policy_groups)

    def initial_state(self, batch: int = 1, dtype: torch.dtype | None = None) -> RecurrentState:
        dtype = dtype or next(self.parameters()).dtype
        return RecurrentState(h=torch.zeros(batch, self.hidden_dim, dtype=dtype), t=0)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named parameter groups matching the training stages' freeze sets."""
        return {
            "backbone": list(self.backbone.parameters()) + list(self.frame_head.parameters()),
            "recurrent": list(self.gru.parameters()) + list(self.classifier.parameters()),
            "policy": list(self.policy.parameters()),
        }


def extract_features(model: AccSamplerModel, frames: torch.Tensor) -> torch.Tensor:
    """Features for one (3, H, W) frame or a (B, 3, H, W) batch at a ladder resolution."""
    single = frames.ndim == 3
    if single:
        frames = frames.unsqueeze(0)
    res = frames.shape[-1]
    if frames.shape[-2] != res or res not in model.ladder.resolutions:
        raise ValueError(
            f"frame resolution {tuple(frames.shape[-2:])} not in ladder {model.ladder.resolutions}"
        )
    out = model.backbone(frames)
    return out.squeeze(0) if single else out


def recurrent_step(model: AccSamplerModel, feature: torch.Tensor, state: RecurrentState) -> RecurrentState:
    """One gated-recurrent-unit update; increments the step counter."""
    single = feature.ndim == 1
    f = feature.unsqueeze(0) if single else feature
    h = state.h.unsqueeze(0) if state.h.ndim == 1 else state.h
    if f.shape[-1] != model.feature_dim or h.shape[-1] != model.hidden_dim:
        raise ValueError(
            f"dimension mismatch: feature {f.shape[-1]} vs {model.feature_dim}, "
            f"hidden {h.shape[-1]} vs {model.hidden_dim}"
        )
    new_h = model.gru(f, h)
    if single and state.h.ndim == 1:
        new_h = new_h.squeeze(0)
    return RecurrentState(h=new_h, t=state.t + 1)


def classify(model: AccSamplerModel, state: RecurrentState) -> torch.Tensor:
    """Class logits from the final hidden state."""
    h = state.h
    return model.classifier(h)


def policy_forward(
    model: AccSamplerModel, state: RecurrentState, station_feature: torch.Tensor | None
) -> torch.Tensor:
    """Action logits from [hidden : station feature]; station is omitted when
    the model was built with zero station points."""
    h = state.h.unsqueeze(0) if state.h.ndim == 1 else state.h
    if model.num_stations > 0:
        if station_feature is None:
            raise ValueError("model expects a station feature (num_stations > 0)")
        s = station_feature.unsqueeze(0) if station_feature.ndim == 1 else station_feature
        x = torch.cat([h, s], dim=-1)
    else:
        x = h
    logits = model.policy(x)
    return logits.squeeze(0) if state.h.ndim == 1 else logits


def save_checkpoint(model: AccSamplerModel, path: Path | str, stage: int, extra: dict | None = None) -> None:
    """Persist parameters plus the metadata needed to rebuild the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "architecture": model.backbone_spec.architecture,
        "width_mult": model.backbone_spec.width_mult,
        "feature_dim": model.feature_dim,
        "hidden_dim": model.hidden_dim,
        "num_classes": model.num_classes,
        "num_stations": model.num_stations,
        "policy_groups": model.policy_groups,
        "actions": list(model.ladder.actions),
        "resolutions": list(model.ladder.resolutions),
        "stage": stage,
    }
    if extra:
        meta.update(extra)
    torch.save({"meta": meta, "state": model.state_dict()}, path)


def load_checkpoint(path: Path | str) -> tuple[AccSamplerModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=True)
    meta = payload["meta"]
    model = AccSamplerModel(
        backbone_spec=BackboneSpec(architecture=meta["architecture"], width_mult=meta["width_mult"]),
        ladder=ActionLadder(tuple(meta["actions"]), tuple(meta["resolutions"])),
        hidden_dim=meta["hidden_dim"],
        num_classes=meta["num_classes"],
        num_stations=meta["num_stations"],
        policy_groups=meta["policy_groups"],
    )
    model.load_state_dict(payload["state"])
    return model, meta
