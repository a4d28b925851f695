"""The rollout engine: station points, Gumbel action sampling, and the
clip-consumption loop.

A rollout consumes a video clip-by-clip. The clip length and resolution of
step i+1 are chosen by the policy at step i; the first step always processes
one frame at full resolution. Each rollout yields class logits plus an
EpisodeTrace auditing spans, action distributions, and compute cost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .compression import ActionLadder, CostTable, MixupParams, fuse_clip, resize_frame, sample_lambda
from .datamodel import VideoSample
from .model import AccSamplerModel, classify, extract_features, policy_forward, recurrent_step

_EPS = 1e-20


def select_station_points(num_frames: int, num_stations: int) -> list[int]:
    """Uniformly spaced station frame indices: floor(m * N / (M + 1)) for m = 1..M."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if num_stations < 0:
        raise ValueError("num_stations must be >= 0")
    return [m * num_frames // (num_stations + 1) for m in range(1, num_stations + 1)]


def nearest_future_station(position: int, station_indices: Sequence[int]) -> int:
    """Ordinal of the station with the smallest frame index >= position,
    falling back to the last station when none lies ahead."""
    if len(station_indices) == 0:
        raise ValueError("no station points; use the no-station policy variant")
    for m, idx in enumerate(station_indices):
        if idx >= position:
            return m
    return len(station_indices) - 1


def gumbel_noise(
    shape: tuple[int, ...],
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Standard Gumbel(0, 1) noise: -log(-log(U)), U ~ Uniform(0, 1)."""
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + _EPS) + _EPS)


def gumbel_max(
    log_probs: torch.Tensor,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> int:
    """Sample an action index via the Gumbel-max trick: argmax(log p + G)."""
    if bool(torch.isneginf(log_probs).all()):
        raise ValueError("all action probabilities are zero")
    if noise is None:
        noise = gumbel_noise(log_probs.shape, generator, dtype=log_probs.dtype)
    return int(torch.argmax(log_probs + noise).item())


def gumbel_softmax(
    log_probs: torch.Tensor,
    tau: float,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Soft relaxation softmax((log p + G) / tau); differentiable in log_probs."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if noise is None:
        noise = gumbel_noise(log_probs.shape, generator, dtype=log_probs.dtype)
    return F.softmax((log_probs + noise) / tau, dim=-1)


@dataclass
class StepRecord:
    """One rollout step: the clip consumed plus the decision made for the next step."""

    index: int
    start: int
    end: int
    action_probs: tuple[float, ...]
    soft_sample: tuple[float, ...] | None
    action: int
    resolution: int
    gflops: float
    station_frame: int | None

    def to_record(self) -> dict:
        return {
            "i": self.index,
            "start": self.start,
            "end": self.end,
            "ap": list(self.action_probs),
            "ags": None if self.soft_sample is None else list(self.soft_sample),
            "k": self.action,
            "r": self.resolution,
            "gflops": self.gflops,
            "station": self.station_frame,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "StepRecord":
        return cls(
            index=int(rec["i"]),
            start=int(rec["start"]),
            end=int(rec["end"]),
            action_probs=tuple(float(x) for x in rec["ap"]),
            soft_sample=None if rec.get("ags") is None else tuple(float(x) for x in rec["ags"]),
            action=int(rec["k"]),
            resolution=int(rec["r"]),
            gflops=float(rec["gflops"]),
            station_frame=None if rec.get("station") is None else int(rec["station"]),
        )


@dataclass
class EpisodeTrace:
    """Audit record of one rollout."""

    video_id: str
    num_frames: int
    steps: list[StepRecord]
    station_gflops: float = 0.0
    # Graph-connected soft action vectors, present only on train-mode rollouts;
    # never serialized.
    soft_actions: list[torch.Tensor] | None = field(default=None, repr=False, compare=False)

    @property
    def total_gflops(self) -> float:
        return sum(s.gflops for s in self.steps) + self.station_gflops

    def validate(self, ladder: ActionLadder) -> None:
        """Check the span partition and ladder-pairing invariants."""
        pos = 0
        prev_action = ladder.actions[0]
        for step in self.steps:
            if step.start != pos:
                raise AssertionError(f"step {step.index} starts at {step.start}, expected {pos}")
            expected_len = min(prev_action, self.num_frames - pos)
            if step.end - step.start != expected_len:
                raise AssertionError(
                    f"step {step.index} span length {step.end - step.start}, expected {expected_len}"
                )
            if step.action not in ladder.actions:
                raise AssertionError(f"step {step.index} action {step.action} not on the ladder")
            if step.resolution != ladder.resolution_for(prev_action):
                raise AssertionError(
                    f"step {step.index} resolution {step.resolution} does not pair with k={prev_action}"
                )
            pos = step.end
            prev_action = step.action
        if pos != self.num_frames:
            raise AssertionError(f"spans cover [0, {pos}), expected [0, {self.num_frames})")

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "video_id": self.video_id,
                "num_frames": self.num_frames,
                "station_gflops": self.station_gflops,
                "total_gflops": self.total_gflops,
                "steps": [s.to_record() for s in self.steps],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json_line(cls, line: str) -> "EpisodeTrace":
        rec = json.loads(line)
        return cls(
            video_id=rec["video_id"],
            num_frames=int(rec["num_frames"]),
            steps=[StepRecord.from_record(s) for s in rec["steps"]],
            station_gflops=float(rec.get("station_gflops", 0.0)),
        )


def _station_features(
    model: AccSamplerModel, frames: torch.Tensor, indices: Sequence[int]
) -> torch.Tensor:
    full_res = model.ladder.resolutions[0]
    stacked = torch.stack([resize_frame(frames[i], full_res) for i in indices])
    return extract_features(model, stacked)


def rollout(
    video: VideoSample,
    model: AccSamplerModel,
    cost_table: CostTable,
    mode: str = "eval",
    *,
    mixup: MixupParams = MixupParams(),
    tau: float = 1.0,
    generator: torch.Generator | None = None,
    rng: np.random.Generator | None = None,
    include_station_cost: bool = True,
    soft_feature_scale: bool = True,
    action_override: Callable[[int], int] | None = None,
) -> tuple[torch.Tensor, EpisodeTrace]:
    """Run one policy-driven pass over a video.

    In train mode actions are sampled with Gumbel-max and each step also
    produces a Gumbel-Softmax relaxation at temperature ``tau``; the soft
    probability of the executed action scales the next step's feature so the
    classification loss stays differentiable w.r.t. the policy. Eval mode is
    fully deterministic (argmax actions, fixed mixup lambda, no noise).

    ``action_override(step_index) -> action ordinal`` bypasses the policy
    (and stations) entirely; used for dense baselines and random-policy
    diagnostics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ladder = model.ladder
    dtype = next(model.parameters()).dtype
    frames = video.frames_tensor(dtype)
    n = video.num_frames

    use_policy = action_override is None
    use_stations = use_policy and model.num_stations > 0
    station_indices = select_station_points(n, model.num_stations) if use_stations else []
    station_feats = _station_features(model, frames, station_indices) if use_stations else None
    station_cost = (
        model.num_stations * cost_table.cost(ladder.resolutions[0])
        if (use_stations and include_station_cost)
        else 0.0
    )

    state = model.initial_state(dtype=dtype)
    steps: list[StepRecord] = []
    softs: list[torch.Tensor] = []
    action_idx = 0  # first step: one frame at full resolution
    scale: torch.Tensor | None = None
    pos = 0
    while pos < n:
        k = ladder.actions[action_idx]
        res = ladder.resolutions[action_idx]
        take = min(k, n - pos)
        lam = sample_lambda(mixup, mode, rng) if take > 1 else mixup.eval_lambda
        fused = fuse_clip([frames[i] for i in range(pos, pos + take)], lam, res)
        feature = extract_features(model, fused.unsqueeze(0))
        if scale is not None:
            feature = feature * scale
        state = recurrent_step(model, feature, state)
        end = pos + take

        station_ordinal = None
        if use_policy:
            station_feature = None
            if use_stations:
                station_ordinal = nearest_future_station(end, station_indices)
                station_feature = station_feats[station_ordinal : station_ordinal + 1]
            logits = policy_forward(model, state, station_feature)
            log_p = F.log_softmax(logits.squeeze(0), dim=-1)
            a_p = log_p.exp()
            if mode == "train":
                noise = gumbel_noise(log_p.shape, generator, dtype=log_p.dtype)
                next_idx = gumbel_max(log_p.detach(), noise=noise)
                a_gs = gumbel_softmax(log_p, tau, noise=noise)
                softs.append(a_gs)
                scale = a_gs[next_idx] if soft_feature_scale else None
                soft_out = tuple(float(x) for x in a_gs.detach())
            else:
                next_idx = int(torch.argmax(a_p).item())
                soft_out = None
            probs_out = tuple(float(x) for x in a_p.detach())
        else:
            next_idx = int(action_override(len(steps)))
            if not 0 <= next_idx < len(ladder):
                raise ValueError(f"action override returned {next_idx}, outside the ladder")
            probs_out = tuple(1.0 if j == next_idx else 0.0 for j in range(len(ladder)))
            soft_out = None

        steps.append(
            StepRecord(
                index=len(steps),
                start=pos,
                end=end,
                action_probs=probs_out,
                soft_sample=soft_out,
                action=ladder.actions[next_idx],
                resolution=res,
                gflops=cost_table.cost(res),
                station_frame=None if station_ordinal is None else station_indices[station_ordinal],
            )
        )
        action_idx = next_idx
        pos = end

    logits = classify(model, state).squeeze(0)
    trace = EpisodeTrace(
        video_id=video.video_id,
        num_frames=n,
        steps=steps,
        station_gflops=station_cost,
        soft_actions=softs if mode == "train" else None,
    )
    return logits, trace


def write_traces(traces: Sequence[EpisodeTrace], path) -> None:
    with open(path, "w") as fh:
        for t in traces:
            fh.write(t.to_json_line() + "\n")


def read_traces(path) -> list[EpisodeTrace]:
    with open(path) as fh:
        return [EpisodeTrace.from_json_line(line) for line in fh if line.strip()]
