"""The three training losses and their weighted total.

Balance and compute losses come in two flavors: a differentiable soft
version over Gumbel-Softmax action vectors (used for training) and a hard
version over executed actions (used for reporting). Batches reduce as the
mean over videos of each video's own per-step mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .compression import ActionLadder, CostTable
from .sampler import EpisodeTrace


@dataclass(frozen=True)
class LossWeights:
    """Weights of the balance (beta) and compute (gamma) terms."""

    beta: float = 0.3
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be >= 0")


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy averaged over the batch."""
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    labels = labels.reshape(-1)
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError(f"label out of range for {logits.shape[-1]} classes")
    return F.cross_entropy(logits, labels)


def _per_video_usage(soft: torch.Tensor) -> torch.Tensor:
    if soft.ndim != 2 or soft.shape[0] == 0:
        raise ValueError("expected a nonempty (steps, actions) matrix per video")
    return soft.mean(dim=0)


def balance_loss_soft(
    soft_per_video: Sequence[torch.Tensor], norm: str = "abs"
) -> torch.Tensor:
    """Deviation of mean soft action usage from uniform, summed over actions."""
    if len(soft_per_video) == 0:
        raise ValueError("balance loss needs at least one video")
    usage = torch.stack([_per_video_usage(s) for s in soft_per_video]).mean(dim=0)
    dev = usage - 1.0 / usage.shape[0]
    if norm == "abs":
        return dev.abs().sum()
    if norm == "squared":
        return dev.pow(2).sum()
    raise ValueError(f"unknown balance norm {norm!r}")


def hard_usage(traces: Sequence[EpisodeTrace], ladder: ActionLadder) -> torch.Tensor:
    """Empirical action-usage histogram over traces (per-video mean of one-hot choices)."""
    if len(traces) == 0:
        raise ValueError("no traces")
    rows = []
    for t in traces:
        if len(t.steps) == 0:
            raise ValueError(f"trace {t.video_id} has zero steps")
        counts = torch.zeros(len(ladder))
        for s in t.steps:
            counts[ladder.actions.index(s.action)] += 1.0
        rows.append(counts / len(t.steps))
    return torch.stack(rows).mean(dim=0)


def balance_loss_hard(
    traces: Sequence[EpisodeTrace], ladder: ActionLadder, norm: str = "abs"
) -> float:
    usage = hard_usage(traces, ladder)
    dev = usage - 1.0 / len(ladder)
    if norm == "abs":
        return float(dev.abs().sum())
    if norm == "squared":
        return float(dev.pow(2).sum())
    raise ValueError(f"unknown balance norm {norm!r}")


def gflops_loss_soft(
    soft_per_video: Sequence[torch.Tensor], ladder: ActionLadder, cost_table: CostTable
) -> torch.Tensor:
    """Expected step cost under the soft action distributions."""
    if len(soft_per_video) == 0:
        raise ValueError("gflops loss needs at least one video")
    costs = None
    per_video = []
    for soft in soft_per_video:
        if costs is None or costs.dtype != soft.dtype:
            costs = torch.tensor(cost_table.costs_for(ladder), dtype=soft.dtype)
        per_video.append((_per_video_usage(soft) * costs).sum())
    return torch.stack(per_video).mean()


def gflops_loss_hard(traces: Sequence[EpisodeTrace]) -> float:
    """Mean executed per-step cost: the realized average GFLOPs per processed frame-step."""
    if len(traces) == 0:
        raise ValueError("no traces")
    per_video = []
    for t in traces:
        if len(t.steps) == 0:
            raise ValueError(f"trace {t.video_id} has zero steps")
        per_video.append(sum(s.gflops for s in t.steps) / len(t.steps))
    return float(sum(per_video) / len(per_video))


def total_loss(
    l_c: torch.Tensor | float,
    l_b: torch.Tensor | float,
    l_g: torch.Tensor | float,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor | float:
    """Weighted sum L_c + beta * L_b + gamma * L_g."""
    return l_c + weights.beta * l_b + weights.gamma * l_g
