"""Preference scoring and dataset distillation.

A trained policy's decisions rank frame importance: small actions (little
fusion) mean the policy wanted detail. Each clip's score spreads to member
frames with a 10% decay per frame of distance from the clip's middle, and
the top-K frames per video form the distilled dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .compression import ActionLadder
from .datamodel import Manifest, ManifestEntry
from .sampler import EpisodeTrace

SCORE_VARIANTS = ("s1", "s2", "s3")


@dataclass
class FrameScores:
    """Per-frame preference scores for one video."""

    video_id: str
    scores: np.ndarray
    variant: str

    def __post_init__(self) -> None:
        if self.variant not in SCORE_VARIANTS:
            raise ValueError(f"variant must be one of {SCORE_VARIANTS}, got {self.variant!r}")
        if np.any(self.scores < 0):
            raise ValueError("scores must be >= 0")


@dataclass(frozen=True)
class SelectionResult:
    """Temporally ordered frame indices chosen by one selector."""

    video_id: str
    k: int
    indices: tuple[int, ...]
    selector: str

    def __post_init__(self) -> None:
        if any(a >= b for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("selected indices must be strictly increasing")

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "selector": self.selector,
            "K": self.k,
            "indices": list(self.indices),
        }


def preference_score(action_vector: Sequence[float], ladder: ActionLadder) -> float:
    """Score of a decision: sum over actions of probability / action size.

    Mass on small actions (keep detail) scores high; mass on large actions
    (fuse a lot) scores low.
    """
    if len(action_vector) != len(ladder):
        raise ValueError(
            f"action vector length {len(action_vector)} does not match ladder size {len(ladder)}"
        )
    vec = np.asarray(action_vector, dtype=np.float64)
    if np.any(vec < 0):
        raise ValueError("action vector entries must be >= 0")
    if vec.sum() > 1.0 + 1e-6:
        raise ValueError(f"action vector sums to {vec.sum()}, expected <= 1")
    return float(sum(p / a for p, a in zip(vec, ladder.actions)))


def _step_vector(step, variant: str, ladder: ActionLadder) -> tuple[float, ...]:
    if variant == "s1":
        idx = ladder.actions.index(step.action)
        return tuple(1.0 if j == idx else 0.0 for j in range(len(ladder)))
    if variant == "s2":
        return step.action_probs
    if step.soft_sample is None:
        raise ValueError(
            f"trace step {step.index} has no soft sample; variant s3 needs a "
            "stochastic (train-mode) trace"
        )
    return step.soft_sample


def frame_scores(trace: EpisodeTrace, variant: str, ladder: ActionLadder) -> FrameScores:
    """Spread per-clip preference scores down to frames.

    The clip consumed at step i is scored by the decision made at step i-1
    (the decision that ordered it); the first clip has no preceding decision
    and is scored from a uniform action vector. Within a clip the middle
    frame takes the full score and each frame of distance d takes
    score * 0.9^d.
    """
    if variant not in SCORE_VARIANTS:
        raise ValueError(f"variant must be one of {SCORE_VARIANTS}, got {variant!r}")
    trace.validate(ladder)
    scores = np.full(trace.num_frames, -1.0)
    uniform = tuple(1.0 / len(ladder) for _ in range(len(ladder)))
    for i, step in enumerate(trace.steps):
        vec = uniform if i == 0 else _step_vector(trace.steps[i - 1], variant, ladder)
        s = preference_score(vec, ladder)
        middle = (step.start + step.end - 1) // 2
        for t in range(step.start, step.end):
            scores[t] = s * 0.9 ** abs(t - middle)
    if np.any(scores < 0):
        raise ValueError("trace spans do not cover every frame")
    return FrameScores(video_id=trace.video_id, scores=scores, variant=variant)


def arithmetic_frame_scores(trace: EpisodeTrace, variant: str, ladder: ActionLadder) -> FrameScores:
    """Alternative spreading with arithmetic decay: score * max(0, 1 - 0.1 d)."""
    geo = frame_scores(trace, variant, ladder)
    scores = np.zeros_like(geo.scores)
    for step in trace.steps:
        middle = (step.start + step.end - 1) // 2
        peak = geo.scores[middle]
        for t in range(step.start, step.end):
            scores[t] = peak * max(0.0, 1.0 - 0.1 * abs(t - middle))
    return FrameScores(video_id=trace.video_id, scores=scores, variant=variant)


def select_topk(scores: FrameScores, k: int) -> SelectionResult:
    """The K highest-scoring frames, ties broken toward earlier frames,
    returned in temporal order."""
    n = len(scores.scores)
    if not 1 <= k <= n:
        raise ValueError(f"K must be in [1, {n}], got {k}")
    order = sorted(range(n), key=lambda i: (-scores.scores[i], i))
    chosen = sorted(order[:k])
    return SelectionResult(
        video_id=scores.video_id, k=k, indices=tuple(chosen), selector="accsampler"
    )


def uniform_select(video_id: str, num_frames: int, k: int) -> SelectionResult:
    """Evenly spaced frames: floor(i * N / K)."""
    if not 1 <= k <= num_frames:
        raise ValueError(f"K must be in [1, {num_frames}], got {k}")
    indices = tuple(i * num_frames // k for i in range(k))
    return SelectionResult(video_id=video_id, k=k, indices=indices, selector="uniform")


def random_select(video_id: str, num_frames: int, k: int, seed: int) -> SelectionResult:
    """K distinct frames drawn without replacement, sorted; deterministic per seed."""
    if not 1 <= k <= num_frames:
        raise ValueError(f"K must be in [1, {num_frames}], got {k}")
    rng = np.random.default_rng(seed)
    indices = tuple(sorted(int(i) for i in rng.choice(num_frames, size=k, replace=False)))
    return SelectionResult(video_id=video_id, k=k, indices=indices, selector="random")


def write_distilled(
    manifest: Manifest, selections: Sequence[SelectionResult]
) -> Manifest:
    """Build the distilled manifest keeping only selected frames per video;
    clip labels pass through unchanged."""
    by_id = {e.video_id: e for e in manifest.entries}
    entries = []
    for sel in selections:
        if sel.video_id not in by_id:
            raise KeyError(f"selection references unknown video {sel.video_id!r}")
        src = by_id[sel.video_id]
        entries.append(
            ManifestEntry(
                video_id=src.video_id,
                frame_paths=[src.frame_paths[i] for i in sel.indices],
                frame_labels=(
                    None
                    if src.frame_labels is None
                    else [src.frame_labels[i] for i in sel.indices]
                ),
                label=src.label,
            )
        )
    return Manifest(entries=entries, split=manifest.split, root=manifest.root)


def write_selections(selections: Sequence[SelectionResult], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for sel in selections:
            fh.write(json.dumps(sel.to_record(), sort_keys=True) + "\n")


def read_selections(path: Path | str) -> list[SelectionResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                SelectionResult(
                    video_id=rec["video_id"],
                    k=int(rec["K"]),
                    indices=tuple(int(i) for i in rec["indices"]),
                    selector=rec["selector"],
                )
            )
    return out
