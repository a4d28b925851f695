"""Staged training: backbone on frame labels, recurrent aggregator on clip
labels, then the policy head with the full three-term objective.

Each stage freezes everything outside its own parameter group, so earlier
stages' weights are bit-identical before and after a later stage.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .compression import ActionLadder, CostTable, MixupParams, build_cost_table, fuse_clip, resize_frame
from .datamodel import Manifest, VideoSample
from .losses import (
    LossWeights,
    balance_loss_hard,
    balance_loss_soft,
    classification_loss,
    gflops_loss_hard,
    gflops_loss_soft,
    hard_usage,
    total_loss,
)
from .model import AccSamplerModel, load_checkpoint, save_checkpoint
from .sampler import rollout


class MissingCheckpointError(FileNotFoundError):
    """A stage was started without its prerequisite checkpoint."""


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters of one training stage.

    Stage 1 fine-tunes the backbone on frame labels, stage 2 trains the
    recurrent aggregator and classifier on clip labels with the backbone
    frozen, stage 3 trains only the policy head.
    """

    stage: int
    epochs: int
    lr: float
    milestones: tuple[int, ...] = ()
    lr_factor: float = 0.1
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    # stage-1 augmentation
    multi_resolution: bool = False
    mixup_augment: float = 0.0
    # stage-2 augmentation: fraction of videos fed as randomly compressed
    # sequences, optionally with per-step feature-scale jitter
    compression_augment: float = 0.0
    feature_scale_jitter: tuple[float, float] | None = None
    # stage-3 validation / early stopping (patience <= 0 disables)
    val_fraction: float = 0.2
    early_stop_patience: int = 5

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2, or 3, got {self.stage}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class TauSchedule:
    """Linear Gumbel-Softmax temperature annealing with a positive floor."""

    tau0: float = 5.0
    tau_min: float = 0.01
    total_epochs: int = 30

    def __post_init__(self) -> None:
        if not 0 < self.tau_min <= self.tau0:
            raise ValueError("need 0 < tau_min <= tau0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


@dataclass(frozen=True)
class TrainSettings:
    """Knobs shared across stages."""

    mixup: MixupParams = MixupParams()
    weights: LossWeights = LossWeights()
    balance_norm: str = "abs"
    soft_feature_scale: bool = True
    include_station_cost: bool = True
    seed: int = 0


def lr_at(
    epoch: int,
    *,
    initial: float = 0.01,
    milestones: tuple[int, ...] = (50, 70, 90),
    factor: float = 0.1,
    total_epochs: int = 100,
) -> float:
    """Step-decayed learning rate; defaults follow the stage-1 schedule
    (0.01 cut by 10x at epochs 50, 70, and 90 of 100)."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    drops = sum(1 for m in milestones if epoch >= m)
    return initial * factor**drops


def tau_at(schedule: TauSchedule, epoch: int) -> float:
    """Linearly annealed temperature, clamped at the floor."""
    frac = 1.0 - epoch / schedule.total_epochs
    return max(schedule.tau0 * frac, schedule.tau_min)


def _sgd(params, cfg: StageConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _freeze_except(model: AccSamplerModel, trainable: str) -> list[torch.nn.Parameter]:
    groups = model.parameter_groups()
    for name, params in groups.items():
        for p in params:
            p.requires_grad_(name == trainable)
    return groups[trainable]


def _labeled_frames(samples: Sequence[VideoSample]) -> tuple[torch.Tensor, torch.Tensor]:
    """All labeled frames stacked as (F, 3, H, W) with their labels."""
    frames, labels = [], []
    for v in samples:
        tensor = v.frames_tensor()
        for i, f in enumerate(v.frames):
            if f.frame_label is None:
                raise ValueError(f"video {v.video_id}: stage 1 needs per-frame labels")
            frames.append(tensor[i])
            labels.append(int(f.frame_label))
    return torch.stack(frames), torch.tensor(labels, dtype=torch.long)


def train_stage1(
    model: AccSamplerModel,
    samples: Sequence[VideoSample],
    cfg: StageConfig,
    settings: TrainSettings,
) -> list[dict]:
    """Frame-level backbone fine-tuning with cross entropy."""
    torch.manual_seed(settings.seed * 1009 + 1)
    rng = np.random.default_rng(settings.seed * 1009 + 1)
    params = _freeze_except(model, "backbone")
    optimizer = _sgd(params, cfg)
    frames, labels = _labeled_frames(samples)
    n = frames.shape[0]
    log = []
    model.train()
    for epoch in range(cfg.epochs):
        lr = lr_at(
            epoch,
            initial=cfg.lr,
            milestones=cfg.milestones,
            factor=cfg.lr_factor,
            total_epochs=cfg.epochs,
        )
        _set_lr(optimizer, lr)
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x = frames[idx]
            y = labels[idx]
            if cfg.mixup_augment > 0 and rng.uniform() < cfg.mixup_augment:
                x = _same_label_mixup(x, y, settings.mixup, rng)
            if cfg.multi_resolution:
                res = int(model.ladder.resolutions[rng.integers(0, len(model.ladder))])
                if res != x.shape[-1]:
                    x = torch.nn.functional.interpolate(
                        x, size=(res, res), mode="bilinear", align_corners=False
                    )
            logits = model.frame_head(model.backbone(x))
            loss = classification_loss(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        log.append({"stage": 1, "epoch": epoch, "lr": lr, "L_c": float(np.mean(losses))})
    return log


def _same_label_mixup(
    x: torch.Tensor, y: torch.Tensor, mixup: MixupParams, rng: np.random.Generator
) -> torch.Tensor:
    """Blend frames with same-label partners; mismatched pairs stay unmixed."""
    perm = torch.from_numpy(rng.permutation(x.shape[0]))
    lam = float(rng.beta(mixup.alpha, mixup.alpha))
    mask = (y == y[perm]).view(-1, 1, 1, 1)
    mixed = lam * x + (1.0 - lam) * x[perm]
    return torch.where(mask, mixed, x)


def random_compression_plan(
    num_frames: int, ladder: ActionLadder, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """Spans (start, end, ladder index) of a uniformly random rollout; mirrors
    the sampler's geometry (first step one frame at full resolution)."""
    spans = []
    pos, idx = 0, 0
    while pos < num_frames:
        take = min(ladder.actions[idx], num_frames - pos)
        spans.append((pos, pos + take, idx))
        idx = int(rng.integers(0, len(ladder)))
        pos += take
    return spans


def _feature_sequence(
    model: AccSamplerModel,
    video: VideoSample,
    cfg: StageConfig,
    mixup: MixupParams,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Per-step backbone features for stage 2: dense full-resolution by
    default, a randomly compressed sequence when augmentation fires."""
    frames = video.frames_tensor()
    full_res = model.ladder.resolutions[0]
    with torch.no_grad():
        if cfg.compression_augment > 0 and rng.uniform() < cfg.compression_augment:
            fused = []
            for start, end, idx in random_compression_plan(video.num_frames, model.ladder, rng):
                res = model.ladder.resolutions[idx]
                lam = float(rng.beta(mixup.alpha, mixup.alpha)) if end - start > 1 else 1.0
                fused.append(fuse_clip([frames[i] for i in range(start, end)], lam, res))
            feats = torch.stack([model.backbone(f.unsqueeze(0)).squeeze(0) for f in fused])
            if cfg.feature_scale_jitter is not None:
                lo, hi = cfg.feature_scale_jitter
                scales = torch.from_numpy(rng.uniform(lo, hi, size=(feats.shape[0], 1))).float()
                feats = feats * scales
        else:
            if frames.shape[-1] != full_res:
                frames = torch.stack([resize_frame(f, full_res) for f in frames])
            feats = model.backbone(frames)
    return feats


def _gru_over_padded(
    model: AccSamplerModel, sequences: list[torch.Tensor]
) -> torch.Tensor:
    """Final hidden states for variable-length feature sequences."""
    lengths = torch.tensor([s.shape[0] for s in sequences])
    t_max = int(lengths.max())
    batch = len(sequences)
    padded = torch.zeros(batch, t_max, model.feature_dim)
    for i, s in enumerate(sequences):
        padded[i, : s.shape[0]] = s
    h = torch.zeros(batch, model.hidden_dim)
    for t in range(t_max):
        active = (lengths > t).unsqueeze(1)
        h_new = model.gru(padded[:, t], h)
        h = torch.where(active, h_new, h)
    return h


def train_stage2(
    model: AccSamplerModel,
    samples: Sequence[VideoSample],
    cfg: StageConfig,
    settings: TrainSettings,
) -> list[dict]:
    """Clip-level training of the recurrent aggregator and classifier over a
    frozen backbone."""
    torch.manual_seed(settings.seed * 1009 + 2)
    rng = np.random.default_rng(settings.seed * 1009 + 2)
    params = _freeze_except(model, "recurrent")
    optimizer = _sgd(params, cfg)
    labels = torch.tensor([v.label for v in samples], dtype=torch.long)
    log = []
    model.train()
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_factor ** sum(1 for m in cfg.milestones if epoch >= m)
        _set_lr(optimizer, lr)
        perm = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(samples), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            sequences = [_feature_sequence(model, samples[i], cfg, settings.mixup, rng) for i in idx]
            h = _gru_over_padded(model, sequences)
            logits = model.classifier(h)
            loss = classification_loss(logits, labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        log.append({"stage": 2, "epoch": epoch, "lr": lr, "L_c": float(np.mean(losses))})
    return log


def _eval_accuracy(
    model: AccSamplerModel,
    samples: Sequence[VideoSample],
    cost_table: CostTable,
    settings: TrainSettings,
) -> float:
    correct = 0
    with torch.no_grad():
        for v in samples:
            logits, _ = rollout(
                v,
                model,
                cost_table,
                mode="eval",
                mixup=settings.mixup,
                include_station_cost=settings.include_station_cost,
            )
            correct += int(int(torch.argmax(logits)) == v.label)
    return correct / max(1, len(samples))


def train_stage3(
    model: AccSamplerModel,
    samples: Sequence[VideoSample],
    cfg: StageConfig,
    settings: TrainSettings,
    cost_table: CostTable,
    tau_schedule: TauSchedule,
) -> list[dict]:
    """Policy-head training with the full objective via train-mode rollouts."""
    torch.manual_seed(settings.seed * 1009 + 3)
    rng = np.random.default_rng(settings.seed * 1009 + 3)
    gen = torch.Generator().manual_seed(settings.seed * 1009 + 3)
    params = _freeze_except(model, "policy")
    optimizer = _sgd(params, cfg)

    indices = rng.permutation(len(samples))
    n_val = int(round(cfg.val_fraction * len(samples))) if cfg.early_stop_patience > 0 else 0
    val = [samples[i] for i in indices[:n_val]]
    train = [samples[i] for i in indices[n_val:]]
    labels = {v.video_id: v.label for v in samples}

    log = []
    best_acc, best_state, patience = -1.0, None, cfg.early_stop_patience
    model.train()
    for epoch in range(cfg.epochs):
        tau = tau_at(tau_schedule, epoch)
        lr = cfg.lr * cfg.lr_factor ** sum(1 for m in cfg.milestones if epoch >= m)
        _set_lr(optimizer, lr)
        perm = rng.permutation(len(train))
        epoch_traces = []
        sums = {"L_c": 0.0, "L_b_soft": 0.0, "L_g_soft": 0.0, "L": 0.0}
        batches = 0
        for start in range(0, len(train), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits_list, softs, traces = [], [], []
            for i in idx:
                v = train[i]
                logits, trace = rollout(
                    v,
                    model,
                    cost_table,
                    mode="train",
                    mixup=settings.mixup,
                    tau=tau,
                    generator=gen,
                    rng=rng,
                    include_station_cost=settings.include_station_cost,
                    soft_feature_scale=settings.soft_feature_scale,
                )
                logits_list.append(logits)
                softs.append(torch.stack(trace.soft_actions))
                traces.append(trace)
            y = torch.tensor([labels[t.video_id] for t in traces], dtype=torch.long)
            l_c = classification_loss(torch.stack(logits_list), y)
            l_b = balance_loss_soft(softs, norm=settings.balance_norm)
            l_g = gflops_loss_soft(softs, model.ladder, cost_table)
            loss = total_loss(l_c, l_b, l_g, settings.weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["L_c"] += float(l_c.detach())
            sums["L_b_soft"] += float(l_b.detach())
            sums["L_g_soft"] += float(l_g.detach())
            sums["L"] += float(loss.detach())
            batches += 1
            epoch_traces.extend(traces)

        entry = {
            "stage": 3,
            "epoch": epoch,
            "lr": lr,
            "tau": tau,
            "L_c": sums["L_c"] / batches,
            "L_b_soft": sums["L_b_soft"] / batches,
            "L_g_soft": sums["L_g_soft"] / batches,
            "L_b_hard": balance_loss_hard(epoch_traces, model.ladder, norm=settings.balance_norm),
            "L_g_hard": gflops_loss_hard(epoch_traces),
            "L": sums["L"] / batches,
            "usage_hard": [float(u) for u in hard_usage(epoch_traces, model.ladder)],
        }
        if val:
            acc = _eval_accuracy(model, val, cost_table, settings)
            entry["val_acc"] = acc
            if acc > best_acc:
                best_acc, patience = acc, cfg.early_stop_patience
                best_state = copy.deepcopy(model.policy.state_dict())
            else:
                patience -= 1
        log.append(entry)
        if val and patience <= 0:
            break
    if best_state is not None:
        model.policy.load_state_dict(best_state)
    return log


def write_log(log: Sequence[dict], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def run_stage(
    cfg: StageConfig,
    settings: TrainSettings,
    manifest: Manifest,
    checkpoint_in: Path | str | None,
    checkpoint_out: Path | str,
    log_path: Path | str | None = None,
    *,
    model_factory: Callable[[], AccSamplerModel] | None = None,
    cost_table: CostTable | None = None,
    tau_schedule: TauSchedule | None = None,
) -> tuple[AccSamplerModel, list[dict]]:
    """Run one stage end to end: load or build the model, train the stage's
    parameter group, write the checkpoint and the training log."""
    if cfg.stage == 1:
        if model_factory is None:
            raise ValueError("stage 1 needs a model_factory")
        model = model_factory()
    else:
        if checkpoint_in is None or not Path(checkpoint_in).exists():
            raise MissingCheckpointError(
                f"stage {cfg.stage} needs the stage-{cfg.stage - 1} checkpoint: {checkpoint_in}"
            )
        model, meta = load_checkpoint(checkpoint_in)
        if meta.get("stage", 0) < cfg.stage - 1:
            raise MissingCheckpointError(
                f"checkpoint {checkpoint_in} is from stage {meta.get('stage')}, "
                f"stage {cfg.stage} needs stage {cfg.stage - 1}"
            )

    samples = manifest.to_samples()
    if cfg.stage == 1:
        log = train_stage1(model, samples, cfg, settings)
    elif cfg.stage == 2:
        log = train_stage2(model, samples, cfg, settings)
    else:
        if cost_table is None:
            cost_table = build_cost_table(model.backbone_spec, model.ladder, model.hidden_dim)
        if tau_schedule is None:
            tau_schedule = TauSchedule(total_epochs=cfg.epochs)
        log = train_stage3(model, samples, cfg, settings, cost_table, tau_schedule)

    save_checkpoint(model, checkpoint_out, stage=cfg.stage)
    if log_path is not None:
        write_log(log, log_path)
    return model, log
