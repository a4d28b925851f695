"""Metrics, the downstream distilled-dataset evaluator, and report emission.

Accuracy and compute (GFLOPs per video / per frame) come from deterministic
eval-mode rollouts. Distilled datasets are judged by training a small
temporal-shift classifier on the selected frames, identically configured for
every selector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn as nn

from .compression import CostTable, MixupParams
from .datamodel import Manifest, VideoSample
from .losses import classification_loss
from .model import AccSamplerModel
from .sampler import EpisodeTrace, rollout


@dataclass
class EvalReport:
    """Everything the report emitter renders: headline metrics for the policy
    model and the dense baseline, plus downstream accuracies by selector."""

    config: dict
    test_accuracy: float
    train_accuracy: float
    gflops_per_video: float
    gflops_per_frame: float
    action_usage: dict[int, float]
    baseline: dict | None = None
    downstream: dict[str, dict[int, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, acc in (("test", self.test_accuracy), ("train", self.train_accuracy)):
            if not 0.0 <= acc <= 100.0:
                raise ValueError(f"{name} accuracy {acc} outside [0, 100]")

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "test_accuracy": self.test_accuracy,
            "train_accuracy": self.train_accuracy,
            "gflops_per_video": self.gflops_per_video,
            "gflops_per_frame": self.gflops_per_frame,
            "action_usage": {str(k): v for k, v in self.action_usage.items()},
            "baseline": self.baseline,
            "downstream": {
                sel: {str(k): acc for k, acc in by_k.items()}
                for sel, by_k in self.downstream.items()
            },
        }


def evaluate(
    model: AccSamplerModel,
    samples: Sequence[VideoSample],
    cost_table: CostTable,
    *,
    mixup: MixupParams = MixupParams(),
    force_action: int | None = None,
    include_station_cost: bool = True,
) -> dict:
    """Accuracy and compute over deterministic rollouts.

    ``force_action`` evaluates a fixed-action baseline (ladder ordinal;
    0 = dense full-resolution) without stations or policy calls.
    """
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    override = None if force_action is None else (lambda _i: force_action)
    correct = 0
    totals, per_frame = [], []
    usage = {a: 0 for a in model.ladder.actions}
    steps_seen = 0
    traces: list[EpisodeTrace] = []
    with torch.no_grad():
        for v in samples:
            logits, trace = rollout(
                v,
                model,
                cost_table,
                mode="eval",
                mixup=mixup,
                include_station_cost=include_station_cost,
                action_override=override,
            )
            correct += int(int(torch.argmax(logits)) == v.label)
            totals.append(trace.total_gflops)
            per_frame.append(trace.total_gflops / trace.num_frames)
            for s in trace.steps:
                usage[s.action] += 1
                steps_seen += 1
            traces.append(trace)
    return {
        "accuracy": 100.0 * correct / len(samples),
        "gflops_per_video": float(np.mean(totals)),
        "gflops_per_frame": float(np.mean(per_frame)),
        "usage": {a: c / steps_seen for a, c in usage.items()},
        "num_videos": len(samples),
        "traces": traces,
    }


# --- downstream temporal-shift classifier ------------------------------------


def temporal_shift(x: torch.Tensor, fold_div: int = 8) -> torch.Tensor:
    """Shift 1/fold_div of channels one step forward in time and another
    1/fold_div backward; boundaries are zero-filled.

    Input is (B, T, C, H, W). Channels with C < fold_div pass through
    unshifted.
    """
    if x.ndim != 5:
        raise ValueError(f"expected (B, T, C, H, W), got shape {tuple(x.shape)}")
    fold = x.shape[2] // fold_div
    if fold == 0:
        return x
    out = torch.zeros_like(x)
    out[:, :-1, :fold] = x[:, 1:, :fold]
    out[:, 1:, fold : 2 * fold] = x[:, :-1, fold : 2 * fold]
    out[:, :, 2 * fold :] = x[:, :, 2 * fold :]
    return out


class TsmLite(nn.Module):
    """Small temporal-shift video classifier for desk-scale downstream
    evaluation: four strided conv blocks, each preceded by a channel shift."""

    def __init__(self, num_classes: int = 2, fold_div: int = 8):
        super().__init__()
        self.fold_div = fold_div
        channels = (3, 16, 32, 48, 64)
        self.blocks = nn.ModuleList()
        for cin, cout in zip(channels, channels[1:]):
            self.blocks.append(
                nn.Sequential(
                    nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1, bias=False),
                    nn.GroupNorm(4, cout),
                    nn.ReLU(inplace=True),
                )
            )
        self.head = nn.Linear(channels[-1], num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t = x.shape[0], x.shape[1]
        for block in self.blocks:
            x = temporal_shift(x, self.fold_div)
            flat = x.reshape(b * t, *x.shape[2:])
            flat = block(flat)
            x = flat.reshape(b, t, *flat.shape[1:])
        pooled = x.mean(dim=(3, 4)).mean(dim=1)
        return self.head(pooled)


@dataclass(frozen=True)
class DownstreamConfig:
    epochs: int = 10
    lr: float = 0.001
    weight_decay: float = 3e-6
    momentum: float = 0.9
    batch_size: int = 16
    fold_div: int = 8


def _fixed_k_tensor(samples: Sequence[VideoSample]) -> tuple[torch.Tensor, torch.Tensor]:
    ks = {v.num_frames for v in samples}
    if len(ks) != 1:
        raise ValueError(f"inconsistent frame counts across videos: {sorted(ks)}")
    x = torch.stack([v.frames_tensor() for v in samples])
    y = torch.tensor([v.label for v in samples], dtype=torch.long)
    return x, y


def train_downstream(
    train_manifest: Manifest,
    test_manifest: Manifest,
    cfg: DownstreamConfig = DownstreamConfig(),
    seed: int = 0,
    num_classes: int = 2,
) -> float:
    """Train the temporal-shift classifier on a distilled dataset and return
    its test accuracy in percent."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    x_train, y_train = _fixed_k_tensor(train_manifest.to_samples())
    x_test, y_test = _fixed_k_tensor(test_manifest.to_samples())
    model = TsmLite(num_classes=num_classes, fold_div=cfg.fold_div)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    n = x_train.shape[0]
    model.train()
    for _epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = classification_loss(model(x_train[idx]), y_train[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    model.eval()
    with torch.no_grad():
        pred = model(x_test).argmax(dim=1)
    return float(100.0 * (pred == y_test).float().mean())


# --- report emission ----------------------------------------------------------


def _metrics_line(name: str, frag: dict) -> str:
    return (
        f"{name:<16} {frag['test_accuracy']:>9.2f} {frag.get('train_accuracy', float('nan')):>10.2f} "
        f"{frag['gflops_per_video']:>10.4f} {frag['gflops_per_frame']:>10.5f}"
    )


def render_report_text(report: EvalReport) -> str:
    lines = [
        "model             test_acc  train_acc   GFLOPs/v   GFLOPs/f",
        _metrics_line(
            "policy",
            {
                "test_accuracy": report.test_accuracy,
                "train_accuracy": report.train_accuracy,
                "gflops_per_video": report.gflops_per_video,
                "gflops_per_frame": report.gflops_per_frame,
            },
        ),
    ]
    if report.baseline is not None:
        lines.append(_metrics_line("dense_baseline", report.baseline))
    lines.append("")
    lines.append("action usage: " + " ".join(f"k={a}:{u:.3f}" for a, u in sorted(report.action_usage.items())))
    if report.downstream:
        selectors = sorted(report.downstream)
        ks = sorted({k for by_k in report.downstream.values() for k in by_k})
        lines.append("")
        lines.append("downstream accuracy (%) by frames kept")
        lines.append("K      " + " ".join(f"{s:>12}" for s in selectors))
        for k in ks:
            row = [f"{k:<6}"]
            for s in selectors:
                acc = report.downstream[s].get(k)
                row.append(f"{acc:>12.2f}" if acc is not None else f"{'-':>12}")
            lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir: Path | str) -> list[Path]:
    """Write report.json, report.txt, and (when downstream results exist) an
    accuracy-vs-K plot; returns the written paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"report directory not writable: {out_dir} ({exc})") from exc

    written = []
    json_path = out_dir / "report.json"
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    written.append(json_path)

    txt_path = out_dir / "report.txt"
    txt_path.write_text(render_report_text(report))
    written.append(txt_path)

    if report.downstream:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for selector in sorted(report.downstream):
            by_k = report.downstream[selector]
            ks = sorted(by_k)
            ax.plot(ks, [by_k[k] for k in ks], marker="o", label=selector)
        ax.set_xlabel("frames kept (K)")
        ax.set_ylabel("downstream accuracy (%)")
        ax.legend()
        fig.tight_layout()
        plot_path = out_dir / "accuracy_vs_k.png"
        fig.savefig(plot_path)
        plt.close(fig)
        written.append(plot_path)
    return written
