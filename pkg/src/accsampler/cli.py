"""Operator entry points: data preparation, staged training, rollout audit,
distillation, evaluation, and report generation.

Exit codes: 0 success, 1 usage/config error, 2 missing prerequisite,
3 runtime failure. ``ACCSAMPLER_CONFIG`` sets the default config path.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import distillation as dist
from .compression import build_cost_table
from .config import RunConfig
from .datamodel import (
    FrameRecord,
    Manifest,
    ManifestEntry,
    build_clips,
    generate_synthetic,
    load_manifest,
    write_manifest,
)
from .evaluation import EvalReport, emit_report, evaluate, train_downstream
from .model import AccSamplerModel, load_checkpoint
from .sampler import rollout, write_traces
from .training import MissingCheckpointError, run_stage, TrainSettings

CONFIG_ENV = "ACCSAMPLER_CONFIG"


def _settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(
        mixup=cfg.mixup(),
        weights=cfg.loss_weights(),
        balance_norm=cfg.balance_norm,
        soft_feature_scale=cfg.soft_feature_scale,
        include_station_cost=cfg.include_station_cost,
        seed=cfg.seed,
    )


def _model_factory(cfg: RunConfig):
    def factory() -> AccSamplerModel:
        torch.manual_seed(cfg.seed)
        return AccSamplerModel(
            backbone_spec=cfg.backbone_spec(),
            ladder=cfg.ladder(),
            hidden_dim=cfg.hidden_dim,
            num_classes=cfg.num_classes,
            num_stations=cfg.num_stations,
            policy_groups=cfg.policy_groups,
        )

    return factory


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingCheckpointError(f"missing {what}: {path}")
    return path


def _manifest(cfg: RunConfig, split: str) -> Manifest:
    path = _require(Path(cfg.data_dir) / f"{split}_manifest.jsonl", f"{split} manifest")
    return load_manifest(path, split=split)


def _echo_config(cfg: RunConfig) -> None:
    cfg.to_json(Path(cfg.out_dir) / "config.json")


def _stage_ckpt(cfg: RunConfig, stage: int) -> Path:
    return Path(cfg.out_dir) / f"stage{stage}.ckpt"


# --- commands -----------------------------------------------------------------


def cmd_prepare(cfg: RunConfig, args) -> int:
    """Build fixed-length clips from an ordered, labeled frame listing."""
    csv_path = _require(Path(args.frames_csv), "frame listing")
    frames = []
    with open(csv_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                path_str, label = line.rsplit(",", 1)
                frames.append(
                    FrameRecord(
                        source=(csv_path.parent / path_str).resolve(), frame_label=int(label)
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{csv_path}:{line_no}: expected 'path,label' ({exc})") from exc
    clips = build_clips(frames, clip_len=args.clip_len, stride=args.stride)
    n_test = int(round(len(clips) * args.test_fraction))
    splits = {"train": clips[: len(clips) - n_test], "test": clips[len(clips) - n_test :]}
    data_dir = Path(cfg.data_dir)
    for split, split_clips in splits.items():
        entries = [
            ManifestEntry(
                video_id=c.video_id,
                frame_paths=[str(f.source) for f in c.frames],
                frame_labels=[int(f.frame_label) for f in c.frames],
                label=c.label,
            )
            for c in split_clips
        ]
        write_manifest(Manifest(entries, split=split), data_dir / f"{split}_manifest.jsonl")
        print(f"prepare: {split}: {len(split_clips)} clips")
    _echo_config(cfg)
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    train, test, truth = generate_synthetic(cfg.synthetic, cfg.data_dir)
    print(
        f"synth: {len(train)} train / {len(test)} test videos "
        f"({len(truth)} positive) in {cfg.data_dir}"
    )
    _echo_config(cfg)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    stage = args.stage
    manifest = _manifest(cfg, "train")
    stage_cfg = cfg.stage(stage)
    checkpoint_in = _stage_ckpt(cfg, stage - 1) if stage > 1 else None
    ladder = cfg.ladder()
    cost_table = build_cost_table(cfg.backbone_spec(), ladder, cfg.hidden_dim)
    _, log = run_stage(
        stage_cfg,
        _settings(cfg),
        manifest,
        checkpoint_in,
        _stage_ckpt(cfg, stage),
        Path(cfg.out_dir) / f"stage{stage}_log.jsonl",
        model_factory=_model_factory(cfg),
        cost_table=cost_table,
        tau_schedule=cfg.tau_schedule(),
    )
    cost_table.write(Path(cfg.out_dir) / "cost_table.txt")
    last = {k: v for k, v in log[-1].items() if not isinstance(v, list)}
    print(f"train stage {stage}: {len(log)} epochs, final {json.dumps(last, sort_keys=True)}")
    _echo_config(cfg)
    return 0


def _load_model(cfg: RunConfig, checkpoint: str | None, default_stage: int = 3):
    path = Path(checkpoint) if checkpoint else _stage_ckpt(cfg, default_stage)
    _require(path, "checkpoint")
    return load_checkpoint(path)


def cmd_rollout(cfg: RunConfig, args) -> int:
    model, _ = _load_model(cfg, args.checkpoint)
    cost_table = build_cost_table(model.backbone_spec, model.ladder, model.hidden_dim)
    samples = _manifest(cfg, args.split).to_samples()
    gen = torch.Generator().manual_seed(cfg.seed * 7919)
    rng = np.random.default_rng(cfg.seed * 7919)
    traces = []
    with torch.no_grad():
        for v in samples:
            _, trace = rollout(
                v,
                model,
                cost_table,
                mode=args.mode,
                mixup=cfg.mixup(),
                tau=cfg.distill_tau,
                generator=gen,
                rng=rng,
                include_station_cost=cfg.include_station_cost,
            )
            traces.append(trace)
    out = Path(cfg.out_dir) / f"traces_{args.split}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_traces(traces, out)
    print(f"rollout: wrote {len(traces)} traces to {out}")
    _echo_config(cfg)
    return 0


def _distilled_dir(cfg: RunConfig, selector: str, k: int) -> Path:
    return Path(cfg.out_dir) / "distilled" / f"{selector}_k{k}"


def _accsampler_selections(cfg: RunConfig, model, samples, k, split_ordinal):
    cost_table = build_cost_table(model.backbone_spec, model.ladder, model.hidden_dim)
    mode = "train" if cfg.distill_mode == "sample" else "eval"
    gen = torch.Generator().manual_seed(cfg.seed * 7919 + split_ordinal)
    rng = np.random.default_rng(cfg.seed * 7919 + split_ordinal)
    score_fn = dist.frame_scores if cfg.score_decay == "geometric" else dist.arithmetic_frame_scores
    selections = []
    with torch.no_grad():
        for v in samples:
            _, trace = rollout(
                v,
                model,
                cost_table,
                mode=mode,
                mixup=cfg.mixup(),
                tau=cfg.distill_tau,
                generator=gen,
                rng=rng,
                include_station_cost=cfg.include_station_cost,
            )
            scores = score_fn(trace, cfg.score_variant, model.ladder)
            selections.append(dist.select_topk(scores, k))
    return selections


def cmd_distill(cfg: RunConfig, args) -> int:
    k = args.k
    model = None
    if args.selector == "accsampler":
        model, _ = _load_model(cfg, args.checkpoint)
    out_dir = _distilled_dir(cfg, args.selector, k)
    for ordinal, split in enumerate(("train", "test")):
        manifest = _manifest(cfg, split)
        if args.selector == "accsampler":
            selections = _accsampler_selections(cfg, model, manifest.to_samples(), k, ordinal)
        elif args.selector == "uniform":
            selections = [
                dist.uniform_select(e.video_id, len(e.frame_paths), k) for e in manifest.entries
            ]
        else:
            selections = [
                dist.random_select(e.video_id, len(e.frame_paths), k, seed=cfg.seed * 31 + i)
                for i, e in enumerate(manifest.entries)
            ]
        distilled = dist.write_distilled(manifest, selections)
        # keep frame references resolvable from the new manifest location
        data_root = Path(cfg.data_dir).resolve()
        for entry in distilled.entries:
            entry.frame_paths = [
                p if Path(p).is_absolute() else str(data_root / p) for p in entry.frame_paths
            ]
        write_manifest(distilled, out_dir / f"{split}_manifest.jsonl")
        dist.write_selections(selections, out_dir / f"selections_{split}.jsonl")
    print(f"distill: {args.selector} K={k} -> {out_dir}")
    _echo_config(cfg)
    return 0


def _strip_traces(frag: dict) -> dict:
    return {key: v for key, v in frag.items() if key != "traces"}


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _ = _load_model(cfg, args.checkpoint)
    cost_table = build_cost_table(model.backbone_spec, model.ladder, model.hidden_dim)
    test = _manifest(cfg, "test").to_samples()
    train = _manifest(cfg, "train").to_samples()
    policy_test = evaluate(
        model, test, cost_table, mixup=cfg.mixup(), include_station_cost=cfg.include_station_cost
    )
    policy_train = evaluate(
        model, train, cost_table, mixup=cfg.mixup(), include_station_cost=cfg.include_station_cost
    )
    base_test = evaluate(model, test, cost_table, mixup=cfg.mixup(), force_action=0)
    base_train = evaluate(model, train, cost_table, mixup=cfg.mixup(), force_action=0)
    payload = {
        "policy": {
            "test": _strip_traces(policy_test),
            "train": _strip_traces(policy_train),
        },
        "baseline": {
            "test": _strip_traces(base_test),
            "train": _strip_traces(base_train),
        },
    }

    if args.downstream:
        downstream: dict[str, dict[str, float]] = {}
        root = Path(cfg.out_dir) / "distilled"
        _require(root, "distilled datasets (run distill first)")
        for sub in sorted(root.iterdir()):
            selector, _, k_str = sub.name.rpartition("_k")
            if not selector or not k_str.isdigit():
                continue
            train_m = load_manifest(sub / "train_manifest.jsonl", split="train")
            test_m = load_manifest(sub / "test_manifest.jsonl", split="test")
            accs = [
                train_downstream(
                    train_m, test_m, cfg.downstream, seed=cfg.seed + s, num_classes=cfg.num_classes
                )
                for s in range(cfg.downstream_seeds)
            ]
            downstream.setdefault(selector, {})[k_str] = float(np.mean(accs))
        payload["downstream"] = downstream

    out = Path(cfg.out_dir) / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(
        f"eval: policy test acc {payload['policy']['test']['accuracy']:.2f}% "
        f"@ {payload['policy']['test']['gflops_per_video']:.4f} GFLOPs/v; "
        f"dense baseline {payload['baseline']['test']['accuracy']:.2f}% "
        f"@ {payload['baseline']['test']['gflops_per_video']:.4f} GFLOPs/v"
    )
    _echo_config(cfg)
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    eval_path = _require(Path(cfg.out_dir) / "eval.json", "eval results (run eval first)")
    with open(eval_path) as fh:
        payload = json.load(fh)
    policy = payload["policy"]
    baseline = payload["baseline"]
    report = EvalReport(
        config=cfg.to_dict(),
        test_accuracy=policy["test"]["accuracy"],
        train_accuracy=policy["train"]["accuracy"],
        gflops_per_video=policy["test"]["gflops_per_video"],
        gflops_per_frame=policy["test"]["gflops_per_frame"],
        action_usage={int(a): u for a, u in policy["test"]["usage"].items()},
        baseline={
            "test_accuracy": baseline["test"]["accuracy"],
            "train_accuracy": baseline["train"]["accuracy"],
            "gflops_per_video": baseline["test"]["gflops_per_video"],
            "gflops_per_frame": baseline["test"]["gflops_per_frame"],
        },
        downstream={
            sel: {int(k): acc for k, acc in by_k.items()}
            for sel, by_k in payload.get("downstream", {}).items()
        },
    )
    written = emit_report(report, Path(cfg.out_dir) / "report")
    print("report: wrote " + ", ".join(str(p) for p in written))
    _echo_config(cfg)
    return 0


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="accsampler", description=__doc__)
    parser.add_argument("--config", default=os.environ.get(CONFIG_ENV), help="config JSON path")
    parser.add_argument(
        "--preset", choices=("paper", "desk"), default="desk", help="base config preset"
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="config override (dotted path); may repeat",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build clips from an ordered labeled frame listing")
    p.add_argument("--frames-csv", required=True, help="file of 'image_path,label' lines")
    p.add_argument("--clip-len", type=int, default=64)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate the synthetic event-video dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="write rollout traces for a split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--mode", choices=("eval", "train"), default="eval")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("distill", help="select frames and write distilled manifests")
    p.add_argument("--selector", choices=("accsampler", "uniform", "random"), required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="accuracy and compute metrics (plus downstream)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--downstream", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="emit tables and plots from eval results")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1

    try:
        cfg = RunConfig() if args.preset == "paper" else RunConfig.desk()
        if args.config:
            cfg = RunConfig.from_json(args.config)
        if args.overrides:
            cfg = cfg.with_overrides(args.overrides)
    except FileNotFoundError as exc:
        print(f"accsampler: config error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, TypeError) as exc:
        print(f"accsampler: config error: {exc}", file=sys.stderr)
        return 1

    try:
        return args.func(cfg, args)
    except FileNotFoundError as exc:
        print(f"accsampler: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary: report and set exit code
        print(f"accsampler: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
