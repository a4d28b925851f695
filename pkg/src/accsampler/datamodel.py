"""Dataset ingestion, clip construction, and the synthetic event-video generator.

Videos are ordered frame sequences with a clip-level label; manifests are
line-delimited JSON, one video per line, referencing lossless image files on
disk.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image


class ManifestError(ValueError):
    """Raised when a manifest file is malformed or references missing frames."""


def load_pixels(path: Path) -> np.ndarray:
    """Load an image file as float32 (H, W, 3) with values in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass
class FrameRecord:
    """A single video frame, either on disk or in memory.

    In-memory pixels are float32 (H, W, 3) in [0, 1]; files are normalized
    to the same range on load.
    """

    source: Path | np.ndarray
    frame_label: int | None = None

    def pixels(self) -> np.ndarray:
        if isinstance(self.source, np.ndarray):
            arr = self.source
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise ValueError(f"frame array must be (H, W, 3), got {arr.shape}")
            return arr.astype(np.float32, copy=False)
        return load_pixels(Path(self.source))

    @property
    def height(self) -> int:
        return self.pixels().shape[0]

    @property
    def width(self) -> int:
        return self.pixels().shape[1]

    @property
    def channels(self) -> int:
        return 3

    def tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Frame as a (3, H, W) tensor."""
        arr = np.ascontiguousarray(self.pixels().transpose(2, 0, 1))
        return torch.from_numpy(arr).to(dtype)


@dataclass
class VideoSample:
    """An ordered frame sequence with a clip-level class label."""

    video_id: str
    frames: list[FrameRecord]
    label: int
    _cache: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.frames) < 1:
            raise ValueError(f"video {self.video_id!r} has no frames")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def frames_tensor(self, dtype: torch.dtype = torch.float32, cache: bool = True) -> torch.Tensor:
        """All frames as a (N, 3, H, W) tensor, optionally cached on the sample."""
        if self._cache is not None and self._cache.dtype == dtype:
            return self._cache
        stacked = torch.stack([f.tensor(dtype) for f in self.frames])
        if cache:
            self._cache = stacked
        return stacked


@dataclass
class ManifestEntry:
    video_id: str
    frame_paths: list[str]
    frame_labels: list[int] | None
    label: int

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "frames": self.frame_paths,
            "frame_labels": self.frame_labels,
            "label": self.label,
        }


@dataclass
class Manifest:
    """One dataset split: a list of video entries plus where their frames live."""

    entries: list[ManifestEntry]
    split: str = "train"
    root: Path | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def to_samples(self) -> list[VideoSample]:
        samples = []
        for e in self.entries:
            labels = e.frame_labels or [None] * len(e.frame_paths)
            frames = [
                FrameRecord(source=self.resolve(p), frame_label=l)
                for p, l in zip(e.frame_paths, labels)
            ]
            samples.append(VideoSample(video_id=e.video_id, frames=frames, label=e.label))
        return samples


def build_clips(
    frames: Sequence[FrameRecord],
    clip_len: int = 64,
    stride: int = 64,
    video_prefix: str = "clip",
) -> list[VideoSample]:
    """Cut an ordered, frame-labeled stream into fixed-length clips.

    A clip is positive iff any member frame is positive. The trailing
    remainder shorter than ``clip_len`` is dropped, never padded.
    """
    if clip_len < 1 or stride < 1:
        raise ValueError("clip_len and stride must be >= 1")
    for i, f in enumerate(frames):
        if f.frame_label is None:
            raise ValueError(f"frame {i} has no label; build_clips needs per-frame labels")
    if len(frames) < clip_len:
        warnings.warn(
            f"stream of {len(frames)} frames is shorter than clip_len={clip_len}; no clips built",
            stacklevel=2,
        )
        return []
    clips = []
    for n, start in enumerate(range(0, len(frames) - clip_len + 1, stride)):
        members = list(frames[start : start + clip_len])
        label = int(any(f.frame_label == 1 for f in members))
        clips.append(VideoSample(video_id=f"{video_prefix}_{n:05d}", frames=members, label=label))
    return clips


def _parse_entry(record: dict, line_no: int) -> ManifestEntry:
    try:
        labels = record.get("frame_labels")
        return ManifestEntry(
            video_id=str(record["video_id"]),
            frame_paths=list(record["frames"]),
            frame_labels=None if labels is None else [int(x) for x in labels],
            label=int(record["label"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {line_no}: malformed manifest record ({exc})") from exc


def load_manifest(path: Path | str, split: str = "train", check_frames: bool = True) -> Manifest:
    """Load a line-delimited manifest; every referenced frame must exist."""
    path = Path(path)
    entries = []
    root = path.parent
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            entry = _parse_entry(record, line_no)
            entries.append(entry)
    manifest = Manifest(entries=entries, split=split, root=root)
    if check_frames:
        for e in entries:
            for rel in e.frame_paths:
                p = manifest.resolve(rel)
                if not p.exists():
                    raise ManifestError(f"manifest references missing frame file: {p}")
    return manifest


def write_manifest(manifest: Manifest, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the synthetic event-video dataset.

    Positive videos contain one contiguous run of ``event_length`` frames
    showing a bright Gaussian blob over uniform noise; negatives are pure
    noise. The seed fully determines the output.
    """

    num_videos: int = 250
    frames_per_video: int = 64
    frame_size: int = 32
    event_length: int = 16
    event_position: str = "random"  # random | middle | start
    noise_amplitude: float = 0.3
    positive_fraction: float = 0.5
    test_fraction: float = 0.2
    blob_peak: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.frame_size not in (32, 64):
            raise ValueError(f"frame_size must be 32 or 64, got {self.frame_size}")
        if not 1 <= self.event_length <= self.frames_per_video:
            raise ValueError(
                f"event_length must be in [1, {self.frames_per_video}], got {self.event_length}"
            )
        if self.event_position not in ("random", "middle", "start"):
            raise ValueError(f"unknown event_position {self.event_position!r}")
        if not 0.0 < self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must be in (0, 1]")


def _event_start(spec: SyntheticSpec, rng: np.random.Generator) -> int:
    latest = spec.frames_per_video - spec.event_length
    if spec.event_position == "start":
        return 0
    if spec.event_position == "middle":
        return latest // 2
    return int(rng.integers(0, latest + 1))


def _blob(size: int, cx: float, cy: float, sigma: float, peak: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return peak * np.exp(-d2 / (2.0 * sigma * sigma))


def _render_video(
    spec: SyntheticSpec, rng: np.random.Generator, positive: bool
) -> tuple[np.ndarray, tuple[int, int]]:
    """Render one video as uint8 (N, H, W, 3); returns pixels and the event span."""
    n, size = spec.frames_per_video, spec.frame_size
    frames = rng.uniform(0.0, spec.noise_amplitude, size=(n, size, size, 3)).astype(np.float32)
    span = (0, 0)
    if positive:
        start = _event_start(spec, rng)
        span = (start, start + spec.event_length)
        sigma = size / 8.0
        margin = 2.0 * sigma
        cx = float(rng.uniform(margin, size - margin))
        cy = float(rng.uniform(margin, size - margin))
        blob = _blob(size, cx, cy, sigma, spec.blob_peak)
        frames[span[0] : span[1]] += blob[None, :, :, None]
    np.clip(frames, 0.0, 1.0, out=frames)
    return np.round(frames * 255.0).astype(np.uint8), span


def generate_synthetic(
    spec: SyntheticSpec, out_dir: Path | str
) -> tuple[Manifest, Manifest, dict[str, tuple[int, int]]]:
    """Generate the synthetic dataset on disk.

    Writes per-video frame directories of PNG files, ``train_manifest.jsonl``
    and ``test_manifest.jsonl``, and ``ground_truth.json`` mapping positive
    video ids to their event span [start, end).
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    num_test = int(round(spec.num_videos * spec.test_fraction))
    num_train = spec.num_videos - num_test
    ground_truth: dict[str, tuple[int, int]] = {}
    manifests = {}
    counts = {"train": num_train, "test": num_test}
    for split in ("train", "test"):
        entries = []
        for i in range(counts[split]):
            video_id = f"{split}_{i:05d}"
            positive = rng.uniform() < spec.positive_fraction
            pixels, span = _render_video(spec, rng, positive)
            video_dir = out_dir / split / video_id
            video_dir.mkdir(parents=True, exist_ok=True)
            paths = []
            labels = []
            for t in range(spec.frames_per_video):
                rel = f"{split}/{video_id}/f{t:04d}.png"
                Image.fromarray(pixels[t]).save(out_dir / rel)
                paths.append(rel)
                labels.append(int(positive and span[0] <= t < span[1]))
            entries.append(
                ManifestEntry(
                    video_id=video_id,
                    frame_paths=paths,
                    frame_labels=labels,
                    label=int(positive),
                )
            )
            if positive:
                ground_truth[video_id] = span
        manifests[split] = Manifest(entries=entries, split=split, root=out_dir)
        write_manifest(manifests[split], out_dir / f"{split}_manifest.jsonl")
    with open(out_dir / "ground_truth.json", "w") as fh:
        json.dump({k: list(v) for k, v in sorted(ground_truth.items())}, fh, sort_keys=True, indent=2)
    return manifests["train"], manifests["test"], ground_truth


def load_ground_truth(path: Path | str) -> dict[str, tuple[int, int]]:
    with open(path) as fh:
        raw = json.load(fh)
    return {k: (int(v[0]), int(v[1])) for k, v in raw.items()}


def iter_labeled_frames(manifest: Manifest) -> Iterator[tuple[FrameRecord, int]]:
    """Yield (frame, label) for every frame with a label; used by frame-level training."""
    for sample in manifest.to_samples():
        for f in sample.frames:
            if f.frame_label is not None:
                yield f, int(f.frame_label)
