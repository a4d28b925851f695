from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accsampler.datamodel import (
    FrameRecord,
    Manifest,
    ManifestEntry,
    ManifestError,
    SyntheticSpec,
    build_clips,
    generate_synthetic,
    load_ground_truth,
    load_manifest,
    write_manifest,
)


def labeled_frames(labels):
    return [
        FrameRecord(np.zeros((4, 4, 3), dtype=np.float32), frame_label=l) for l in labels
    ]


class TestBuildClips:
    def test_all_negative_frames_give_negative_clip(self):
        clips = build_clips(labeled_frames([0] * 64))
        assert len(clips) == 1
        assert clips[0].label == 0
        assert clips[0].num_frames == 64

    def test_single_positive_frame_marks_clip_positive(self):
        labels = [0] * 64
        labels[17] = 1
        clips = build_clips(labeled_frames(labels))
        assert len(clips) == 1
        assert clips[0].label == 1

    def test_trailing_remainder_dropped(self):
        clips = build_clips(labeled_frames([0] * 130), clip_len=64, stride=64)
        assert len(clips) == 2
        assert [f.frame_label for c in clips for f in c.frames] == [0] * 128

    def test_short_stream_warns_and_returns_empty(self):
        with pytest.warns(UserWarning, match="shorter than clip_len"):
            assert build_clips(labeled_frames([0] * 10), clip_len=64) == []

    def test_missing_frame_labels_rejected(self):
        frames = labeled_frames([0] * 64)
        frames[3].frame_label = None
        with pytest.raises(ValueError, match="no label"):
            build_clips(frames)

    @given(
        length=st.integers(min_value=1, max_value=300),
        clip_len=st.integers(min_value=1, max_value=64),
        stride=st.integers(min_value=1, max_value=64),
    )
    @settings(max_examples=40, deadline=None)
    def test_clip_count_formula(self, length, clip_len, stride):
        frames = labeled_frames([0] * length)
        if length < clip_len:
            with pytest.warns(UserWarning):
                clips = build_clips(frames, clip_len=clip_len, stride=stride)
            assert clips == []
        else:
            clips = build_clips(frames, clip_len=clip_len, stride=stride)
            assert len(clips) == (length - clip_len) // stride + 1

    def test_label_monotone_in_fire_frames(self):
        # adding a positive frame can only keep or raise the clip label
        base = [0] * 64
        for pos in (0, 31, 63):
            flipped = list(base)
            flipped[pos] = 1
            assert build_clips(labeled_frames(flipped))[0].label >= build_clips(
                labeled_frames(base)
            )[0].label


class TestManifestIO:
    def _sample_manifest(self, tmp_path: Path) -> Manifest:
        from PIL import Image

        img_dir = tmp_path / "imgs"
        img_dir.mkdir()
        paths = []
        for i in range(3):
            p = img_dir / f"f{i}.png"
            Image.fromarray(np.full((4, 4, 3), i * 10, dtype=np.uint8)).save(p)
            paths.append(f"imgs/f{i}.png")
        entry = ManifestEntry(
            video_id="vid0", frame_paths=paths, frame_labels=[0, 1, 0], label=1
        )
        return Manifest(entries=[entry], split="train", root=tmp_path)

    def test_round_trip_identity(self, tmp_path):
        manifest = self._sample_manifest(tmp_path)
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        loaded = load_manifest(path, split="train")
        assert loaded == manifest

    def test_missing_frame_file_names_the_path(self, tmp_path):
        manifest = self._sample_manifest(tmp_path)
        manifest.entries[0].frame_paths[1] = "imgs/absent.png"
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        with pytest.raises(ManifestError, match="absent.png"):
            load_manifest(path)

    def test_malformed_record_reports_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        good = json.dumps(
            {"video_id": "a", "frames": [], "frame_labels": None, "label": 0}
        )
        path.write_text(good + "\n" + "{not json}\n")
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(path)

    def test_missing_field_reports_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"video_id": "a", "frames": []}) + "\n")
        with pytest.raises(ManifestError, match="line 1"):
            load_manifest(path)

    def test_empty_manifest_loads_empty(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        assert len(load_manifest(path)) == 0

    def test_optional_frame_labels(self, tmp_path):
        manifest = self._sample_manifest(tmp_path)
        manifest.entries[0].frame_labels = None
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.entries[0].frame_labels is None
        sample = loaded.to_samples()[0]
        assert all(f.frame_label is None for f in sample.frames)


class TestSyntheticGeneration:
    SPEC = SyntheticSpec(
        num_videos=10, frames_per_video=8, frame_size=32, event_length=4, seed=7
    )

    def test_seeded_runs_are_byte_identical(self, tmp_path):
        dirs = (tmp_path / "a", tmp_path / "b")
        for d in dirs:
            generate_synthetic(self.SPEC, d)
        files_a = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes()

    def test_event_spans_have_configured_length(self, tmp_path):
        spec = SyntheticSpec(
            num_videos=12, frames_per_video=64, frame_size=32, event_length=16, seed=3
        )
        _, _, truth = generate_synthetic(spec, tmp_path / "d")
        assert truth, "expected at least one positive video"
        for start, end in truth.values():
            assert end - start == 16

    def test_event_region_brighter_than_background(self, tmp_path):
        # independent oracle: recompute mean intensities from the written files
        train, test, truth = generate_synthetic(self.SPEC, tmp_path / "d")
        samples = {v.video_id: v for v in train.to_samples() + test.to_samples()}
        assert truth
        for vid, (start, end) in truth.items():
            video = samples[vid]
            inside = np.mean([video.frames[t].pixels().mean() for t in range(start, end)])
            outside_frames = [t for t in range(video.num_frames) if not start <= t < end]
            outside = np.mean([video.frames[t].pixels().mean() for t in outside_frames])
            assert inside > outside

    def test_frame_labels_match_spans(self, tmp_path):
        train, test, truth = generate_synthetic(self.SPEC, tmp_path / "d")
        for m in (train, test):
            for e in m.entries:
                span = truth.get(e.video_id)
                for t, lab in enumerate(e.frame_labels):
                    expected = int(span is not None and span[0] <= t < span[1])
                    assert lab == expected
                assert e.label == int(any(e.frame_labels))

    def test_ground_truth_file_round_trip(self, tmp_path):
        _, _, truth = generate_synthetic(self.SPEC, tmp_path / "d")
        assert load_ground_truth(tmp_path / "d" / "ground_truth.json") == truth

    def test_event_longer_than_video_rejected(self):
        with pytest.raises(ValueError, match="event_length"):
            SyntheticSpec(frames_per_video=8, event_length=9)

    def test_unsupported_frame_size_rejected(self):
        with pytest.raises(ValueError, match="frame_size"):
            SyntheticSpec(frame_size=48)
