from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from accsampler.compression import (
    ActionLadder,
    ConvOp,
    CostTable,
    MixupParams,
    backbone_plan,
    build_cost_table,
    clip_mixup,
    fuse_clip,
    gru_step_macs,
    plan_macs,
    resize_frame,
    sample_lambda,
)
from accsampler.model import Backbone, BackboneSpec

DESK_LADDER = ActionLadder((1, 3, 5, 7), (32, 24, 16, 12))


def rand_frame(size: int, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, size, size, generator=g)


class TestActionLadder:
    def test_default_pairs(self):
        ladder = ActionLadder()
        assert ladder.actions == (1, 3, 5, 7)
        assert ladder.resolutions == (224, 168, 112, 84)
        assert ladder.resolution_for(1) == 224
        assert ladder.resolution_for(7) == 84

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="equal length"):
            ActionLadder((1, 3), (224,))

    def test_first_action_must_be_one(self):
        with pytest.raises(ValueError, match="first action"):
            ActionLadder((2, 3), (224, 168))

    def test_ordering_enforced(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            ActionLadder((1, 5, 3), (224, 168, 112))
        with pytest.raises(ValueError, match="strictly decreasing"):
            ActionLadder((1, 3), (112, 224))


class TestSampleLambda:
    def test_eval_mode_returns_fixed_value(self):
        assert sample_lambda(MixupParams(), "eval") == 0.5
        assert sample_lambda(MixupParams(eval_lambda=0.25), "eval") == 0.25

    def test_train_mode_matches_beta_mean(self):
        # Beta(a, a) has mean 1/2; Monte Carlo check at 1e5 draws
        rng = np.random.default_rng(123)
        params = MixupParams(alpha=0.3)
        draws = np.array([sample_lambda(params, "train", rng) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) < 0.01
        assert draws.min() >= 0.0 and draws.max() <= 1.0

    def test_train_mode_needs_rng(self):
        with pytest.raises(ValueError, match="rng"):
            sample_lambda(MixupParams(), "train")

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            MixupParams(alpha=0.0)
        with pytest.raises(ValueError):
            MixupParams(eval_lambda=1.5)


class TestClipMixup:
    def test_lambda_one_is_identity(self):
        a, b = rand_frame(8, 1), rand_frame(8, 2)
        assert torch.equal(clip_mixup(a, b, 1.0), a)

    def test_constant_frames_blend_to_midpoint(self):
        a = torch.zeros(3, 8, 8)
        b = torch.ones(3, 8, 8)
        assert torch.allclose(clip_mixup(a, b, 0.5), torch.full((3, 8, 8), 0.5))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes differ"):
            clip_mixup(rand_frame(8), rand_frame(16), 0.5)

    @given(
        lam=st.floats(min_value=0.0, max_value=1.0),
        seed=st.integers(min_value=0, max_value=1000),
    )
    @settings(max_examples=40, deadline=None)
    def test_convexity(self, lam, seed):
        a, b = rand_frame(6, seed), rand_frame(6, seed + 1)
        out = clip_mixup(a, b, lam)
        lo, hi = torch.minimum(a, b), torch.maximum(a, b)
        assert bool((out >= lo - 1e-6).all()) and bool((out <= hi + 1e-6).all())

    @given(
        lam=st.floats(min_value=0.0, max_value=1.0),
        seed=st.integers(min_value=0, max_value=1000),
    )
    @settings(max_examples=40, deadline=None)
    def test_symmetry(self, lam, seed):
        a, b = rand_frame(6, seed), rand_frame(6, seed + 1)
        assert torch.allclose(clip_mixup(a, b, lam), clip_mixup(b, a, 1.0 - lam), atol=1e-6)


class TestFuseClip:
    def test_single_frame_resize_only(self):
        frame = rand_frame(32)
        out = fuse_clip([frame], 0.3, 16)
        assert torch.equal(out, resize_frame(frame, 16))

    def test_constant_clip_idempotent(self):
        frame = torch.full((3, 16, 16), 0.7)
        out = fuse_clip([frame.clone() for _ in range(7)], 0.42, 16)
        assert torch.allclose(out, frame)

    def test_matches_resize_then_mix_composition(self):
        # compositional oracle: resize first and last, then blend
        frames = [rand_frame(32, seed=i) for i in range(5)]
        out = fuse_clip(frames, 0.5, 12)
        expected = clip_mixup(resize_frame(frames[0], 12), resize_frame(frames[-1], 12), 0.5)
        assert torch.allclose(out, expected)

    def test_output_square_at_target(self):
        for n in (1, 2, 7):
            out = fuse_clip([rand_frame(32, seed=i) for i in range(n)], 0.5, 24)
            assert out.shape == (3, 24, 24)

    def test_empty_clip_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            fuse_clip([], 0.5, 16)


class TestCostTable:
    def test_strictly_increasing_enforced(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            CostTable({32: 1.0, 16: 2.0})
        with pytest.raises(ValueError, match="positive"):
            CostTable({32: 0.0})

    def test_reference_config_near_published_per_frame_cost(self):
        # MobileNet-v2-class (width 0.75) + 512-dim GRU at 224 px
        table = build_cost_table(BackboneSpec("mobilenet_v2", 0.75), ActionLadder(), 512)
        assert table.cost(224) == pytest.approx(0.411, rel=0.05)

    def test_conv_cost_scales_quadratically(self):
        plan = backbone_plan("mobilenet_v2", 0.75)
        ratio = plan_macs(plan, 168) / plan_macs(plan, 224)
        assert ratio == pytest.approx((168 / 224) ** 2, rel=0.10)

    def test_desk_table_matches_runtime_mac_oracle(self, desk_cost_table):
        # independent oracle: instrument the actual torch backbone with hooks
        # and count MACs from observed activation shapes
        backbone = Backbone(backbone_plan("tiny_conv"))
        for res in DESK_LADDER.resolutions:
            macs = _runtime_macs(backbone, res) + gru_step_macs(64, 64)
            expected = 2.0 * macs / 1e9
            assert desk_cost_table.cost(res) == pytest.approx(expected, rel=0.01)

    def test_monotone_and_positive(self, desk_cost_table):
        costs = [desk_cost_table.cost(r) for r in sorted(DESK_LADDER.resolutions)]
        assert all(c > 0 for c in costs)
        assert all(a < b for a, b in zip(costs, costs[1:]))

    def test_unknown_architecture_rejected(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            build_cost_table(BackboneSpec("resnet50"), ActionLadder(), 512)

    def test_unsupported_layer_named_in_error(self):
        class Mystery:
            pass

        with pytest.raises(ValueError, match="Mystery"):
            plan_macs([ConvOp("a", 3, 8, 3, 2, 1), Mystery()], 32)

    def test_file_round_trip(self, desk_cost_table, tmp_path):
        path = tmp_path / "costs.txt"
        desk_cost_table.write(path)
        loaded = CostTable.read(path)
        for r in DESK_LADDER.resolutions:
            assert loaded.cost(r) == pytest.approx(desk_cost_table.cost(r), rel=1e-9)


def _runtime_macs(backbone: Backbone, resolution: int) -> int:
    """Count conv/linear MACs from shapes observed during a real forward pass."""
    counted = []

    def hook(module, inputs, output):
        if isinstance(module, torch.nn.Conv2d):
            out_c, out_h, out_w = output.shape[1:]
            k_ops = module.kernel_size[0] * module.kernel_size[1]
            in_c = module.in_channels // module.groups
            counted.append(out_h * out_w * out_c * k_ops * in_c)
        elif isinstance(module, torch.nn.Linear):
            counted.append(module.in_features * module.out_features)

    handles = [m.register_forward_hook(hook) for m in backbone.modules()]
    with torch.no_grad():
        backbone(torch.zeros(1, 3, resolution, resolution))
    for h in handles:
        h.remove()
    return sum(counted)
