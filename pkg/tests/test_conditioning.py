"""Condition streams: latent codec, encoders, fusion, stem, dropout."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vidanim.conditioning import (
    ConditionBundle,
    ContextEncoder,
    PoseEncoder,
    ReferenceFusion,
    UnifiedInputStem,
    apply_condition_dropout,
    build_condition_stream,
    collate_bundles,
    latent_channels_for,
    latent_decode,
    latent_encode,
)

from conftest import make_bundle


class TestLatentCodec:
    def test_shape_contract(self):
        img = torch.rand(3, 64, 64)
        lat = latent_encode(img, 4)
        assert lat.shape == (48, 16, 16)
        assert latent_channels_for(4) == 48

    def test_round_trip_bitwise(self):
        img = torch.rand(3, 64, 64)
        assert torch.equal(latent_decode(latent_encode(img, 4), 4), img)

    def test_round_trip_batched(self):
        vid = torch.rand(5, 3, 32, 32)
        assert torch.equal(latent_decode(latent_encode(vid, 4), 4), vid)

    def test_constant_preserved(self):
        img = torch.full((3, 16, 16), 0.37)
        lat = latent_encode(img, 4)
        assert torch.all(lat == 0.37)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            latent_encode(torch.rand(3, 30, 32), 4)
        with pytest.raises(ValueError):
            latent_decode(torch.rand(10, 8, 8), 4)

    @given(
        r=st.sampled_from([2, 4]),
        h=st.integers(1, 4),
        w=st.integers(1, 4),
    )
    @settings(max_examples=20, deadline=None)
    def test_round_trip_property(self, r, h, w):
        img = torch.rand(3, h * r, w * r)
        assert torch.equal(latent_decode(latent_encode(img, r), r), img)


class TestPoseEncoder:
    def test_shape_contract(self):
        enc = PoseEncoder(out_channels=64, reduction=4)
        maps = torch.rand(16, 3, 64, 64)
        assert enc(maps).shape == (16, 64, 16, 16)

    def test_zero_input_bias_free(self):
        enc = PoseEncoder(out_channels=8, reduction=4, bias=False)
        out = enc(torch.zeros(3, 3, 32, 32))
        assert torch.all(out == 0)

    def test_frame_independence_permutation(self):
        enc = PoseEncoder(out_channels=8, reduction=4)
        maps = torch.rand(5, 3, 32, 32)
        out = enc(maps)
        perm = torch.tensor([3, 0, 4, 1, 2])
        torch.testing.assert_close(enc(maps[perm]), out[perm])

    def test_batched_leading_dims(self):
        enc = PoseEncoder(out_channels=8, reduction=4)
        maps = torch.rand(2, 5, 3, 32, 32)
        assert enc(maps).shape == (2, 5, 8, 8, 8)

    def test_non_power_of_two_reduction_rejected(self):
        with pytest.raises(ValueError):
            PoseEncoder(out_channels=8, reduction=3)


class TestReferenceFusion:
    def test_shape_contract(self):
        fusion = ReferenceFusion(48, 64, 64)
        out = fusion(torch.rand(48, 16, 16), torch.rand(64, 16, 16))
        assert out.shape == (64, 16, 16)
        assert fusion.proj.in_channels == 112

    def test_zero_projection_zero_output(self):
        fusion = ReferenceFusion(8, 8, 4)
        with torch.no_grad():
            fusion.proj.weight.zero_()
            fusion.proj.bias.zero_()
        out = fusion(torch.rand(8, 4, 4), torch.rand(8, 4, 4))
        assert torch.all(out == 0)

    def test_drop_ref_equals_manual_zeroing(self):
        fusion = ReferenceFusion(8, 8, 4)
        ref = torch.rand(8, 4, 4)
        pose = torch.rand(8, 4, 4)
        dropped = fusion(ref, pose, drop_ref=True)
        manual = fusion(torch.zeros_like(ref), pose, drop_ref=False)
        assert torch.equal(dropped, manual)

    def test_spatial_mismatch_rejected(self):
        fusion = ReferenceFusion(8, 8, 4)
        with pytest.raises(ValueError, match="spatial"):
            fusion(torch.rand(8, 4, 4), torch.rand(8, 8, 8))


class TestConditionStream:
    def test_no_first_frame_pure_noise_mode(self):
        z = torch.randn(4, 8, 2, 2)
        c_vid, mask = build_condition_stream(z, None)
        assert torch.all(c_vid == 0)
        assert torch.all(mask == 0)
        assert mask.shape == (4, 1, 2, 2)

    def test_first_frame_mask_definition(self):
        z = torch.randn(4, 8, 2, 2)
        ff = torch.randn(8, 2, 2)
        c_vid, mask = build_condition_stream(z, ff)
        assert torch.equal(c_vid[0], ff)
        assert torch.all(c_vid[1:] == 0)
        assert torch.all(mask[0] == 1)
        assert torch.all(mask[1:] == 0)

    def test_dropped_first_frame_zeroed(self):
        z = torch.randn(4, 8, 2, 2)
        ff = torch.randn(8, 2, 2)
        c_vid, mask = build_condition_stream(z, ff, drop_first_frame=True)
        assert torch.all(c_vid == 0)
        assert torch.all(mask == 0)

    def test_incompatible_first_frame_rejected(self):
        z = torch.randn(4, 8, 2, 2)
        with pytest.raises(ValueError):
            build_condition_stream(z, torch.randn(8, 3, 3))


class TestUnifiedInputStem:
    def test_stem_channel_arithmetic(self):
        stem = UnifiedInputStem(48, 64, 64)
        assert stem.in_channels == 48 + 48 + 1 + 64 == 161

    def test_output_shape(self):
        stem = UnifiedInputStem(8, 4, 16)
        out = stem(torch.randn(5, 8, 4, 4), torch.randn(5, 4, 4, 4))
        assert out.shape == (5, 16, 4, 4)

    def test_batched(self):
        stem = UnifiedInputStem(8, 4, 16)
        out = stem(torch.randn(2, 5, 8, 4, 4), torch.randn(2, 5, 4, 4, 4))
        assert out.shape == (2, 5, 16, 4, 4)

    def test_spatial_mismatch_rejected(self):
        stem = UnifiedInputStem(8, 4, 16)
        with pytest.raises(ValueError, match="spatial"):
            stem(torch.randn(5, 8, 4, 4), torch.randn(5, 4, 8, 8))


class TestContextEncoder:
    def test_output_length(self):
        enc = ContextEncoder(dim=128)
        assert enc(torch.rand(3, 64, 64)).shape == (128,)

    def test_null_embedding_on_drop(self):
        enc = ContextEncoder(dim=16)
        with torch.no_grad():
            enc.null_context.normal_()
        out = enc(torch.rand(3, 32, 32), drop_ref=True)
        assert torch.equal(out, enc.null_context)

    def test_constant_level_determines_output(self):
        enc = ContextEncoder(dim=16, bias=False)
        a = enc(torch.full((3, 32, 32), 0.25))
        b = enc(torch.full((3, 32, 32), 0.25))
        c = enc(torch.full((3, 32, 32), 0.75))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_batched(self):
        enc = ContextEncoder(dim=16)
        out = enc(torch.rand(4, 3, 32, 32), torch.tensor([True, False, True, False]))
        assert out.shape == (4, 16)
        assert torch.equal(out[0], enc.null_context)
        assert not torch.equal(out[1], enc.null_context)


class TestConditionDropout:
    def test_p_zero_unchanged(self):
        cond = make_bundle()
        gen = torch.Generator().manual_seed(0)
        out = apply_condition_dropout(cond, 0.0, gen)
        assert out.drop_ref is False and out.drop_first_frame is False

    def test_p_one_sets_both(self):
        cond = make_bundle()
        gen = torch.Generator().manual_seed(0)
        out = apply_condition_dropout(cond, 1.0, gen)
        assert out.drop_ref is True and out.drop_first_frame is True

    def test_existing_flags_sticky(self):
        cond = make_bundle()
        cond.drop_ref = True
        gen = torch.Generator().manual_seed(0)
        out = apply_condition_dropout(cond, 0.0, gen)
        assert out.drop_ref is True

    def test_frequency_within_three_sigma(self):
        cond = make_bundle()
        gen = torch.Generator().manual_seed(42)
        n = 2000
        refs = ffs = 0
        for _ in range(n):
            out = apply_condition_dropout(cond, 0.5, gen)
            refs += out.drop_ref
            ffs += out.drop_first_frame
        sigma = (0.25 / n) ** 0.5
        assert abs(refs / n - 0.5) <= 3 * sigma
        assert abs(ffs / n - 0.5) <= 3 * sigma

    def test_bad_probability(self):
        gen = torch.Generator()
        with pytest.raises(ValueError):
            apply_condition_dropout(make_bundle(), 1.5, gen)


class TestCollateBundles:
    def test_shapes_and_flags(self):
        a = make_bundle(num_frames=3, with_first_frame=True)
        b = make_bundle(num_frames=3, seed=1)
        b.drop_ref = True
        batched, drop_ref, drop_ff, ff_present = collate_bundles([a, b])
        assert batched.ref_latent.shape[0] == 2
        assert batched.driving_pose_maps.shape == (2, *a.driving_pose_maps.shape)
        assert drop_ref.tolist() == [False, True]
        # missing first frame is treated as dropped, with a zero placeholder
        assert drop_ff.tolist() == [False, True]
        assert ff_present.tolist() == [True, False]
        assert torch.all(batched.first_frame_latent[1] == 0)
