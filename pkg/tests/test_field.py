import math

import numpy as np
import pytest
import torch

from declutter.cameras import CameraState
from declutter.field import (
    EncodingConfig,
    RadianceField,
    RenderConfig,
    band_mask,
    encoding_width,
    finite_difference_max_error,
    frequency_max,
    gradient_check,
    positional_encoding,
    sample_depths,
    volume_render,
)
from declutter.losses import S3IMConfig, ScheduleState
from declutter.sampling import sample_batch
from declutter.scene import sample_ray_depths, scene_density_color
from scenes import tiny_scene


class TestPositionalEncoding:
    def test_zero_input_gives_sin0_cos1(self):
        enc = positional_encoding(torch.zeros(1, 3), 5, 5.0, include_identity=False)
        pairs = enc.reshape(5, 6)
        assert torch.equal(pairs[:, :3], torch.zeros(5, 3))
        assert torch.equal(pairs[:, 3:], torch.ones(5, 3))

    def test_fmax_zero_blanks_all_bands(self):
        x = torch.rand(4, 3) * 2 - 1
        enc = positional_encoding(x, 10, 0.0)
        assert torch.equal(enc[:, :3], x)  # identity untouched
        assert torch.equal(enc[:, 3:], torch.zeros(4, 60))

    def test_standard_band_widths(self):
        x = torch.rand(2, 3)
        assert positional_encoding(x, 10, 10.0).shape[-1] == 63
        assert positional_encoding(x, 4, 4.0).shape[-1] == 27
        assert encoding_width(10) == 63 and encoding_width(4) == 27

    def test_full_frequency_equals_unmasked(self):
        x = torch.rand(6, 3) * 2 - 1
        assert torch.equal(
            positional_encoding(x, 8, 8.0), positional_encoding(x, 8, None)
        )

    def test_band_monotonicity(self):
        for smooth in (False, True):
            prev = torch.zeros(6)
            for f in np.linspace(0, 6, 25):
                mask = band_mask(6, float(f), smooth, torch.float32, "cpu")
                assert torch.all(mask >= prev - 1e-7)
                prev = mask

    def test_hard_vs_smooth_boundary_band(self):
        hard = band_mask(6, 2.5, False, torch.float64, "cpu")
        smooth = band_mask(6, 2.5, True, torch.float64, "cpu")
        assert torch.equal(hard, torch.tensor([1.0, 1.0, 0.0, 0.0, 0.0, 0.0], dtype=torch.float64))
        assert torch.equal(smooth, torch.tensor([1.0, 1.0, 0.5, 0.0, 0.0, 0.0], dtype=torch.float64))
        # identical at integral f_max
        assert torch.equal(
            band_mask(6, 4.0, False, torch.float64, "cpu"),
            band_mask(6, 4.0, True, torch.float64, "cpu"),
        )

    def test_out_of_range_fmax_rejected(self):
        with pytest.raises(ValueError):
            positional_encoding(torch.zeros(1, 3), 4, 5.0)


class TestFrequencyMax:
    def test_ramp(self):
        s = ScheduleState(total_iters=200000)
        assert s.t_freq_end == 20000
        assert frequency_max(0, s, 10) == 0.0
        assert frequency_max(10000, s, 10) == 5.0
        assert frequency_max(20000, s, 10) == 10.0
        assert frequency_max(150000, s, 10) == 10.0

    def test_direction_ramp_shares_fraction(self):
        s = ScheduleState(total_iters=1000, t_freq_end=100)
        assert frequency_max(50, s, 4) == 2.0

    def test_negative_iteration_rejected(self):
        s = ScheduleState(total_iters=100, t_end=2)
        with pytest.raises(ValueError):
            frequency_max(-1, s, 10)


class TestRadianceField:
    def test_forward_ranges_and_determinism(self):
        torch.manual_seed(0)
        field = RadianceField(EncodingConfig(), depth=3, width=32, scene_bound=4.0)
        pts = torch.randn(40, 3)
        dirs = torch.nn.functional.normalize(torch.randn(40, 3), dim=-1)
        sigma1, rgb1 = field(pts, dirs, 10.0, 4.0)
        sigma2, rgb2 = field(pts, dirs, 10.0, 4.0)
        assert torch.equal(sigma1, sigma2) and torch.equal(rgb1, rgb2)
        assert torch.all(sigma1 >= 0)
        assert torch.all((rgb1 >= 0) & (rgb1 <= 1))

    def test_architecture_dims(self):
        field = RadianceField(EncodingConfig(), depth=8, width=128)
        assert len(field.layers) == 8
        assert field.layers[0].in_features == 63
        # skip connection re-injects the encoding after layer 4
        assert field.layers[4].in_features == 128 + 63
        assert field.layers[5].in_features == 128

    def test_small_depth_drops_skip(self):
        field = RadianceField(EncodingConfig(), depth=4, width=64)
        assert all(layer.in_features in (63, 64) for layer in field.layers)


class TestVolumeRender:
    def test_zero_density_black(self):
        depths = torch.linspace(0.5, 3.5, 8)[None].repeat(5, 1)
        out = volume_render(torch.zeros(5, 8), torch.rand(5, 8, 3), depths, 4.0)
        assert torch.equal(out.rgb, torch.zeros(5, 3))
        assert torch.all(out.opacity.abs() < 1e-6)

    def test_single_segment_analytic(self):
        sigma = torch.tensor([[2.0]], dtype=torch.float64)
        rgb = torch.ones(1, 1, 3, dtype=torch.float64)
        depths = torch.tensor([[1.0]], dtype=torch.float64)
        out = volume_render(sigma, rgb, depths, far=2.0)
        expected = 1 - math.exp(-2.0)
        assert abs(out.opacity.item() - expected) < 1e-6
        assert torch.allclose(out.rgb, torch.full((1, 3), expected, dtype=torch.float64), atol=1e-6)

    def test_matches_oracle_quadrature(self):
        scene, rig = tiny_scene(num_views=2, res=16)
        from declutter.geometry import pixel_rays

        origins, dirs = pixel_rays(rig.poses[0], rig.intrinsics, 16, 16)
        depths = sample_ray_depths(scene.near, scene.far, origins.shape[0], 48, stratified=False)
        pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
        density, color = scene_density_color(scene, pts, True)
        out = volume_render(
            torch.from_numpy(density), torch.from_numpy(color), torch.from_numpy(depths), scene.far
        )
        from declutter.scene import render_oracle

        oracle = render_oracle(scene, rig, 0, 48, True)
        assert np.abs(out.rgb.numpy().reshape(16, 16, 3) - oracle).max() < 1e-6

    def test_white_background(self):
        depths = torch.linspace(0.5, 3.5, 8)[None]
        out = volume_render(torch.zeros(1, 8), torch.zeros(1, 8, 3), depths, 4.0, white_background=True)
        assert torch.allclose(out.rgb, torch.ones(1, 3), atol=1e-6)

    def test_non_monotone_depths_rejected(self):
        depths = torch.tensor([[1.0, 0.9, 1.2]])
        with pytest.raises(ValueError):
            volume_render(torch.zeros(1, 3), torch.zeros(1, 3, 3), depths, 2.0)

    def test_weight_normalization_property(self):
        gen = torch.Generator().manual_seed(4)
        sigma = torch.rand(20, 16, generator=gen, dtype=torch.float64) * 5
        depths64 = sample_depths(0.5, 3.0, 20, 16, stratified=True,
                                 generator=gen, dtype=torch.float64)
        out = volume_render(sigma, torch.rand(20, 16, 3, generator=gen, dtype=torch.float64),
                            depths64, 3.0)
        assert torch.all(out.weights >= 0)
        total = out.weights.sum(-1)
        assert torch.all(total <= 1 + 1e-6)
        deltas = torch.cat([depths64[:, 1:] - depths64[:, :-1], 3.0 - depths64[:, -1:]], dim=-1)
        expected = 1 - torch.exp(-(sigma * deltas).sum(-1))
        assert torch.allclose(out.opacity, expected, atol=1e-6)


class TestSampleDepths:
    def test_deterministic_mode_hits_bin_edges(self):
        depths = sample_depths(1.0, 3.0, 2, 4, stratified=False)
        assert torch.allclose(depths[0], torch.tensor([1.0, 1.5, 2.0, 2.5]))

    def test_stratified_stays_within_bins(self):
        gen = torch.Generator().manual_seed(0)
        depths = sample_depths(1.0, 3.0, 100, 8, stratified=True, generator=gen)
        width = 2.0 / 8
        lower = 1.0 + width * torch.arange(8)
        assert torch.all(depths >= lower)
        assert torch.all(depths < lower + width)


class TestGradients:
    def test_quadratic_toy_exact(self):
        w = torch.tensor([1.5, -2.0, 0.5], dtype=torch.float64, requires_grad=True)

        def loss_fn():
            return (w * w).sum() + 3.0 * w[1]

        err, _ = finite_difference_max_error(loss_fn, [w], eps=1e-4, max_coords=3)
        assert err < 1e-7

    def test_full_pipeline_gradcheck(self, small_dataset_36):
        ds = small_dataset_36
        torch.manual_seed(0)
        field = RadianceField(EncodingConfig(l_pos=6, l_dir=2), depth=3, width=32,
                              scene_bound=ds.far)
        cameras = CameraState(ds.intrinsics, ds.poses, trainable_from=100)
        views, xy = sample_batch(ds, 48, seed=1)
        schedule = ScheduleState(total_iters=1000, t_c=100, t_end=10)
        s3im_cfg = S3IMConfig(patch_side=4, patch_count=3, window=2)
        render = RenderConfig(samples_per_ray=16, near=ds.near, far=ds.far, stratified=False)
        result = gradient_check(
            field, cameras, (views, xy), ds.images, ds.masks,
            schedule, s3im_cfg, t=200, render=render, max_coords=60,
        )
        assert result.max_rel_error < 1e-3

    def test_gated_camera_gradients_zero(self, small_dataset_36):
        ds = small_dataset_36
        torch.manual_seed(0)
        field = RadianceField(EncodingConfig(l_pos=4, l_dir=2), depth=2, width=24,
                              scene_bound=ds.far)
        cameras = CameraState(ds.intrinsics, ds.poses, trainable_from=100)
        views, xy = sample_batch(ds, 16, seed=1)
        schedule = ScheduleState(total_iters=1000, t_c=100, t_end=10)
        s3im_cfg = S3IMConfig(patch_side=4, patch_count=1, window=2)
        render = RenderConfig(samples_per_ray=8, near=ds.near, far=ds.far, stratified=False)
        result = gradient_check(
            field, cameras, (views, xy), ds.images, ds.masks,
            schedule, s3im_cfg, t=50, render=render, max_coords=12,
        )
        assert result.gated_camera_grad_max == 0.0
        assert result.max_rel_error < 1e-3
