import math

import pytest
import torch

from declutter.field import RenderOutput
from declutter.losses import (
    S3IMConfig,
    ScheduleState,
    apply_ablation,
    masked_mse,
    occ_base,
    occ_loss,
    occ_weight,
    s3im,
    s3im_loss,
    schedule_coupling,
    ssim_patch,
    total_loss,
)


def make_render(rgb, sigma):
    weights = torch.zeros_like(sigma)
    return RenderOutput(rgb=rgb, sigma=sigma, weights=weights, opacity=weights.sum(-1))


class TestMaskedMse:
    def test_perfect_prediction(self):
        x = torch.rand(10, 3)
        assert masked_mse(x, x).item() == 0.0

    def test_uniform_offset(self):
        gt = torch.rand(10, 3)
        assert abs(masked_mse(gt + 0.1, gt).item() - 0.01) < 1e-7

    def test_single_ray_full_error(self):
        assert masked_mse(torch.zeros(1, 3), torch.ones(1, 3)).item() == 1.0

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            masked_mse(torch.zeros(0, 3), torch.zeros(0, 3))


class TestOccBase:
    def test_half_mask(self):
        sigma = torch.tensor([[1.0, 1.0, 0.0, 0.0]])
        assert occ_base(sigma, 0.5).item() == 0.5

    def test_zero_density(self):
        assert occ_base(torch.zeros(3, 8), 0.5).item() == 0.0

    def test_full_mask_is_mean(self):
        sigma = torch.rand(4, 8)
        assert torch.isclose(occ_base(sigma, 1.0), sigma.mean(dim=-1).mean())

    def test_fraction_rounds_up(self):
        sigma = torch.tensor([[3.0, 0.0, 0.0]])
        # ceil(0.4 * 3) = 2 samples masked, normalized by N = 3
        assert occ_base(sigma, 0.4).item() == 1.0


class TestOccWeight:
    def test_endpoints_and_midpoint_exact(self):
        s = ScheduleState(total_iters=1000, t_start=100, t_end=300, w_full=0.7)
        assert occ_weight(100, s) == pytest.approx(0.0, abs=1e-12)
        assert occ_weight(200, s) == pytest.approx(0.35, abs=1e-12)
        assert occ_weight(300, s) == pytest.approx(0.7, abs=1e-12)
        assert occ_weight(999, s) == 0.7
        assert occ_weight(50, s) == 0.0

    def test_monotone_and_continuous(self):
        s = ScheduleState(total_iters=500, t_start=20, t_end=170, w_full=1.0)
        values = [occ_weight(t, s) for t in range(0, 250)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
        assert all(b - a < 0.02 for a, b in zip(values, values[1:]))  # no jumps


class TestScheduleCoupling:
    def test_default_operating_point(self):
        s = ScheduleState(total_iters=200000)
        assert s.t_freq_end == 20000
        assert s.t_c == 40000
        assert s.t_end == 200  # 20000 / 100

    def test_unit_divisor(self):
        s = ScheduleState(total_iters=1000, lambda_anneal=1.0)
        assert s.t_end == s.t_freq_end

    def test_explicit_override_wins(self):
        s = ScheduleState(total_iters=1000, t_end=5000 // 10, lambda_anneal=100.0)
        assert s.t_end == 500

    def test_degenerate_rounding_rejected(self):
        s = ScheduleState(total_iters=1000, t_end=10)
        s.lambda_anneal = 1e9
        with pytest.raises(ValueError):
            schedule_coupling(s)

    def test_half_rounds_away_from_zero(self):
        # T = 500: t_freq_end 50, lambda 100 -> 0.5 rounds to 1
        s = ScheduleState(total_iters=500)
        assert s.t_end == 1


class TestSsimPatch:
    def test_self_similarity_exact(self):
        cfg = S3IMConfig(patch_side=8, window=4)
        a = torch.rand(8, 8, 3)
        assert ssim_patch(a, a, cfg).item() == pytest.approx(1.0, abs=1e-12)

    def test_constant_patch_closed_form(self):
        cfg = S3IMConfig(patch_side=4, window=4)
        a = torch.zeros(4, 4, 3, dtype=torch.float64)
        b = torch.ones(4, 4, 3, dtype=torch.float64)
        expected = (cfg.c1 / (1.0 + cfg.c1)) * (cfg.c2 / cfg.c2)
        assert ssim_patch(a, b, cfg).item() == pytest.approx(expected, rel=1e-9)
        assert expected == pytest.approx(9.999e-5, rel=1e-3)

    def test_symmetry(self):
        cfg = S3IMConfig(patch_side=8, window=4)
        gen = torch.Generator().manual_seed(0)
        a = torch.rand(8, 8, 3, generator=gen)
        b = torch.rand(8, 8, 3, generator=gen)
        assert ssim_patch(a, b, cfg).item() == pytest.approx(ssim_patch(b, a, cfg).item(), abs=1e-12)

    def test_window_divisibility_enforced(self):
        with pytest.raises(ValueError):
            S3IMConfig(patch_side=6, window=4)
        cfg = S3IMConfig(patch_side=8, window=4)
        with pytest.raises(ValueError):
            ssim_patch(torch.rand(6, 6, 3), torch.rand(6, 6, 3), cfg)


class TestS3im:
    def test_identical_inputs(self):
        cfg = S3IMConfig(patch_side=4, window=2)
        rays = torch.rand(64, 3)
        assert s3im(rays, rays, cfg, seed=0).item() == pytest.approx(1.0, abs=1e-12)
        assert s3im_loss(rays, rays, cfg, seed=0).item() == pytest.approx(0.0, abs=1e-12)

    def test_degenerate_partition_matches_ssim_patch(self):
        cfg = S3IMConfig(patch_side=4, patch_count=1, window=2)
        gen = torch.Generator().manual_seed(1)
        pred = torch.rand(16, 3, generator=gen)
        gt = torch.rand(16, 3, generator=gen)
        value = s3im(pred, gt, cfg, seed=7)
        perm = torch.randperm(16, generator=torch.Generator().manual_seed(7))
        expected = ssim_patch(pred[perm].reshape(4, 4, 3), gt[perm].reshape(4, 4, 3), cfg)
        assert value.item() == expected.item()

    def test_seed_determinism(self):
        cfg = S3IMConfig(patch_side=4, window=2)
        gen = torch.Generator().manual_seed(2)
        pred = torch.rand(64, 3, generator=gen)
        gt = torch.rand(64, 3, generator=gen)
        assert s3im(pred, gt, cfg, seed=3).item() == s3im(pred, gt, cfg, seed=3).item()
        assert s3im(pred, gt, cfg, seed=3).item() != s3im(pred, gt, cfg, seed=4).item()

    def test_insufficient_rays_rejected(self):
        cfg = S3IMConfig(patch_side=8, window=2)
        with pytest.raises(ValueError, match="insufficient rays"):
            s3im(torch.rand(32, 3), torch.rand(32, 3), cfg, seed=0)

    def test_loss_range(self):
        cfg = S3IMConfig(patch_side=4, window=2)
        gen = torch.Generator().manual_seed(5)
        for _ in range(10):
            pred = torch.rand(32, 3, generator=gen)
            gt = torch.rand(32, 3, generator=gen)
            value = s3im_loss(pred, gt, cfg, seed=1).item()
            assert 0.0 <= value <= 2.0

    def test_anticorrelated_near_two(self):
        cfg = S3IMConfig(patch_side=4, window=4)
        checker = (torch.arange(16).reshape(16, 1) % 2).float().repeat(1, 3)
        value = s3im_loss(checker, 1.0 - checker, cfg, seed=0).item()
        assert value > 1.99

    def test_full_batch_permutation_invariance(self):
        # with one patch spanning the whole batch and window == K, the
        # statistics see every ray once, so input order cannot matter
        cfg = S3IMConfig(patch_side=4, patch_count=1, window=4)
        gen = torch.Generator().manual_seed(6)
        pred = torch.rand(16, 3, generator=gen, dtype=torch.float64)
        gt = torch.rand(16, 3, generator=gen, dtype=torch.float64)
        base = s3im(pred, gt, cfg, seed=9).item()
        shuffle = torch.randperm(16, generator=gen)
        assert s3im(pred[shuffle], gt[shuffle], cfg, seed=9).item() == pytest.approx(base, abs=1e-12)


class TestTotalLoss:
    def test_perfect_prediction_zero_density_before_start(self):
        schedule = ScheduleState(total_iters=1000, t_start=10, t_end=100)
        cfg = S3IMConfig(patch_side=2, window=2)
        rgb = torch.rand(8, 3)
        render = make_render(rgb, torch.zeros(8, 16))
        total, breakdown = total_loss(render, rgb, t=5, schedule=schedule, s3im_cfg=cfg, s3im_seed=0)
        assert total.item() == pytest.approx(0.0, abs=1e-12)
        assert breakdown["occ"] == 0.0 and breakdown["w_occ"] == 0.0

    def test_default_weights(self):
        s = ScheduleState(total_iters=200000)
        assert s.w_occ_coeff == 0.01 and s.w_s3im == 0.01

    def test_disabling_s3im_matches_oar_mode(self):
        schedule = ScheduleState(total_iters=100, t_end=10)
        gated, camera = apply_ablation(schedule, "+oar")
        assert camera is True
        assert gated.w_s3im == 0.0 and gated.w_occ_coeff == schedule.w_occ_coeff
        cfg = S3IMConfig(patch_side=2, window=2)
        gen = torch.Generator().manual_seed(0)
        rgb = torch.rand(8, 3, generator=gen)
        render = make_render(torch.rand(8, 3, generator=gen), torch.rand(8, 16, generator=gen))
        total, breakdown = total_loss(render, rgb, t=50, schedule=gated, s3im_cfg=cfg, s3im_seed=0)
        assert breakdown["s3im"] == 0.0
        expected = masked_mse(render.rgb, rgb) + gated.w_occ_coeff * occ_loss(render.sigma, 50, gated)
        assert total.item() == pytest.approx(expected.item(), rel=1e-9)

    def test_ablation_matrix(self):
        schedule = ScheduleState(total_iters=100, t_end=10)
        by_mode = {mode: apply_ablation(schedule, mode) for mode in
                   ("masked_nerf", "+camera", "+oar", "+s3im")}
        assert by_mode["masked_nerf"][1] is False
        assert by_mode["masked_nerf"][0].w_occ_coeff == 0.0
        assert by_mode["masked_nerf"][0].w_s3im == 0.0
        assert by_mode["+camera"][1] is True
        assert by_mode["+camera"][0].w_occ_coeff == 0.0
        assert by_mode["+oar"][0].w_occ_coeff == 0.01
        assert by_mode["+oar"][0].w_s3im == 0.0
        assert by_mode["+s3im"][0].w_s3im == 0.01
        with pytest.raises(ValueError):
            apply_ablation(schedule, "bogus")

    def test_gradient_with_all_terms(self):
        # analytic vs finite difference through the combined loss
        from declutter.field import finite_difference_max_error

        schedule = ScheduleState(total_iters=100, t_start=0, t_end=10, w_full=1.0)
        cfg = S3IMConfig(patch_side=4, window=2)
        gen = torch.Generator().manual_seed(3)
        gt = torch.rand(16, 3, generator=gen, dtype=torch.float64)
        pred = torch.rand(16, 3, generator=gen, dtype=torch.float64).requires_grad_(True)
        sigma = torch.rand(16, 8, generator=gen, dtype=torch.float64).requires_grad_(True)

        def loss_fn():
            render = make_render(pred, sigma)
            total, _ = total_loss(render, gt, t=50, schedule=schedule, s3im_cfg=cfg, s3im_seed=2)
            return total

        err, _ = finite_difference_max_error(loss_fn, [pred, sigma], eps=1e-6, max_coords=40)
        assert err < 1e-3
