import numpy as np
import pytest
import torch
from torch import nn

from vid2game.domain import BinaryMask, BlendMask, Frame
from vid2game.netblocks import RandomFeatureBackbone, downsample_half
from vid2game.p2f import (
    P2FLossWeights,
    P2FModel,
    blend,
    mask_loss,
    p2f_discriminator_loss,
    p2f_forward,
    p2f_generator_loss,
)

torch.manual_seed(0)


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(20)
    model = P2FModel.build(32, 32, width_mult=1 / 16, n_res=3)
    backbone = RandomFeatureBackbone(seed=2)
    gen = torch.Generator().manual_seed(7)
    pose_pair = torch.rand(2, 6, 32, 32, generator=gen)
    target = torch.rand(2, 3, 32, 32, generator=gen)
    mask = (torch.rand(2, 1, 32, 32, generator=gen) > 0.6).float()
    background = torch.rand(2, 3, 32, 32, generator=gen)
    return model, backbone, pose_pair, target, mask, background


class TestBlend:
    def test_full_mask_returns_raw(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        out = blend(z, np.ones((8, 8, 1), dtype=np.float32), b)
        np.testing.assert_array_equal(out, z)

    def test_zero_mask_returns_background(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        out = blend(z, np.zeros((8, 8, 1), dtype=np.float32), b)
        np.testing.assert_array_equal(out, b)

    def test_affine_case(self):
        z = np.ones((4, 4, 3), dtype=np.float32)
        b = np.zeros((4, 4, 3), dtype=np.float32)
        m = np.full((4, 4, 1), 0.25, dtype=np.float32)
        assert np.allclose(blend(z, m, b), 0.25)

    def test_convex_combination_identity(self):
        rng = np.random.default_rng(2)
        z = rng.uniform(0, 1, (6, 6, 3))
        b = rng.uniform(0, 1, (6, 6, 3))
        m = rng.uniform(0, 1, (6, 6, 1))
        np.testing.assert_allclose(blend(z, m, b) + blend(b, m, z), z + b, rtol=1e-12)

    def test_background_untouched_where_mask_zero(self):
        rng = np.random.default_rng(3)
        z = rng.uniform(0, 1, (6, 6, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (6, 6, 3)).astype(np.float32)
        m = (rng.uniform(size=(6, 6, 1)) > 0.5).astype(np.float32)
        out = blend(z, m, b)
        off = m[:, :, 0] == 0.0
        np.testing.assert_array_equal(out[off], b[off])

    def test_domain_wrappers(self):
        z = Frame(np.full((4, 4, 3), 0.5, dtype=np.float32))
        b = Frame(np.zeros((4, 4, 3), dtype=np.float32))
        m = BlendMask(np.ones((4, 4, 1), dtype=np.float32))
        out = blend(z, m, b)
        assert isinstance(out, Frame)
        np.testing.assert_array_equal(out.pixels, z.pixels)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            blend(np.zeros((4, 4, 3)), np.zeros((5, 4, 1)), np.zeros((4, 4, 3)))

    def test_torch_tensors(self):
        z = torch.rand(2, 3, 8, 8)
        b = torch.rand(2, 3, 8, 8)
        m = torch.rand(2, 1, 8, 8)
        out = blend(z, m, b)
        torch.testing.assert_close(out, z * m + b * (1 - m))


class TestMaskLoss:
    def test_all_ones_zero_loss(self):
        m = np.ones((6, 6, 1), dtype=np.float32)
        total, parts = mask_loss(m, m.copy())
        assert total == 0.0
        assert all(v == 0.0 for v in parts.values())

    def test_full_mask_empty_character(self):
        m = np.ones((6, 6, 1), dtype=np.float32)
        t = np.zeros((6, 6, 1), dtype=np.float32)
        total, parts = mask_loss(m, t)
        assert parts["outside"] == pytest.approx(1.0)
        assert parts["grad_x"] == 0.0 and parts["grad_y"] == 0.0
        assert parts["inside"] == 0.0
        assert total == pytest.approx(1.0)

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(4)
        m = rng.uniform(0, 1, (4, 4, 1)).astype(np.float32)
        t = np.zeros((4, 4, 1), dtype=np.float32)
        t[1:3, 1:3] = 1.0
        total, parts = mask_loss(m, t)
        n = 16
        a = b = c = d = 0.0
        for y in range(4):
            for x in range(4):
                inv = 1.0 - t[y, x, 0]
                mx = m[y, x + 1, 0] - m[y, x, 0] if x < 3 else 0.0
                my = m[y + 1, x, 0] - m[y, x, 0] if y < 3 else 0.0
                a += m[y, x, 0] * inv
                b += abs(mx) * inv
                c += abs(my) * inv
                d += (1.0 - m[y, x, 0]) * t[y, x, 0]
        assert parts["outside"] == pytest.approx(a / n, rel=1e-6)
        assert parts["grad_x"] == pytest.approx(b / n, rel=1e-6)
        assert parts["grad_y"] == pytest.approx(c / n, rel=1e-6)
        assert parts["inside"] == pytest.approx(d / n, rel=1e-6)
        assert total == pytest.approx((a + b + c + d) / n, rel=1e-6)

    def test_components_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            m = rng.uniform(0, 1, (5, 5, 1)).astype(np.float32)
            t = (rng.uniform(size=(5, 5, 1)) > 0.5).astype(np.float32)
            total, parts = mask_loss(m, t)
            assert all(v >= 0.0 for v in parts.values())
            assert total >= 0.0

    def test_zero_only_for_saturated_matching_masks(self):
        ones = np.ones((5, 5, 1), dtype=np.float32)
        total, _ = mask_loss(ones, ones)
        assert total == 0.0
        dented = ones.copy()
        dented[2, 2, 0] = 0.9
        total, _ = mask_loss(dented, ones)
        assert total > 0.0
        # binary but non-constant t keeps edge gradients alive
        t = np.zeros((5, 5, 1), dtype=np.float32)
        t[1:4, 1:4] = 1.0
        total, _ = mask_loss(t.copy(), t)
        assert total > 0.0

    def test_domain_wrappers(self):
        m = BlendMask(np.full((4, 4, 1), 0.5, dtype=np.float32))
        t = BinaryMask(np.ones((4, 4, 1), dtype=np.float32))
        total, parts = mask_loss(m, t)
        assert parts["inside"] == pytest.approx(0.5)
        assert isinstance(total, float)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_loss(np.zeros((4, 4, 1)), np.zeros((5, 4, 1)))


def fm_oracle(real_feats, fake_feats):
    total = 0.0
    for a, b in zip(real_feats, fake_feats):
        a = a.detach().numpy().astype(np.float64)
        b = b.detach().numpy().astype(np.float64)
        total += np.abs(a - b).sum() / a.size
    return total


def generator_loss_oracle(model, backbone, pose_pair, target, t, background,
                          lam_d=10.0, lam_1=10.0, lam_2=1.0):
    with torch.no_grad():
        z, m = model.generator(pose_pair)
        f = z * m + background * (1 - m)
        pt, ft, ot = pose_pair * t, f * t, target * t
        total = 0.0
        for scale, disc in enumerate([model.discriminator.fine, model.discriminator.coarse]):
            fake_in = torch.cat([pt, ft], dim=1)
            real_in = torch.cat([pt, ot], dim=1)
            if scale == 1:
                fake_in = downsample_half(fake_in)
                real_in = downsample_half(real_in)
            fake_pyr = disc(fake_in)
            real_pyr = disc(real_in)
            score = fake_pyr.score.numpy().astype(np.float64)
            total += ((score - 1.0) ** 2).mean() + lam_d * fm_oracle(
                real_pyr.features, fake_pyr.features)
        total += lam_1 * fm_oracle(backbone(target), backbone(f))
        # mask penalty, scripted independently
        mn = m.numpy().astype(np.float64)
        tn = t.numpy().astype(np.float64)
        mx = np.zeros_like(mn)
        mx[..., :, :-1] = mn[..., :, 1:] - mn[..., :, :-1]
        my = np.zeros_like(mn)
        my[..., :-1, :] = mn[..., 1:, :] - mn[..., :-1, :]
        inv = 1.0 - tn
        mask_term = ((mn * inv).mean() + (np.abs(mx) * inv).mean()
                     + (np.abs(my) * inv).mean() + ((1.0 - mn) * tn).mean())
        total += lam_2 * mask_term
    return total


class TestGeneratorLoss:
    def test_matches_term_wise_oracle(self, tiny):
        model, backbone, pose_pair, target, mask, background = tiny
        total, parts, _ = p2f_generator_loss(model, backbone, pose_pair, target,
                                             mask, background)
        oracle = generator_loss_oracle(model, backbone, pose_pair, target, mask, background)
        assert float(total) == pytest.approx(oracle, rel=1e-6)

    def test_zero_weights_leave_adversarial_terms(self, tiny):
        model, backbone, pose_pair, target, mask, background = tiny
        total, parts, _ = p2f_generator_loss(
            model, backbone, pose_pair, target, mask, background,
            P2FLossWeights(lambda_d=0.0, lambda_backbone=0.0, lambda_mask=0.0))
        assert float(total) == pytest.approx(parts["ls_1"] + parts["ls_2"], rel=1e-6)

    def test_ideal_prediction_leaves_only_mask_term(self, tiny):
        model, backbone, pose_pair, target, mask, _ = tiny

        class Stub(nn.Module):
            def __init__(self, z, m):
                super().__init__()
                self.z, self.m = z, m

            def forward(self, _x):
                return self.z, self.m

        ideal = P2FModel.build(32, 32, width_mult=1 / 16, n_res=2)
        ideal.generator = Stub(target.clone(), mask.clone())
        with torch.no_grad():
            for disc in (ideal.discriminator.fine, ideal.discriminator.coarse):
                disc.score_layer.weight.zero_()
                disc.score_layer.bias.fill_(1.0)
        # with b = target, f = target*t + target*(1-t) = target exactly
        total, parts, (z, m, f) = p2f_generator_loss(
            ideal, backbone, pose_pair, target, mask, background=target.clone())
        torch.testing.assert_close(f, target, rtol=0, atol=1e-7)
        assert parts["ls_1"] == pytest.approx(0.0, abs=1e-10)
        assert parts["fm_d_1"] == pytest.approx(0.0, abs=1e-7)
        assert parts["fm_vgg"] == pytest.approx(0.0, abs=1e-7)
        expected_mask, _ = mask_loss(mask, mask)
        assert float(total) == pytest.approx(float(expected_mask), rel=1e-5, abs=1e-6)

    def test_masked_terms_background_invariant_when_mask_equals_t(self, tiny):
        model, backbone, pose_pair, target, mask, background = tiny

        class Stub(nn.Module):
            def __init__(self, z, m):
                super().__init__()
                self.z, self.m = z, m

            def forward(self, _x):
                return self.z, self.m

        stub_model = P2FModel.build(32, 32, width_mult=1 / 16, n_res=2)
        z = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(9))
        stub_model.generator = Stub(z, mask.clone())
        other_bg = torch.rand_like(background)
        _, parts_a, _ = p2f_generator_loss(stub_model, backbone, pose_pair, target,
                                           mask, background)
        _, parts_b, _ = p2f_generator_loss(stub_model, backbone, pose_pair, target,
                                           mask, other_bg)
        for key in ("ls_1", "ls_2", "fm_d_1", "fm_d_2"):
            assert parts_a[key] == pytest.approx(parts_b[key], rel=1e-5, abs=1e-7)


class TestDiscriminatorLoss:
    def test_constant_scores(self, tiny):
        model, _, pose_pair, target, mask, background = tiny
        frame = torch.rand_like(target)
        for value in (0.0, 1.0):
            with torch.no_grad():
                for disc in (model.discriminator.fine, model.discriminator.coarse):
                    disc.score_layer.weight.zero_()
                    disc.score_layer.bias.fill_(value)
            total, parts = p2f_discriminator_loss(model, pose_pair, target, mask, frame)
            assert parts["d_1"] == pytest.approx(0.5, abs=1e-7)
            assert parts["d_2"] == pytest.approx(0.5, abs=1e-7)
            assert float(total) == pytest.approx(1.0, abs=1e-6)

    def test_matches_term_wise_oracle(self):
        torch.manual_seed(21)
        model = P2FModel.build(32, 32, width_mult=1 / 16, n_res=3)
        gen = torch.Generator().manual_seed(8)
        pose_pair = torch.rand(2, 6, 32, 32, generator=gen)
        target = torch.rand(2, 3, 32, 32, generator=gen)
        mask = (torch.rand(2, 1, 32, 32, generator=gen) > 0.5).float()
        frame = torch.rand(2, 3, 32, 32, generator=gen)
        total, _ = p2f_discriminator_loss(model, pose_pair, target, mask, frame)
        with torch.no_grad():
            pt = pose_pair * mask
            oracle = 0.0
            for scale, disc in enumerate([model.discriminator.fine, model.discriminator.coarse]):
                fake_in = torch.cat([pt, frame * mask], dim=1)
                real_in = torch.cat([pt, target * mask], dim=1)
                if scale == 1:
                    fake_in = downsample_half(fake_in)
                    real_in = downsample_half(real_in)
                fs = disc(fake_in).score.numpy().astype(np.float64)
                rs = disc(real_in).score.numpy().astype(np.float64)
                oracle += 0.5 * (fs ** 2).mean() + 0.5 * ((rs - 1.0) ** 2).mean()
        assert float(total) == pytest.approx(oracle, rel=1e-6)


class TestForward:
    def test_shapes_and_ranges(self, tiny):
        from vid2game.domain import CombinedPose

        model = tiny[0]
        rng = np.random.default_rng(0)
        prev = CombinedPose(rng.uniform(0, 1, (32, 32, 3)).astype(np.float32))
        cur = CombinedPose(rng.uniform(0, 1, (32, 32, 3)).astype(np.float32))
        raw, mask = p2f_forward(model, prev, cur)
        assert raw.pixels.shape == (32, 32, 3)
        assert mask.pixels.shape == (32, 32, 1)
        assert 0.0 <= mask.pixels.min() and mask.pixels.max() <= 1.0

    def test_structure_has_no_conditioned_blocks(self, tiny):
        from vid2game.netblocks import ConditionedBlock

        model = tiny[0]
        assert not any(isinstance(b, ConditionedBlock) for b in model.generator.blocks)
        assert model.generator.mask_head is not None
