import numpy as np
import pytest
import torch

from vid2game.losses import feature_matching_l1, lsgan_discriminator_term, lsgan_generator_term
from vid2game.netblocks import RandomFeatureBackbone, downsample_half
from vid2game.p2p import (
    P2PLossWeights,
    P2PModel,
    p2p_discriminator_loss,
    p2p_forward,
    p2p_generator_loss,
    select_best_epoch,
)

torch.manual_seed(0)


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(10)
    model = P2PModel.build(32, 32, width_mult=1 / 16, n_res=3)
    backbone = RandomFeatureBackbone(seed=1)
    gen = torch.Generator().manual_seed(5)
    prev = torch.rand(2, 4, 32, 32, generator=gen)
    real = torch.rand(2, 4, 32, 32, generator=gen)
    controls = torch.randn(2, 2, generator=gen)
    return model, backbone, prev, real, controls


def fm_oracle(real_feats, fake_feats):
    """Element-normalized per-layer L1, summed over layers, scripted in numpy."""
    total = 0.0
    for a, b in zip(real_feats, fake_feats):
        a = a.detach().numpy().astype(np.float64)
        b = b.detach().numpy().astype(np.float64)
        total += np.abs(a - b).sum() / a.size
    return total


def generator_loss_oracle(model, backbone, prev, real, controls, lam_d=10.0, lam_vgg=10.0):
    """Recompute every term of the generator objective step by step."""
    with torch.no_grad():
        fake = model.generator(prev, controls)
        total = 0.0
        for scale, disc in enumerate([model.discriminator.fine, model.discriminator.coarse]):
            fake_in = torch.cat([prev, fake], dim=1)
            real_in = torch.cat([prev, real], dim=1)
            if scale == 1:
                fake_in = downsample_half(fake_in)
                real_in = downsample_half(real_in)
            fake_pyr = disc(fake_in)
            real_pyr = disc(real_in)
            score = fake_pyr.score.numpy().astype(np.float64)
            ls = ((score - 1.0) ** 2).sum() / score.size
            fm = fm_oracle(real_pyr.features, fake_pyr.features)
            total += ls + lam_d * fm
        def combined(stack):
            return torch.clamp(stack[:, :3] + stack[:, 3:4], 0, 1)
        fm_vgg = fm_oracle(backbone(combined(real)), backbone(combined(fake)))
        total += lam_vgg * fm_vgg
    return total


class TestGeneratorLoss:
    def test_matches_term_wise_oracle(self, tiny):
        model, backbone, prev, real, controls = tiny
        total, parts, _ = p2p_generator_loss(model, backbone, prev, real, controls)
        oracle = generator_loss_oracle(model, backbone, prev, real, controls)
        assert float(total) == pytest.approx(oracle, rel=1e-6)

    def test_zero_weights_leave_only_adversarial_terms(self, tiny):
        model, backbone, prev, real, controls = tiny
        total, parts, _ = p2p_generator_loss(
            model, backbone, prev, real, controls,
            P2PLossWeights(lambda_d=0.0, lambda_vgg=0.0))
        assert float(total) == pytest.approx(parts["ls_1"] + parts["ls_2"], rel=1e-6)

    def test_total_decomposes(self, tiny):
        model, backbone, prev, real, controls = tiny
        total, parts, _ = p2p_generator_loss(model, backbone, prev, real, controls)
        recon = (parts["ls_1"] + parts["ls_2"]
                 + 10.0 * (parts["fm_d_1"] + parts["fm_d_2"])
                 + 10.0 * parts["fm_vgg"])
        assert float(total) == pytest.approx(recon, rel=1e-6)

    def test_zero_case_primitives(self):
        ones = torch.ones(2, 1, 5, 5)
        assert float(lsgan_generator_term(ones)) == 0.0
        feats = [torch.rand(2, 4, 8, 8)]
        assert float(feature_matching_l1(feats, [feats[0].clone()])) == 0.0

    def test_discriminators_receive_no_grad(self, tiny):
        model, backbone, prev, real, controls = tiny
        model.zero_grad(set_to_none=True)
        total, _, _ = p2p_generator_loss(model, backbone, prev, real, controls)
        total.backward()
        assert all(p.grad is None for p in model.discriminator.parameters())
        assert any(p.grad is not None for p in model.generator.parameters())


def set_constant_score(model, value: float):
    with torch.no_grad():
        for disc in (model.discriminator.fine, model.discriminator.coarse):
            disc.score_layer.weight.zero_()
            disc.score_layer.bias.fill_(value)


class TestDiscriminatorLoss:
    def test_constant_zero_scores(self, tiny):
        model, _, prev, real, controls = tiny
        with torch.no_grad():
            fake = model.generator(prev, controls)
        set_constant_score(model, 0.0)
        total, parts = p2p_discriminator_loss(model, prev, real, fake)
        assert parts["d_1"] == pytest.approx(0.5, abs=1e-7)
        assert parts["d_2"] == pytest.approx(0.5, abs=1e-7)
        assert float(total) == pytest.approx(1.0, abs=1e-6)

    def test_constant_one_scores(self, tiny):
        model, _, prev, real, controls = tiny
        with torch.no_grad():
            fake = model.generator(prev, controls)
        set_constant_score(model, 1.0)
        total, parts = p2p_discriminator_loss(model, prev, real, fake)
        assert parts["d_1"] == pytest.approx(0.5, abs=1e-7)
        assert float(total) == pytest.approx(1.0, abs=1e-6)

    def test_matches_term_wise_oracle(self):
        torch.manual_seed(11)
        model = P2PModel.build(32, 32, width_mult=1 / 16, n_res=3)
        gen = torch.Generator().manual_seed(6)
        prev = torch.rand(2, 4, 32, 32, generator=gen)
        real = torch.rand(2, 4, 32, 32, generator=gen)
        fake = torch.rand(2, 4, 32, 32, generator=gen)
        total, _ = p2p_discriminator_loss(model, prev, real, fake)
        with torch.no_grad():
            oracle = 0.0
            for scale, disc in enumerate([model.discriminator.fine, model.discriminator.coarse]):
                fake_in = torch.cat([prev, fake], dim=1)
                real_in = torch.cat([prev, real], dim=1)
                if scale == 1:
                    fake_in = downsample_half(fake_in)
                    real_in = downsample_half(real_in)
                fs = disc(fake_in).score.numpy().astype(np.float64)
                rs = disc(real_in).score.numpy().astype(np.float64)
                oracle += 0.5 * (fs ** 2).mean() + 0.5 * ((rs - 1.0) ** 2).mean()
        assert float(total) == pytest.approx(oracle, rel=1e-6)

    def test_primitive_formula(self):
        fake = torch.full((1, 1, 3, 3), 0.25)
        real = torch.full((1, 1, 3, 3), 0.75)
        expected = 0.5 * 0.25 ** 2 + 0.5 * 0.25 ** 2
        assert float(lsgan_discriminator_term(fake, real)) == pytest.approx(expected)


class TestModelContracts:
    def test_block_structure(self):
        model = P2PModel.build(32, 32, width_mult=1 / 16, n_res=5)
        assert model.block_kinds() == ["v", "w", "w", "w", "v"]

    def test_forward_shape_and_range(self, tiny):
        model, _, prev, _, controls = tiny
        with torch.no_grad():
            out = model.generator(prev, controls)
        assert out.shape == prev.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_fresh_model_ignores_control_direction(self, tiny):
        model, _, prev, _, _ = tiny
        torch.manual_seed(42)
        fresh = P2PModel.build(32, 32, width_mult=1 / 16, n_res=3)
        with torch.no_grad():
            a = fresh.generator(prev, torch.tensor([[5.0, 0.0], [5.0, 0.0]]))
            b = fresh.generator(prev, torch.tensor([[0.0, 5.0], [0.0, 5.0]]))
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_domain_level_forward(self, tiny):
        from vid2game.domain import Displacement2, ObjectMap, PoseMap

        model = tiny[0]
        rng = np.random.default_rng(0)
        pose = PoseMap(rng.uniform(0, 1, (32, 32, 3)).astype(np.float32))
        obj = ObjectMap(rng.uniform(0, 1, (32, 32, 1)).astype(np.float32))
        new_pose, new_obj = p2p_forward(model, pose, obj, Displacement2(1.0, 0.0))
        assert new_pose.pixels.shape == (32, 32, 3)
        assert new_obj.pixels.shape == (32, 32, 1)

    def test_resolution_mismatch_rejected(self, tiny):
        model = tiny[0]
        with pytest.raises(ValueError):
            model.generator(torch.rand(1, 4, 64, 64), torch.zeros(1, 2))


class TestStoppingCriterion:
    def test_synthetic_log_argmin(self):
        assert select_best_epoch([0.9, 0.4, 0.6]) == 2

    def test_first_minimum_wins_ties(self):
        assert select_best_epoch([0.5, 0.3, 0.3]) == 2

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_best_epoch([])
