import pytest
import torch

from ccreid.backbone import (Backbone, BackboneConfig, build_backbone,
                             input_normalization, normalize_images)
from ccreid.gradcheck import check_gradients

from conftest import toy_backbone_config


class TestConfig:
    def test_full_scale_contract(self):
        cfg = BackboneConfig(scale="full", input_height=384, input_width=192,
                             channels_out=1024)
        assert cfg.stride == 16
        assert cfg.output_size == (24, 12)

    def test_full_scale_rejects_other_sizes(self):
        with pytest.raises(ValueError, match="384x192"):
            BackboneConfig(scale="full", input_height=256, input_width=128,
                           channels_out=1024)
        with pytest.raises(ValueError, match="1024 channels"):
            BackboneConfig(scale="full", input_height=384, input_width=192,
                           channels_out=2048)

    def test_toy_stride_must_divide_input(self):
        with pytest.raises(ValueError, match="divisible"):
            BackboneConfig(scale="toy", input_height=30, input_width=32,
                           channels_out=64, toy_stage_widths=(16, 32, 64))

    def test_channels_out_follows_last_width(self):
        with pytest.raises(ValueError, match="last toy stage width"):
            BackboneConfig(scale="toy", input_height=32, input_width=32,
                           channels_out=32, toy_stage_widths=(16, 32, 64))


class TestForward:
    @pytest.mark.slow
    def test_full_scale_output_shape(self):
        cfg = BackboneConfig(scale="full", input_height=384, input_width=192,
                             channels_out=1024)
        backbone = build_backbone(cfg, seed=0).eval()
        with torch.no_grad():
            out = backbone(torch.rand(2, 3, 384, 192,
                                      generator=torch.Generator().manual_seed(0)))
        assert out.shape == (2, 1024, 24, 12)

    def test_toy_output_shape(self):
        backbone = build_backbone(toy_backbone_config(), seed=0).eval()
        with torch.no_grad():
            out = backbone(torch.rand(5, 3, 64, 32))
        assert out.shape == (5, 64, 8, 4)

    def test_seeded_build_is_deterministic(self):
        a = build_backbone(toy_backbone_config(), seed=3)
        b = build_backbone(toy_backbone_config(), seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = build_backbone(toy_backbone_config(), seed=4)
        assert any(not torch.equal(pa, pc)
                   for pa, pc in zip(a.parameters(), c.parameters()))

    def test_zero_batch_finite(self):
        backbone = build_backbone(toy_backbone_config(), seed=0).train()
        out = backbone(torch.zeros(4, 3, 64, 32))
        assert torch.isfinite(out).all()

    def test_eval_mode_purity_with_duplicates(self):
        backbone = build_backbone(toy_backbone_config(), seed=0).eval()
        img = torch.rand(1, 3, 64, 32, generator=torch.Generator().manual_seed(1))
        batch = torch.cat([img, img], dim=0)
        with torch.no_grad():
            out = backbone(batch)
        assert torch.equal(out[0], out[1])

    def test_wrong_spatial_size_rejected(self):
        backbone = build_backbone(toy_backbone_config(), seed=0)
        with pytest.raises(ValueError, match="expected 64x32"):
            backbone(torch.zeros(1, 3, 32, 32))

    def test_non_finite_input_rejected(self):
        backbone = build_backbone(toy_backbone_config(), seed=0)
        bad = torch.zeros(1, 3, 64, 32)
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            backbone(bad)

    @pytest.mark.parametrize("widths,h,w", [((8,), 16, 8), ((8, 16), 16, 8),
                                            ((4, 8, 16), 32, 16)])
    def test_output_shape_invariant(self, widths, h, w):
        cfg = BackboneConfig(scale="toy", input_height=h, input_width=w,
                             channels_out=widths[-1], toy_stage_widths=widths)
        backbone = build_backbone(cfg, seed=0).eval()
        with torch.no_grad():
            out = backbone(torch.rand(2, 3, h, w))
        assert out.shape == (2, widths[-1], h // cfg.stride, w // cfg.stride)


class TestGradients:
    def test_two_block_toy_gradcheck(self):
        cfg = BackboneConfig(scale="toy", input_height=8, input_width=8,
                             channels_out=16, toy_stage_widths=(8, 16))
        backbone = build_backbone(cfg, seed=0).double().train()
        with torch.random.fork_rng():
            torch.manual_seed(1)
            images = torch.rand(2, 3, 8, 8, dtype=torch.float64,
                                requires_grad=True)
            proj = torch.randn(2, 16, 2, 2, dtype=torch.float64)

        def loss_fn():
            return (backbone(images) * proj).sum()

        tensors = [("input", images)] + list(backbone.named_parameters())
        errors = check_gradients(loss_fn, tensors, eps=1e-6)
        assert max(errors.values()) < 1e-5


class TestNormalization:
    def test_full_uses_natural_image_statistics(self):
        mean, std = input_normalization("full")
        assert mean == (0.485, 0.456, 0.406)
        assert std == (0.229, 0.224, 0.225)

    def test_toy_is_identity(self):
        images = torch.rand(2, 3, 8, 8)
        assert torch.equal(normalize_images(images, "toy"), images)
