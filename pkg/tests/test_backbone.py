import pytest
import torch

from vidcorr.backbone import Backbone, BackboneConfig
from vidcorr.errors import ValidationError
from vidcorr.losses import LossSwitches
from vidcorr.trainer import contrastive_step_losses
from vidcorr.codec import ColorCodec


class TestBackboneConfig:
    def test_invalid_stride(self):
        with pytest.raises(ValidationError):
            BackboneConfig(stride=3)

    def test_depth_must_cover_stride(self):
        with pytest.raises(ValidationError):
            BackboneConfig(stride=8, depth=2)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            BackboneConfig(kind="vit")


class TestBackboneForward:
    def test_stride8_256_patch_gives_32_grid(self):
        backbone = Backbone(BackboneConfig(stride=8, channels=32, depth=4, seed=0))
        fmap = backbone.features(torch.rand(3, 256, 256))
        assert (fmap.height, fmap.width) == (32, 32)
        assert fmap.cells == 1024

    def test_stride4_64_patch_gives_16_grid(self):
        backbone = Backbone(BackboneConfig(stride=4, channels=64, depth=4, seed=0))
        fmap = backbone.features(torch.rand(3, 64, 64))
        assert (fmap.height, fmap.width) == (16, 16)
        assert fmap.channels == 64

    @pytest.mark.parametrize("stride,patch", [(4, 32), (4, 48), (8, 64)])
    def test_shape_contract(self, stride, patch):
        backbone = Backbone(BackboneConfig(stride=stride, channels=16, depth=4, seed=1))
        fmap = backbone.features(torch.rand(3, patch, patch))
        assert fmap.height == fmap.width == patch // stride

    def test_indivisible_patch_rejected(self):
        backbone = Backbone(BackboneConfig(stride=4, channels=16, depth=4, seed=0))
        with pytest.raises(ValidationError):
            backbone.features(torch.rand(3, 30, 30))

    def test_eval_forward_bit_identical(self, gen):
        backbone = Backbone(BackboneConfig(stride=4, channels=32, depth=4, seed=0))
        backbone.eval()
        patch = torch.rand(3, 32, 32, generator=gen)
        assert torch.equal(backbone.features(patch).values,
                           backbone.features(patch).values)

    def test_init_deterministic_per_seed(self):
        a = Backbone(BackboneConfig(seed=5))
        b = Backbone(BackboneConfig(seed=5))
        c = Backbone(BackboneConfig(seed=6))
        for (pa, pb) in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert any(not torch.equal(pa, pc)
                   for pa, pc in zip(a.parameters(), c.parameters()))

    def test_batch_independent_normalization(self, gen):
        backbone = Backbone(BackboneConfig(stride=4, channels=32, depth=4, seed=0))
        backbone.eval()
        a = torch.rand(3, 32, 32, generator=gen)
        b = torch.rand(3, 32, 32, generator=gen)
        solo = backbone(a.unsqueeze(0))
        batched = backbone(torch.stack([a, b]))
        # conv kernels may differ by batch size; only float noise is allowed
        assert torch.allclose(solo[0], batched[0], atol=1e-4)

    def test_small_backbone_parameter_budget(self):
        backbone = Backbone(BackboneConfig(stride=4, channels=64, depth=4, seed=0))
        n = sum(p.numel() for p in backbone.parameters())
        assert 50_000 <= n <= 200_000

    def test_resnet_kind_shape(self):
        backbone = Backbone(BackboneConfig(stride=8, channels=64, depth=4,
                                           seed=0, kind="resnet"))
        fmap = backbone.features(torch.rand(3, 64, 64))
        assert fmap.height == fmap.width == 8


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self, gen):
        backbone = Backbone(BackboneConfig(stride=4, channels=16, depth=4, seed=0))
        codec = ColorCodec(4)
        patches = torch.rand(4, 3, 32, 32, generator=gen)
        grids = backbone(patches)
        from vidcorr.affinity import FeatureMap

        feats = [FeatureMap.from_grid(grids[i]) for i in range(4)]
        total, _ = contrastive_step_losses(feats[2:], feats[:2],
                                           [patches[2], patches[3]],
                                           [patches[0], patches[1]],
                                           codec, 1.0, LossSwitches())
        total.backward()
        for name, p in backbone.named_parameters():
            assert p.grad is not None, name
            assert float(p.grad.abs().max()) > 0, name
