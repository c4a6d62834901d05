"""Model layer: config validation, shape contracts, determinism, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from fds.dataset import Image
from fds.model import (
    FeatureMap,
    ModelConfig,
    PredictedMask,
    SegmentationModel,
    image_to_tensor,
    load_checkpoint,
    save_checkpoint,
)


def _random_image(res: int = 64, seed: int = 0) -> Image:
    px = np.random.default_rng(seed).uniform(size=(res, res, 3)).astype(np.float32)
    return Image(pixels=px)


# ---------------------------------------------------------------------------
# configuration


class TestModelConfig:
    def test_default_profile(self):
        cfg = ModelConfig.default()
        assert cfg.encoder_depth_channels == (64, 64, 128, 256, 512)
        assert cfg.decoder_channels == (256, 128, 64, 32, 16)
        assert cfg.input_resolution == 512

    def test_tiny_profile(self):
        cfg = ModelConfig.tiny()
        assert cfg.encoder_depth_channels == (8, 8, 16, 32, 64)
        assert cfg.input_resolution == 64
        assert cfg.backbone_pretrained is False

    def test_enforces_width_ratio(self):
        with pytest.raises(ValueError):
            ModelConfig(encoder_depth_channels=(8, 8, 8, 32, 64))
        with pytest.raises(ValueError):
            ModelConfig(encoder_depth_channels=(8, 8, 16, 32))

    def test_enforces_decoder_arity(self):
        with pytest.raises(ValueError):
            ModelConfig(decoder_channels=(64, 32, 16))

    def test_enforces_resolution_multiple_of_stride(self):
        with pytest.raises(ValueError):
            ModelConfig(input_resolution=100)
        with pytest.raises(ValueError):
            ModelConfig(input_resolution=0)

    def test_dict_round_trip(self):
        cfg = ModelConfig.tiny()
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg


# ---------------------------------------------------------------------------
# value objects


class TestFeatureMap:
    def test_valid(self):
        fm = FeatureMap(values=torch.zeros(4, 2, 2), stride=32)
        assert fm.channels == 4

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            FeatureMap(values=torch.zeros(4, 2), stride=32)

    def test_rejects_non_power_of_two_stride(self):
        with pytest.raises(ValueError):
            FeatureMap(values=torch.zeros(4, 2, 2), stride=12)
        with pytest.raises(ValueError):
            FeatureMap(values=torch.zeros(4, 2, 2), stride=0)


class TestPredictedMask:
    def test_valid(self):
        PredictedMask(probs=torch.full((8, 8), 0.5))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            PredictedMask(probs=torch.zeros(1, 8, 8))

    def test_rejects_boundary_values(self):
        bad = torch.full((4, 4), 0.5)
        bad[0, 0] = 0.0
        with pytest.raises(ValueError):
            PredictedMask(probs=bad)
        bad[0, 0] = 1.0
        with pytest.raises(ValueError):
            PredictedMask(probs=bad)


class TestImageToTensor:
    def test_shape_and_dtype(self):
        img = _random_image(64)
        t = image_to_tensor(img)
        assert t.shape == (3, 64, 64)
        assert t.dtype == torch.float32

    def test_copies_frozen_pixels(self):
        img = _random_image(64)
        t = image_to_tensor(img)
        before = img.pixels[0, 0, 0]
        t[0, 0, 0] = -1.0
        assert img.pixels[0, 0, 0] == before


# ---------------------------------------------------------------------------
# shape oracles (stride arithmetic: bottleneck spatial = input / 32)


class TestShapes:
    def test_full_width_512_bottleneck(self):
        model = SegmentationModel(ModelConfig.default(), init_seed=0, fetch_backbone=False)
        x = torch.randn(1, 3, 512, 512)
        with torch.no_grad():
            bott, skips = model.net.encode(x)
        assert tuple(bott.shape) == (1, 512, 16, 16)
        assert [tuple(s.shape) for s in skips] == [
            (1, 64, 256, 256),
            (1, 64, 128, 128),
            (1, 128, 64, 64),
            (1, 256, 32, 32),
        ]

    def test_full_width_64_bottleneck(self):
        model = SegmentationModel(ModelConfig.default(), init_seed=0, fetch_backbone=False)
        with torch.no_grad():
            bott, _ = model.net.encode(torch.randn(1, 3, 64, 64))
        assert tuple(bott.shape) == (1, 512, 2, 2)

    def test_tiny_64_bottleneck(self, tiny_model_factory):
        model = tiny_model_factory(0)
        with torch.no_grad():
            bott, skips = model.net.encode(torch.randn(2, 3, 64, 64))
        assert tuple(bott.shape) == (2, 64, 2, 2)
        assert [s.shape[1] for s in skips] == [8, 8, 16, 32]

    def test_decode_restores_input_resolution(self):
        model = SegmentationModel(ModelConfig.default(), init_seed=0, fetch_backbone=False)
        x = torch.randn(1, 3, 512, 512)
        with torch.no_grad():
            probs, _ = model.net(x)
        assert tuple(probs.shape) == (1, 1, 512, 512)

    def test_zeroed_head_gives_uniform_half(self, tiny_model_factory):
        model = tiny_model_factory(0)
        with torch.no_grad():
            model.net.head.weight.zero_()
            model.net.head.bias.zero_()
        img = _random_image(64)
        pred, _ = model.forward(img)
        assert torch.all(pred.probs == 0.5)

    def test_probs_strictly_inside_unit_interval(self, tiny_model_factory):
        model = tiny_model_factory(3)
        pred, _ = model.forward(_random_image(64, seed=5))
        assert float(pred.probs.min()) > 0.0
        assert float(pred.probs.max()) < 1.0


class TestInputValidation:
    def test_encode_rejects_wrong_channels(self, tiny_model_factory):
        with pytest.raises(ValueError):
            tiny_model_factory(0).net.encode(torch.randn(1, 1, 64, 64))

    def test_encode_rejects_indivisible_dims(self, tiny_model_factory):
        with pytest.raises(ValueError):
            tiny_model_factory(0).net.encode(torch.randn(1, 3, 60, 64))

    def test_forward_rejects_indivisible_image(self, tiny_model_factory):
        px = np.zeros((48, 48, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            tiny_model_factory(0).forward(Image(pixels=px))

    def test_decode_rejects_wrong_skip_count(self, tiny_model_factory):
        model = tiny_model_factory(0)
        with pytest.raises(ValueError):
            model.net.decode(torch.randn(1, 64, 2, 2), [torch.randn(1, 8, 32, 32)])

    def test_image_decode_validates_strides(self, tiny_model_factory):
        model = tiny_model_factory(0)
        bott, skips = model.encode(_random_image(64))
        bad = FeatureMap(values=bott.values, stride=16)
        with pytest.raises(ValueError):
            model.decode(bad, skips)
        with pytest.raises(ValueError):
            model.decode(bott, skips[::-1])


# ---------------------------------------------------------------------------
# determinism and the image-level wrapper


class TestDeterminism:
    def test_same_seed_same_weights(self, tiny_model_factory):
        a = tiny_model_factory(7).net.state_dict()
        b = tiny_model_factory(7).net.state_dict()
        assert a.keys() == b.keys()
        for k in a:
            assert torch.equal(a[k], b[k]), k

    def test_different_seeds_differ(self, tiny_model_factory):
        a = tiny_model_factory(0).net.state_dict()
        b = tiny_model_factory(1).net.state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_eval_forward_is_repeatable(self, tiny_model_factory):
        model = tiny_model_factory(0).eval()
        img = _random_image(64)
        p1, f1 = model.forward(img)
        p2, f2 = model.forward(img)
        assert torch.equal(p1.probs, p2.probs)
        assert torch.equal(f1.values, f2.values)

    def test_encode_decode_composes_to_forward(self, tiny_model_factory):
        model = tiny_model_factory(0).eval()
        img = _random_image(64)
        bott, skips = model.encode(img)
        pred = model.decode(bott, skips)
        direct, _ = model.forward(img)
        assert torch.equal(pred.probs, direct.probs)

    def test_wrapper_runs_without_grad(self, tiny_model_factory):
        model = tiny_model_factory(0)
        pred, feat = model.forward(_random_image(64))
        assert not pred.probs.requires_grad
        assert not feat.values.requires_grad


class TestPretrainedFallback:
    def test_narrow_width_warns_and_randomizes(self, caplog):
        cfg = ModelConfig(
            encoder_depth_channels=(8, 8, 16, 32, 64),
            decoder_channels=(32, 16, 8, 4, 2),
            input_resolution=64,
            backbone_pretrained=True,
        )
        with caplog.at_level("WARNING"):
            SegmentationModel(cfg, init_seed=0, fetch_backbone=True)
        assert any("full-width" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# checkpoints


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_model_factory, tmp_path):
        model = tiny_model_factory(4)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(model, path, seed=11)
        loaded, seed = load_checkpoint(path)
        assert seed == 11
        assert loaded.config == model.config
        a, b = model.net.state_dict(), loaded.net.state_dict()
        assert a.keys() == b.keys()
        for k in a:
            assert torch.equal(a[k], b[k]), k

    def test_loaded_model_forward_identical(self, tiny_model_factory, tmp_path):
        model = tiny_model_factory(2).eval()
        img = _random_image(64, seed=9)
        before, _ = model.forward(img)
        save_checkpoint(model, tmp_path / "m.pt", seed=0)
        loaded, _ = load_checkpoint(tmp_path / "m.pt")
        after, _ = loaded.forward(img)
        assert torch.equal(before.probs, after.probs)

    def test_config_not_mutated_by_load(self, tmp_path):
        cfg = ModelConfig(
            encoder_depth_channels=(8, 8, 16, 32, 64),
            decoder_channels=(32, 16, 8, 4, 2),
            input_resolution=64,
            backbone_pretrained=True,
        )
        model = SegmentationModel(cfg, init_seed=0, fetch_backbone=False)
        save_checkpoint(model, tmp_path / "m.pt", seed=0)
        loaded, _ = load_checkpoint(tmp_path / "m.pt")
        assert loaded.config.backbone_pretrained is True

    def test_state_config_mismatch_raises(self, tiny_model_factory, tmp_path):
        model = tiny_model_factory(0)
        payload = {
            "format_version": 1,
            "state": model.net.state_dict(),
            "config": ModelConfig.default().to_dict(),
            "seed": 0,
        }
        torch.save(payload, tmp_path / "bad.pt")
        with pytest.raises(ValueError, match="does not match"):
            load_checkpoint(tmp_path / "bad.pt")
