import numpy as np
import pytest
import torch

from dbaf.data import load_image, save_image, synthetic_faces
from dbaf.errors import ConfigurationError, ShapeError, StateError
from dbaf.kria import generate_key
from dbaf.latent_codec import BackboneConfig, LatentPyramid, ToyBackbone
from dbaf.model import DBAF, anonymize


@pytest.fixture(scope="module")
def backbone():
    return ToyBackbone(BackboneConfig())


def test_zero_image_pyramid_shapes(backbone):
    codes, feats = backbone.encode(torch.zeros(1, 3, 64, 64))
    d = backbone.config.d
    assert [tuple(c.shape) for c in codes] == [(1, 4, d), (1, 4, d), (1, 6, d)]
    assert codes.stack().shape[-2] == 14
    assert [tuple(f.shape[1:]) for f in feats] == [(128, 8, 8), (64, 16, 16), (32, 32, 32)]


def test_encode_is_deterministic_and_pure(backbone):
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    before = x.clone()
    a_codes, a_feats = backbone.encode(x)
    b_codes, b_feats = backbone.encode(x)
    assert torch.equal(x, before)
    for a, b in zip(list(a_codes) + list(a_feats), list(b_codes) + list(b_feats)):
        assert torch.equal(a, b)


def test_encode_wrong_size_is_configuration_error(backbone):
    with pytest.raises(ConfigurationError):
        backbone.encode(torch.zeros(1, 3, 32, 32))


# --- independent float64 reference of the toy encoder --------------------------

def _np_conv(x, w, b, stride, scale):
    """Direct convolution on (C, H, W) with zero padding k//2."""
    k = w.shape[-1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (x.shape[1] + 2 * pad - k) // stride + 1
    out = np.zeros((w.shape[0], h_out, h_out))
    for i in range(h_out):
        for j in range(h_out):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, i, j] = np.tensordot(w * scale, patch, axes=([1, 2, 3], [0, 1, 2]))
    return out + (b[:, None, None] if b is not None else 0)


def _leaky(x):
    return np.where(x > 0, x, 0.2 * x)


def _pool2(m):
    c, h, _ = m.shape
    return m.reshape(c, 2, h // 2, 2, h // 2).mean(axis=(2, 4))


def reference_encode(enc, image):
    p = {k: v.detach().double().numpy() for k, v in enc.state_dict().items()}
    x = image.double().numpy()
    x = _leaky(_np_conv(x, p["from_rgb.weight"], p["from_rgb.bias"], 1, enc.from_rgb.scale))
    maps = {}
    for i, r in enumerate(enc.res_list):
        x = _leaky(_np_conv(x, p[f"downs.{i}.weight"], p[f"downs.{i}.bias"], 2, enc.downs[i].scale))
        maps[r] = x
    levels = []
    for i, (r, rows) in enumerate(zip(enc.level_res, (4, 4, 6))):
        pooled = _pool2(maps[r]).reshape(-1)
        w, b = p[f"heads.{i}.weight"], p[f"heads.{i}.bias"]
        levels.append((w * enc.heads[i].scale @ pooled + b).reshape(rows, -1))
    return levels, [maps[k] for k in enc.config.feature_sizes]


def test_encode_matches_float64_reference(backbone):
    g = torch.Generator().manual_seed(7)
    x = torch.rand(1, 3, 64, 64, generator=g) * 2 - 1
    codes, feats = backbone.encode(x)
    ref_codes, ref_feats = reference_encode(backbone.encoder, x[0])
    for got, want in zip(codes, ref_codes):
        assert torch.isfinite(got).all()
        np.testing.assert_allclose(got[0].detach().double().numpy(), want, rtol=1e-4, atol=1e-5)
    for got, want in zip(feats, ref_feats):
        np.testing.assert_allclose(got[0].detach().double().numpy(), want, rtol=1e-4, atol=1e-5)


def test_decode_zero_inputs_deterministic(backbone):
    d = backbone.config.d
    zeros = LatentPyramid(torch.zeros(1, 4, d), torch.zeros(1, 4, d), torch.zeros(1, 6, d))
    feats = tuple(torch.zeros(1, d, k, k) for k in backbone.config.feature_sizes)
    a = backbone.decode(zeros, feats)
    b = backbone.decode(zeros, feats)
    assert a.shape == (1, 3, 64, 64)
    assert torch.equal(a, b)
    assert a.min() >= -1 and a.max() <= 1


def test_decode_rejects_inconsistent_pyramids(backbone):
    d = backbone.config.d
    codes = LatentPyramid(torch.zeros(1, 4, d), torch.zeros(1, 4, d), torch.zeros(1, 5, d))
    feats = tuple(torch.zeros(1, d, k, k) for k in backbone.config.feature_sizes)
    with pytest.raises(ShapeError):
        backbone.decode(codes, feats)
    good = LatentPyramid(torch.zeros(1, 4, d), torch.zeros(1, 4, d), torch.zeros(1, 6, d))
    with pytest.raises(ShapeError):
        backbone.decode(good, feats[:2] + (torch.zeros(1, d, 16, 16),))


def test_decode_output_clamped(backbone):
    d = backbone.config.d
    big = LatentPyramid(*(torch.randn(1, r, d) * 50 for r in (4, 4, 6)))
    feats = tuple(torch.randn(1, d, k, k) * 50 for k in backbone.config.feature_sizes)
    out = backbone.decode(big, feats)
    assert out.min() >= -1 and out.max() <= 1


@pytest.mark.parametrize("kwargs", [
    dict(image_size=48), dict(image_size=16), dict(d=4), dict(feature_sizes=(16, 8, 32)),
])
def test_bad_backbone_config(kwargs):
    with pytest.raises(ConfigurationError):
        BackboneConfig(**kwargs)


def test_smaller_backbone_config():
    cfg = BackboneConfig(image_size=32, d=16, feature_channels=(32, 16, 8), feature_sizes=(4, 8, 16))
    bb = ToyBackbone(cfg)
    codes, feats = bb.encode(torch.zeros(2, 3, 32, 32))
    assert codes.stack().shape == (2, 14, 16)
    out = bb.decode(codes, tuple(torch.zeros(2, 16, k, k) for k in cfg.feature_sizes))
    assert out.shape == (2, 3, 32, 32)


# --- adapters ---------------------------------------------------------------------

class IdentityStub:
    """encode -> fixed codes, decode -> stored image."""

    def __init__(self, config, stored):
        self.config = config
        self.stored = stored

    def encode(self, images):
        b, d = images.shape[0], self.config.d
        codes = LatentPyramid(*(torch.ones(b, r, d) for r in (4, 4, 6)))
        feats = tuple(torch.ones(b, c, k, k) for c, k in zip(self.config.feature_channels, self.config.feature_sizes))
        return codes, feats

    def decode(self, latents, features):
        return self.stored.expand(latents.coarse.shape[0], -1, -1, -1).clone()


def test_register_toy_backbone_runs_end_to_end():
    model = DBAF()
    model.register_backbone(ToyBackbone(BackboneConfig(seed=3)))
    out, codes = model.mix(torch.zeros(1, 3, 64, 64), torch.zeros(1, 3, 64, 64))
    assert out.shape == (1, 3, 64, 64)


def test_register_backbone_wrong_width_rejected():
    model = DBAF()
    with pytest.raises(ConfigurationError):
        model.register_backbone(ToyBackbone(BackboneConfig(d=32)))


def test_identity_stub_backbone_routes_pipeline():
    stored = synthetic_faces(1, seed=5)
    model = DBAF()
    model.register_backbone(IdentityStub(model.config.backbone, stored))
    model.stage_completed.fill_(2)
    out = anonymize(torch.zeros(3, 64, 64), generate_key(seed=1), model)
    assert torch.equal(out, stored[0])


def test_untrained_model_refuses_anonymize():
    with pytest.raises(StateError):
        anonymize(torch.zeros(3, 64, 64), generate_key(seed=1), DBAF())


def test_png_roundtrip(tmp_path):
    img = synthetic_faces(1, seed=2)[0]
    save_image(img, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert back.shape == img.shape
    assert (back - img).abs().max() <= 1 / 127.5 + 1e-6
