import torch
import torch.nn as nn
import pytest

from blindvr.dac import CorruptionDetector
from blindvr.encoders import EncoderConfig, GlobalEncoder, ImageEncoder, TokenEncoder

from conftest import finite_difference_check, tiny_dac_config, tiny_encoder_config


def test_image_pyramid_shapes():
    enc = ImageEncoder(EncoderConfig(channels=(8, 16, 32)))
    feats = enc(torch.rand(2, 3, 64, 64))
    assert [tuple(f.shape) for f in feats] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4)]


def test_image_encoder_rejects_indivisible_input():
    enc = ImageEncoder(EncoderConfig(channels=(8, 16, 32)))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 40, 64))


def test_zero_frame_finite_and_deterministic():
    enc = ImageEncoder(EncoderConfig(channels=(8, 16)))
    x = torch.zeros(1, 3, 32, 32)
    a, b = enc(x), enc(x)
    for fa, fb in zip(a, b):
        assert torch.isfinite(fa).all()
        assert torch.equal(fa, fb)


def test_token_count():
    enc = TokenEncoder(EncoderConfig(token_dim=16, patch=16))
    assert enc(torch.rand(3, 3, 64, 64)).shape == (3, 16, 16)


def test_zero_map_tokens_equal_projection_bias():
    enc = TokenEncoder(EncoderConfig(token_dim=8, patch=4, pos_embed=False))
    tokens = enc(torch.zeros(1, 3, 16, 16))
    bias = enc.proj.bias.detach()
    expected = bias + enc.adapt(bias)
    assert torch.allclose(tokens[0], expected.expand(16, -1), atol=1e-6)
    assert torch.equal(tokens[0, 0], tokens[0, -1])


def test_zero_map_tokens_differ_only_by_position():
    enc = TokenEncoder(EncoderConfig(token_dim=8, patch=4, pos_embed=True))
    tokens = enc(torch.zeros(1, 3, 16, 16))
    assert not torch.allclose(tokens[0, 0], tokens[0, 5])


def test_global_encoder_vector_and_determinism():
    enc = GlobalEncoder(EncoderConfig(channels=(8,), global_dim=12, global_size=16))
    x = torch.zeros(2, 3, 48, 48)
    out = enc(x)
    assert out.shape == (2, 12)
    assert torch.equal(out, enc(x))


@pytest.mark.parametrize("which", ["image", "token", "global"])
def test_encoder_gradients(which):
    torch.manual_seed(0)
    cfg = tiny_encoder_config()
    if which == "image":
        enc, x = ImageEncoder(cfg).double(), torch.rand(1, 3, 8, 8, dtype=torch.float64)
        fn = lambda: sum((f ** 2).sum() for f in enc(x))  # noqa: E731
    elif which == "token":
        enc, x = TokenEncoder(cfg).double(), torch.rand(1, 3, 8, 8, dtype=torch.float64)
        fn = lambda: (enc(x) ** 2).sum()  # noqa: E731
    else:
        enc, x = GlobalEncoder(cfg).double(), torch.rand(1, 3, 8, 8, dtype=torch.float64)
        fn = lambda: (enc(x) ** 2).sum()  # noqa: E731
    errors = finite_difference_check(fn, list(enc.named_parameters()))
    assert max(errors.values()) < 1e-4, errors


class ConstantPyramid(nn.Module):
    """Mock backbone returning fixed features regardless of input."""

    def __init__(self, channels):
        super().__init__()
        self.channels = tuple(channels)
        self.anchor = nn.Parameter(torch.zeros(()))

    def forward(self, frames):
        n, _, h, w = frames.shape
        return [torch.ones(n, c, h // 2 ** (j + 2), w // 2 ** (j + 2)) + self.anchor
                for j, c in enumerate(self.channels)]


class ConstantTokens(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, mv_maps):
        n = mv_maps.shape[0]
        return torch.full((n, 4, self.dim), 0.5)


def test_detector_accepts_substitute_encoders():
    cfg = tiny_dac_config()
    det = CorruptionDetector(cfg, image_encoder=ConstantPyramid((4, 8)), token_encoder=ConstantTokens(8))
    out = det(torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16), torch.eye(3)[:2])
    assert out.logits.shape == (2, 16, 16)
    assert torch.isfinite(out.logits).all()
