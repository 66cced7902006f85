import numpy as np
import pytest
import torch

from pcnet.backbone import STRIDES, Encoder, SemanticFusion, encode, fuse_semantics
from pcnet.errors import ShapeError
from conftest import attention_oracle, finite_difference_error


def test_pyramid_shapes_at_384():
    torch.manual_seed(0)
    enc = Encoder(3, (8, 8, 8, 8))
    feats = encode(torch.rand(1, 3, 384, 384), enc)
    assert [f.shape[-1] for f in feats] == [96, 48, 24, 12]
    assert [384 // s for s in STRIDES] == [96, 48, 24, 12]


def test_channels_and_unbatched():
    enc = Encoder(3, (4, 6, 8, 10))
    feats = encode(torch.rand(3, 64, 96), enc)
    assert [tuple(f.shape) for f in feats] == [(4, 16, 24), (6, 8, 12), (8, 4, 6), (10, 2, 3)]


def test_rejects_bad_size():
    with pytest.raises(ShapeError):
        encode(torch.rand(1, 3, 48, 64), Encoder())


def test_zero_image_is_finite_and_deterministic():
    torch.manual_seed(1)
    enc = Encoder()
    a = encode(torch.zeros(1, 3, 64, 64), enc)
    b = encode(torch.zeros(1, 3, 64, 64), enc)
    for x, y in zip(a, b):
        assert torch.isfinite(x).all()
        assert torch.equal(x, y)


def test_streams_are_not_tied():
    torch.manual_seed(2)
    e1, e2 = Encoder(3, (4, 4, 4, 4)), Encoder(3, (4, 4, 4, 4))
    x = torch.rand(1, 3, 32, 32)
    assert not torch.equal(e1(x)[-1], e2(x)[-1])
    e2.load_state_dict(e1.state_dict())
    assert torch.equal(e1(x)[-1], e2(x)[-1])
    with torch.no_grad():
        next(e2.parameters()).add_(1.0)
    assert not torch.equal(next(e1.parameters()), next(e2.parameters()))


def _identity_fusion(c):
    fusion = SemanticFusion(c, c, c).double()
    fusion.attn.set_identity()
    return fusion


def test_fusion_single_token_doubles():
    fusion = _identity_fusion(3)
    x = torch.randn(1, 3, 1, 1, dtype=torch.float64)
    _, pre = fusion(x, x, return_pre=True)
    torch.testing.assert_close(pre, 2 * x, rtol=0, atol=1e-12)


def test_fusion_zero_query_is_token_mean():
    fusion = _identity_fusion(3)
    ft = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    _, pre = fusion(torch.zeros_like(ft), ft, return_pre=True)
    mean = ft.mean(dim=(2, 3), keepdim=True).expand_as(ft)
    torch.testing.assert_close(pre, mean, rtol=0, atol=1e-12)


def test_fusion_matches_oracle():
    torch.manual_seed(3)
    fusion = SemanticFusion(4, 2, 5).double()
    a = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    b = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    out, pre = fusion(a, b, return_pre=True)
    tok = lambda x: x[0].reshape(4, -1).T.numpy()
    w = [fusion.attn.q.weight, fusion.attn.k.weight, fusion.attn.v.weight]
    ref = attention_oracle(tok(a), tok(b), *(x.detach().numpy() for x in w))
    assert np.abs(pre[0].reshape(2, -1).T.detach().numpy() - ref).max() < 1e-6
    proj = fusion.proj.weight[:, :, 0, 0].detach().numpy() @ ref.T + fusion.proj.bias.detach().numpy()[:, None]
    assert np.abs(out[0].reshape(5, -1).detach().numpy() - proj).max() < 1e-6
    assert torch.equal(fuse_semantics(a, b, fusion), out)


def test_fusion_depends_on_both_inputs():
    for seed in range(5):
        torch.manual_seed(seed)
        fusion = SemanticFusion(4, 4, 3)
        a, b = torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2)
        base = fusion(a, b)
        assert not torch.allclose(fusion(a + 1e-2, b), base, atol=0, rtol=0)
        assert not torch.allclose(fusion(a, b + 1e-2), base, atol=0, rtol=0)


def test_fusion_shape_mismatch():
    with pytest.raises(ShapeError):
        SemanticFusion(4, 4, 4)(torch.randn(1, 4, 2, 2), torch.randn(1, 4, 1, 2))


def test_encoder_gradients_match_finite_differences():
    # the smallest valid input is 32 px (total stride 32)
    torch.manual_seed(4)
    enc = Encoder(3, (2, 2, 2, 2)).double()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    weights = [torch.randn(f.shape, dtype=torch.float64) for f in enc(x)]

    def loss():
        return sum((f * w).sum() for f, w in zip(enc(x), weights))

    params = list(enc.parameters())
    assert finite_difference_error(loss, params) < 1e-4
