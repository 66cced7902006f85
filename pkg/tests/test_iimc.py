import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pcnet.errors import ShapeError
from pcnet.iimc import (
    AttentionBlock, IIMCLevel, PooledAttention, attention_correlate, from_tokens, inter_modal_correlate,
    intra_modal_correlate, region_map, resize, semantic_mask, to_tokens,
)
from conftest import attention_oracle, finite_difference_error

D = torch.float64


def eye(n):
    return torch.eye(n, dtype=D)


def test_single_key_gives_value_plus_query():
    q, kv = torch.randn(1, 3, 4, dtype=D), torch.randn(1, 1, 4, dtype=D)
    out = attention_correlate(q, kv, eye(4), eye(4), eye(4))
    torch.testing.assert_close(out, kv.expand(1, 3, 4) + q, rtol=0, atol=1e-12)


def test_zero_query_averages_values():
    kv = torch.randn(1, 2, 3, dtype=D)
    out = attention_correlate(torch.zeros(1, 1, 3, dtype=D), kv, eye(3), eye(3), eye(3))
    torch.testing.assert_close(out[0, 0], (kv[0, 0] + kv[0, 1]) / 2, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 6), st.integers(1, 4))
def test_attention_matches_oracle(seed, nq, nk, dk):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(1, nq, 3, generator=g, dtype=D)
    kv = torch.randn(1, nk, 2, generator=g, dtype=D)
    wq, wk, wv = (torch.randn(dk, c, generator=g, dtype=D) for c in (3, 2, 2))
    out, w = attention_correlate(q, kv, wq, wk, wv, return_weights=True)
    ref = attention_oracle(q[0].numpy(), kv[0].numpy(), wq.numpy(), wk.numpy(), wv.numpy())
    assert np.abs(out[0].numpy() - ref).max() < 1e-6
    assert (w.sum(-1) - 1).abs().max() < 1e-6


def test_kv_permutation_invariance():
    g = torch.Generator().manual_seed(0)
    q, kv = torch.randn(2, 5, 4, generator=g, dtype=D), torch.randn(2, 7, 4, generator=g, dtype=D)
    w = [torch.randn(3, 4, generator=g, dtype=D) for _ in range(3)]
    perm = torch.randperm(7, generator=g)
    a = attention_correlate(q, kv, *w)
    b = attention_correlate(q, kv[:, perm], *w)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-14)


def test_attention_shape_errors():
    w = eye(3)
    with pytest.raises(ShapeError):
        attention_correlate(torch.zeros(1, 2, 3), torch.zeros(1, 3, 2, 2), w, w, w)
    with pytest.raises(ShapeError):
        attention_correlate(torch.zeros(1, 2, 4, dtype=D), torch.zeros(1, 2, 3, dtype=D), w, w, w)
    with pytest.raises(ShapeError):
        attention_correlate(torch.zeros(1, 2, 3, dtype=D), torch.zeros(1, 2, 3, dtype=D), w, w,
                            torch.zeros(2, 3, dtype=D))


def test_token_round_trip():
    x = torch.randn(2, 3, 4, 5)
    assert torch.equal(from_tokens(to_tokens(x), (4, 5)), x)


def test_region_map_constant_and_empty():
    th = torch.full((1, 1, 32, 32), 0.5)
    for size in [(8, 8), (4, 4), (2, 2), (1, 1)]:
        assert torch.equal(region_map(th, torch.ones_like(th), size), torch.full((1, 1, *size), 0.5))
        assert torch.equal(region_map(th, torch.zeros_like(th), size), torch.zeros((1, 1, *size)))


def test_region_map_checkerboard_average():
    board = ((torch.arange(8)[:, None] + torch.arange(8)[None, :]) % 2).to(D)[None, None]
    out = region_map(board, torch.ones_like(board), (4, 4))
    torch.testing.assert_close(out, torch.full((1, 1, 4, 4), 0.5, dtype=D), rtol=0, atol=0)


def test_region_map_gradient_flows_through_image_not_mask():
    th = torch.rand(1, 3, 8, 8, dtype=D, requires_grad=True)
    valid = torch.ones(1, 1, 8, 8, dtype=D, requires_grad=True)
    region_map(th, valid, (4, 4)).sum().backward()
    assert th.grad is not None and th.grad.abs().sum() > 0
    assert valid.grad is None


def test_region_map_shape_error():
    with pytest.raises(ShapeError):
        region_map(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4), (2, 2))


def test_resize_non_integer_factor_is_bilinear():
    x = torch.rand(1, 1, 12, 12)
    assert resize(x, (5, 5)).shape == (1, 1, 5, 5)
    assert resize(x, (12, 12)) is x


def _block(c, identity=False, seed=0):
    torch.manual_seed(seed)
    b = AttentionBlock(c, c, c).double()
    return b.set_identity() if identity else b


def test_inter_zero_map_gives_thermal_mean():
    f_rgb, f_t = torch.randn(1, 3, 2, 2, dtype=D), torch.randn(1, 3, 2, 2, dtype=D)
    out = inter_modal_correlate(f_rgb, f_t, torch.zeros(1, 1, 2, 2, dtype=D),
                                torch.ones(1, 1, 2, 2, dtype=D), _block(3, True))
    torch.testing.assert_close(out, f_t.mean(dim=(2, 3), keepdim=True).expand_as(f_t), rtol=0, atol=1e-12)


def test_inter_transparent_gate_is_cross_attention():
    b = _block(3)
    f_rgb, f_t = torch.randn(1, 3, 2, 2, dtype=D), torch.randn(1, 3, 2, 2, dtype=D)
    ones = torch.ones(1, 1, 2, 2, dtype=D)
    assert torch.equal(inter_modal_correlate(f_rgb, f_t, ones, ones, b), b(f_rgb, f_t))


def test_inter_matches_composition_oracle():
    b = _block(2, seed=5)
    g = torch.Generator().manual_seed(1)
    f_rgb, f_t = (torch.randn(1, 2, 2, 2, generator=g, dtype=D) for _ in range(2))
    m, gs = torch.rand(1, 1, 2, 2, generator=g, dtype=D), torch.rand(1, 1, 2, 2, generator=g, dtype=D)
    out = inter_modal_correlate(f_rgb, f_t, m, gs, b)
    tok = lambda x: x[0].reshape(x.shape[1], -1).T.numpy()
    ref = attention_oracle(tok(f_rgb * m * gs), tok(f_t), *(l.weight.detach().numpy() for l in (b.q, b.k, b.v)))
    assert np.abs(tok(out.detach()) - ref).max() < 1e-6


def test_inter_mask_shape_error():
    with pytest.raises(ShapeError):
        inter_modal_correlate(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4), torch.zeros(1, 1, 2, 2),
                              torch.zeros(1, 1, 4, 4), _block(2).float())


def test_intra_examples():
    b = _block(3, seed=2)
    f = torch.randn(1, 3, 2, 2, dtype=D)
    assert torch.equal(intra_modal_correlate(f, torch.zeros_like(f), b), b(f, f))
    x = torch.randn(1, 3, 1, 1, dtype=D)
    torch.testing.assert_close(intra_modal_correlate(x, torch.zeros_like(x), _block(3, True)), 2 * x,
                               rtol=0, atol=1e-12)
    tok = lambda x: x[0].reshape(3, -1).T.numpy()
    g = torch.randn(1, 3, 2, 2, dtype=D)
    ref = attention_oracle(tok(f + g), tok(f + g), *(l.weight.detach().numpy() for l in (b.q, b.k, b.v)))
    assert np.abs(tok(intra_modal_correlate(f, g, b).detach()) - ref).max() < 1e-6
    with pytest.raises(ShapeError):
        intra_modal_correlate(f, torch.zeros(1, 3, 1, 2, dtype=D), b)


def test_gradients_of_the_three_ops():
    torch.manual_seed(0)
    b = AttentionBlock(2, 2, 2).double()
    f_rgb = torch.randn(1, 2, 2, 3, dtype=D, requires_grad=True)
    f_t = torch.randn(1, 2, 2, 3, dtype=D, requires_grad=True)
    m = torch.rand(1, 1, 2, 3, dtype=D, requires_grad=True)
    gs = torch.rand(1, 1, 2, 3, dtype=D, requires_grad=True)
    w = torch.randn(1, 2, 2, 3, dtype=D)
    params = list(b.parameters())
    assert finite_difference_error(lambda: (b(f_rgb, f_t) * w).sum(), [f_rgb, f_t] + params) < 1e-4
    assert finite_difference_error(lambda: (inter_modal_correlate(f_rgb, f_t, m, gs, b) * w).sum(),
                                   [f_rgb, f_t, m, gs] + params) < 1e-4
    assert finite_difference_error(lambda: (intra_modal_correlate(f_rgb, f_t, b) * w).sum(),
                                   [f_rgb, f_t] + params) < 1e-4


def test_pooled_attention_small_maps_are_exact():
    torch.manual_seed(1)
    p = PooledAttention(3, 4).double()
    a, b = torch.randn(1, 3, 4, 4, dtype=D), torch.randn(1, 3, 4, 4, dtype=D)
    assert torch.equal(p(a, b), p.block(a, b))


def test_pooled_attention_caps_tokens():
    torch.manual_seed(1)
    p = PooledAttention(3, 4).double()
    a, b = torch.randn(1, 3, 8, 8, dtype=D), torch.randn(1, 3, 8, 8, dtype=D)
    out = p(a, b)
    assert out.shape == a.shape
    # constant key/value map: attention term is the projected constant, residual stays full-res
    c = torch.ones(1, 3, 8, 8, dtype=D)
    expect = torch.einsum("bchw,dc->bdhw", c, p.block.v.weight) + torch.einsum("bchw,dc->bdhw", a, p.block.q.weight)
    torch.testing.assert_close(p(a, c), expect, rtol=0, atol=1e-12)


def test_semantic_mask_range_and_size():
    m = semantic_mask(torch.randn(2, 5, 3, 3), (6, 6))
    assert m.shape == (2, 1, 6, 6) and (m > 0).all() and (m < 1).all()


def test_level_without_intra_is_residual_sum():
    torch.manual_seed(3)
    lvl = IIMCLevel(4, 24).double()
    f_rgb, f_t = torch.randn(1, 4, 3, 3, dtype=D), torch.randn(1, 4, 3, 3, dtype=D)
    m, gs = torch.rand(1, 1, 3, 3, dtype=D), torch.rand(1, 1, 3, 3, dtype=D)
    inter = inter_modal_correlate(f_rgb, f_t, m, gs, lvl.inter)
    torch.testing.assert_close(lvl(f_rgb, f_t, m, gs, use_intra=False), f_rgb + inter, rtol=0, atol=0)
    torch.testing.assert_close(lvl(f_rgb, f_t, m, gs), intra_modal_correlate(f_rgb, inter, lvl.intra),
                               rtol=0, atol=0)
