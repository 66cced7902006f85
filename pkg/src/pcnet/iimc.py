"""Inter- and intra-modal correlation.

The correlation block is single-head scaled dot-product attention with a
query residual::

    C(q, kv) = softmax(Q K^T / sqrt(d_k)) V + Q,  Q = P_Q q,  K = P_K kv,  V = P_V kv
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


def to_tokens(x):
    """(B, C, H, W) -> (B, H*W, C)."""
    return x.flatten(2).transpose(1, 2)


def from_tokens(t, hw):
    b, n, c = t.shape
    return t.transpose(1, 2).reshape(b, c, *hw)


def attention_correlate(q_input, kv_input, wq, wk, wv, return_weights=False):
    """Correlation block on token sequences ``(B, N, C)`` or maps ``(B, C, H, W)``.

    ``wq``, ``wk``, ``wv`` are ``(d_out, C_in)`` projection matrices; ``wq`` and
    ``wv`` must share ``d_out`` so the query residual can be added.
    """
    spatial = q_input.dim() == 4
    if spatial:
        if kv_input.dim() != 4:
            raise ShapeError("q_input and kv_input must both be maps or both be tokens")
        hw = q_input.shape[2:]
        q_input, kv_input = to_tokens(q_input), to_tokens(kv_input)
    if q_input.dim() != 3 or kv_input.dim() != 3 or q_input.shape[0] != kv_input.shape[0]:
        raise ShapeError(f"bad token shapes {tuple(q_input.shape)} / {tuple(kv_input.shape)}")
    if q_input.shape[-1] != wq.shape[1] or kv_input.shape[-1] != wk.shape[1] or kv_input.shape[-1] != wv.shape[1]:
        raise ShapeError("channel count does not match projection weights")
    if wq.shape[0] != wk.shape[0] or wq.shape[0] != wv.shape[0]:
        raise ShapeError("projections must share the output dimension")
    q = q_input @ wq.t()
    k = kv_input @ wk.t()
    v = kv_input @ wv.t()
    weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
    out = weights @ v + q
    if spatial:
        out = from_tokens(out, hw)
    return (out, weights) if return_weights else out


class AttentionBlock(nn.Module):
    def __init__(self, q_channels, kv_channels, dim):
        super().__init__()
        self.q = nn.Linear(q_channels, dim, bias=False)
        self.k = nn.Linear(kv_channels, dim, bias=False)
        self.v = nn.Linear(kv_channels, dim, bias=False)

    def forward(self, q_input, kv_input, return_weights=False):
        return attention_correlate(q_input, kv_input, self.q.weight, self.k.weight,
                                   self.v.weight, return_weights)

    def set_identity(self):
        with torch.no_grad():
            for lin in (self.q, self.k, self.v):
                lin.weight.copy_(torch.eye(*lin.weight.shape))
        return self


def resize(x, size):
    """Resize maps; integer-factor shrinking is an exact block average."""
    size = tuple(int(s) for s in size)
    h, w = x.shape[-2:]
    if (h, w) == size:
        return x
    if h % size[0] == 0 and w % size[1] == 0:
        return F.avg_pool2d(x, (h // size[0], w // size[1]))
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def semantic_mask(f_s, size):
    """Single-channel gate sigmoid(channel-mean(f_s)) at ``size``."""
    return resize(torch.sigmoid(f_s.mean(dim=1, keepdim=True)), size)


def region_map(warped, valid, level_shape):
    """Grey warped thermal times its validity mask, resized to ``level_shape``.

    ``valid`` carries no gradient; ``warped`` does.
    """
    if warped.dim() != 4 or valid.dim() != 4 or warped.shape[-2:] != valid.shape[-2:]:
        raise ShapeError("warped and valid must be (B, C, H, W) maps of equal size")
    gray = warped.mean(dim=1, keepdim=True) * valid.detach()
    return resize(gray, level_shape).clamp(0.0, 1.0)


def inter_modal_correlate(f_rgb, f_t, map_i, g_s, block):
    """Cross-attention from region- and semantics-masked RGB onto unwarped thermal."""
    if f_rgb.shape[-2:] != map_i.shape[-2:] or f_rgb.shape[-2:] != g_s.shape[-2:]:
        raise ShapeError("masks must match the level's spatial size")
    return block(f_rgb * map_i * g_s, f_t)


def intra_modal_correlate(f_rgb, f_inter, block):
    if f_rgb.shape != f_inter.shape:
        raise ShapeError(f"shape mismatch {tuple(f_rgb.shape)} vs {tuple(f_inter.shape)}")
    x = f_rgb + f_inter
    return block(x, x)


class PooledAttention(nn.Module):
    """Correlation block that attends on average-pooled tokens.

    Keys/values and the attention term are computed at most
    ``max_side x max_side``; the attention term is upsampled back and the
    query residual is kept at full resolution.
    """

    def __init__(self, channels, max_side):
        super().__init__()
        self.block = AttentionBlock(channels, channels, channels)
        self.max_side = max_side

    def forward(self, q_input, kv_input):
        h, w = q_input.shape[-2:]
        f = max(math.ceil(h / self.max_side), math.ceil(w / self.max_side))
        if f == 1:
            return self.block(q_input, kv_input)
        qp = F.avg_pool2d(q_input, f, ceil_mode=True)
        kvp = F.avg_pool2d(kv_input, f, ceil_mode=True)
        attn = self.block(qp, kvp) - to_q(self.block, qp)
        attn = F.interpolate(attn, size=(h, w), mode="bilinear", align_corners=False)
        return attn + to_q(self.block, q_input)


def to_q(block, x):
    return torch.einsum("bchw,dc->bdhw", x, block.q.weight)


class IIMCLevel(nn.Module):
    def __init__(self, channels, max_side=24):
        super().__init__()
        self.inter = PooledAttention(channels, max_side)
        self.intra = PooledAttention(channels, max_side)

    def forward(self, f_rgb, f_t, map_i, g_s, use_intra=True):
        f_inter = inter_modal_correlate(f_rgb, f_t, map_i, g_s, self.inter)
        if not use_intra:
            return f_rgb + f_inter
        return intra_modal_correlate(f_rgb, f_inter, self.intra)
