"""Dual-stream hierarchical encoders and the semantic fusion of their top level."""
import torch
import torch.nn as nn

from .errors import ShapeError
from .iimc import AttentionBlock

STRIDES = (4, 8, 16, 32)


class MixBlock(nn.Module):
    """Depthwise 3x3 spatial mixing then a pointwise MLP, with a residual."""

    def __init__(self, channels, expand=2):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.norm = nn.GroupNorm(1, channels)
        self.pw1 = nn.Conv2d(channels, channels * expand, 1)
        self.act = nn.GELU()
        self.pw2 = nn.Conv2d(channels * expand, channels, 1)

    def forward(self, x):
        return x + self.pw2(self.act(self.pw1(self.norm(self.dw(x)))))


class Encoder(nn.Module):
    """Four-stage encoder producing features at strides 4, 8, 16 and 32."""

    def __init__(self, in_channels=3, channels=(32, 64, 128, 256)):
        super().__init__()
        self.channels = tuple(channels)
        downs, blocks = [], []
        prev = in_channels
        for i, c in enumerate(self.channels):
            k = 4 if i == 0 else 2
            layers = [] if i == 0 else [nn.GroupNorm(1, prev)]
            layers.append(nn.Conv2d(prev, c, k, stride=k))
            downs.append(nn.Sequential(*layers))
            blocks.append(MixBlock(c))
            prev = c
        self.downs = nn.ModuleList(downs)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} is not divisible by 32")
        feats = []
        x = image - 0.5
        for down, block in zip(self.downs, self.blocks):
            x = block(down(x))
            feats.append(x)
        return feats


def encode(image, encoder):
    """Run ``encoder`` on a ``(B, C, H, W)`` or ``(C, H, W)`` image."""
    squeeze = image.dim() == 3
    feats = encoder(image[None] if squeeze else image)
    return [f[0] for f in feats] if squeeze else feats


class SemanticFusion(nn.Module):
    """Cross-attention from RGB to thermal top-level features, then a 1x1 projection."""

    def __init__(self, channels, attention_dim, out_channels):
        super().__init__()
        self.attn = AttentionBlock(channels, channels, attention_dim)
        self.proj = nn.Conv2d(attention_dim, out_channels, 1)

    def forward(self, f_rgb4, f_t4, return_pre=False):
        if f_rgb4.shape != f_t4.shape:
            raise ShapeError(f"top-level features differ: {tuple(f_rgb4.shape)} vs {tuple(f_t4.shape)}")
        pre = self.attn(f_rgb4, f_t4)
        out = self.proj(pre)
        return (out, pre) if return_pre else out


def fuse_semantics(f_rgb4, f_t4, fusion):
    return fusion(f_rgb4, f_t4)
