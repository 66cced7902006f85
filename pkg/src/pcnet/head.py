"""Top-down saliency decoder and the BCE + Dice objective."""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import MixBlock
from .errors import ShapeError

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class SaliencyPrediction:
    logits: torch.Tensor   # (B, 1, H, W)

    @property
    def prob(self):
        return torch.sigmoid(self.logits)


class Decoder(nn.Module):
    """Coarse-to-fine fusion of a four-level pyramid into full-resolution logits."""

    def __init__(self, in_channels=(32, 64, 128, 256), channels=64):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.mix = nn.ModuleList(MixBlock(channels) for _ in in_channels)
        self.out = nn.Conv2d(channels, 1, 1)

    def forward(self, feats):
        if len(feats) != 4:
            raise ShapeError("decoder needs exactly four levels")
        for i in range(3):
            a, b = feats[i].shape[-2:], feats[i + 1].shape[-2:]
            if a[0] != 2 * b[0] or a[1] != 2 * b[1]:
                raise ShapeError(f"level {i + 1} size {tuple(a)} is not twice level {i + 2} size {tuple(b)}")
        x = self.mix[3](self.proj[3](feats[3]))
        for i in (2, 1, 0):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.mix[i](x + self.proj[i](feats[i]))
        x = F.interpolate(self.out(x), scale_factor=4, mode="bilinear", align_corners=False)
        return SaliencyPrediction(x)


def decode(correlated, decoder):
    return decoder(correlated)


def bce_dice_loss(pred, gt, weights=(1.0, 1.0)):
    """``bce_w * BCE + dice_w * (1 - Dice)`` on probabilities.

    ``pred`` is a :class:`SaliencyPrediction` or a probability tensor. BCE uses
    probabilities clamped to ``[1e-7, 1 - 1e-7]``; Dice is per sample with
    smoothing 1 and averaged over the batch.
    """
    prob = pred.prob if isinstance(pred, SaliencyPrediction) else pred
    if prob.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(prob.shape)} vs ground truth {tuple(gt.shape)}")
    bce_w, dice_w = weights
    p = prob.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    bce = -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()
    dims = tuple(range(1, prob.dim())) if prob.dim() > 2 else tuple(range(prob.dim()))
    inter = (prob * gt).sum(dim=dims)
    dice = 1 - (2 * inter + DICE_SMOOTH) / (prob.sum(dim=dims) + gt.sum(dim=dims) + DICE_SMOOTH)
    return bce_w * bce + dice_w * dice.mean()
