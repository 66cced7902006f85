"""The full saliency network: encoders, semantic fusion, adapted homography
estimation, warping, per-level correlation and decoding."""
from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Encoder, SemanticFusion
from .errors import ShapeError
from .head import Decoder, SaliencyPrediction
from .iimc import IIMCLevel, region_map, semantic_mask
from .she import HomographyEstimator, estimate_homography, make_adapters, warp_image

ESTIMATOR_PREFIX = "estimator."


@dataclass
class PCNetOutput:
    prediction: SaliencyPrediction
    homography: torch.Tensor    # (B, 3, 3) thermal -> RGB, input-resolution pixels
    warped: torch.Tensor        # thermal resampled into the RGB frame
    valid: torch.Tensor         # (B, 1, H, W)
    degenerate: torch.Tensor    # (B,) estimator fell back on some iterate


def gray(rgb):
    return (0.299 * rgb[:, 0:1] + 0.587 * rgb[:, 1:2] + 0.114 * rgb[:, 2:3])


class PCNet(nn.Module):
    """RGB-thermal saliency network built from a :class:`RunConfig`.

    The estimator's base weights are expected to come from pretraining; call
    :meth:`freeze_estimator` before stage-2 training.
    """

    def __init__(self, cfg, estimator=None):
        super().__init__()
        self.cfg = cfg
        chans = tuple(cfg.backbone_channels)
        self.rgb_encoder = Encoder(3, chans)
        self.thermal_encoder = Encoder(3, chans)
        self.fusion = SemanticFusion(chans[-1], cfg.attention_dim, cfg.semantic_channels)
        self.estimator = estimator if estimator is not None else HomographyEstimator.from_config(cfg)
        self.adapters = make_adapters(cfg)
        self.iimc = nn.ModuleList(IIMCLevel(c, cfg.max_tokens_side) for c in chans)
        self.decoder = Decoder(chans, cfg.decoder_channels)

    # -- parameter groups ---------------------------------------------------

    def estimator_names(self):
        return [n for n, _ in self.named_parameters() if n.startswith(ESTIMATOR_PREFIX)]

    def freeze_estimator(self, frozen=True):
        for p in self.estimator.parameters():
            p.requires_grad_(not frozen)

    def frozen_names(self):
        return {n for n, p in self.named_parameters() if not p.requires_grad}

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # -- forward ------------------------------------------------------------

    def semantic_feature(self, f_rgb4, f_t4):
        f_s = self.fusion(f_rgb4, f_t4)
        if self.cfg.disable_semantics:
            f_s = torch.ones_like(f_s)
        return f_s

    def homography(self, rgb, thermal, f_s):
        b = rgb.shape[0]
        if self.cfg.disable_she:
            h = torch.eye(3, dtype=torch.float64, device=rgb.device).expand(b, 3, 3).clone()
            return h, torch.zeros(b, dtype=torch.bool, device=rgb.device)
        h, state = estimate_homography(rgb, thermal, self.estimator, f_s, self.adapters,
                                       adapters_disabled=self.cfg.disable_adapter,
                                       return_state=True)
        return h, state.degenerate

    def forward(self, rgb, thermal):
        """``rgb`` is ``(B, 3, S, S)``, ``thermal`` ``(B, 1 or 3, S, S)`` in [0, 1]."""
        if rgb.dim() != 4 or thermal.dim() != 4 or rgb.shape[-2:] != thermal.shape[-2:]:
            raise ShapeError("rgb and thermal must be (B, C, S, S) batches of equal size")
        if self.cfg.thermal_as_rgb:
            thermal = gray(rgb)
        t3 = thermal.expand(-1, 3, -1, -1) if thermal.shape[1] == 1 else thermal
        f_rgb = self.rgb_encoder(rgb)
        f_t = self.thermal_encoder(t3)
        f_s = self.semantic_feature(f_rgb[-1], f_t[-1])

        h, degenerate = self.homography(rgb, thermal, f_s)
        warped, valid = warp_image(thermal, torch.linalg.inv(h))
        warped = warped.to(rgb.dtype)
        valid = valid.to(rgb.dtype)

        fused = []
        for level, (fr, ft) in enumerate(zip(f_rgb, f_t)):
            if self.cfg.disable_iimc:
                fused.append(fr + ft)
                continue
            size = fr.shape[-2:]
            fused.append(self.iimc[level](fr, ft, region_map(warped, valid, size),
                                          semantic_mask(f_s, size),
                                          use_intra=not self.cfg.disable_intra))
        return PCNetOutput(self.decoder(fused), h, warped, valid, degenerate)
