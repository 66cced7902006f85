"""Semantics-guided homography estimation.

An iterative four-corner estimator (siamese encoder, all-pairs correlation,
recurrent corner updates) whose encoder layers can be adapted with
semantic bottleneck adapters. Homographies map thermal pixel coordinates to
RGB pixel coordinates; aligning the thermal image therefore samples it at
``inverse(H) @ p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Homography, image_corners, rescale_homography
from .errors import DegenerateHomography, ShapeError
from .geometry import solve_dlt  # noqa: F401  (re-exported)
from .iimc import resize

FEATURE_STRIDE = 8


# ---------------------------------------------------------------------------
# geometry on tensors

def corner_grid(height, width, dtype=torch.float64, device=None):
    return torch.as_tensor(image_corners(height, width), dtype=dtype, device=device)


def _hartley(pts):
    c = pts.mean(dim=1, keepdim=True)
    d = (pts - c).norm(dim=-1).mean(dim=1).clamp_min(1e-300)
    s = math.sqrt(2.0) / d
    b = pts.shape[0]
    t = torch.zeros(b, 3, 3, dtype=pts.dtype, device=pts.device)
    t[:, 0, 0] = s
    t[:, 1, 1] = s
    t[:, 0, 2] = -s * c[:, 0, 0]
    t[:, 1, 2] = -s * c[:, 0, 1]
    t[:, 2, 2] = 1.0
    return t


def _apply_t(t, pts):
    return pts @ t[:, :2, :2].transpose(1, 2) + t[:, None, :2, 2]


def dlt(src, dst):
    """Batched differentiable DLT: ``(B, 4, 2)`` x2 -> ``(B, 3, 3)`` with m22 = 1."""
    if src.shape != dst.shape or src.shape[-2:] != (4, 2):
        raise ShapeError("dlt expects matching (B, 4, 2) corner sets")
    ts, td = _hartley(src), _hartley(dst)
    s, d = _apply_t(ts, src), _apply_t(td, dst)
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    one, zero = torch.ones_like(x), torch.zeros_like(x)
    rows_u = torch.stack([x, y, one, zero, zero, zero, -x * u, -y * u], dim=-1)
    rows_v = torch.stack([zero, zero, zero, x, y, one, -x * v, -y * v], dim=-1)
    a = torch.stack([rows_u, rows_v], dim=2).reshape(-1, 8, 8)
    b = torch.stack([u, v], dim=-1).reshape(-1, 8, 1)
    h8 = torch.linalg.solve(a, b)[..., 0]
    hn = torch.cat([h8, torch.ones_like(h8[:, :1])], dim=1).reshape(-1, 3, 3)
    m = torch.linalg.solve(td, hn @ ts)
    return m / m[:, 2:3, 2:3]


def quad_ok(pts, eps=1e-6):
    """True where the quadrilateral ``(B, 4, 2)`` is strictly convex and non-degenerate."""
    e = torch.roll(pts, -1, dims=1) - pts
    cross = e[:, :, 0] * torch.roll(e, -1, dims=1)[:, :, 1] - e[:, :, 1] * torch.roll(e, -1, dims=1)[:, :, 0]
    scale = (pts.amax(dim=1) - pts.amin(dim=1)).amax(dim=1, keepdim=True).clamp_min(1e-300) ** 2
    pos = (cross > eps * scale).all(dim=1)
    neg = (cross < -eps * scale).all(dim=1)
    return (pos | neg) & torch.isfinite(pts).all(dim=2).all(dim=1)


def apply_h(h, pts):
    """``(B, 3, 3)`` applied to ``(B, N, 2)`` points."""
    ph = torch.cat([pts, torch.ones_like(pts[..., :1])], dim=-1) @ h.transpose(1, 2)
    return ph[..., :2] / ph[..., 2:3]


def warp_image(img, h):
    """Bilinear inverse-map warp, differentiable in ``img`` and ``h``.

    ``img`` is ``(B, C, H, W)`` (or ``(C, H, W)``), ``h`` is ``(B, 3, 3)`` (or
    ``(3, 3)``, a :class:`Homography`). Output pixel ``p`` samples ``img`` at
    ``h @ p``. Returns ``(warped, valid)`` with ``valid`` of shape
    ``(B, 1, H, W)``; warped is 0 wherever valid is 0.
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img[None]
    if isinstance(h, Homography):
        h = torch.tensor(h.m)
    if h.dim() == 2:
        h = h[None]
    b, c, hh, ww = img.shape
    if h.shape[0] != b:
        h = h.expand(b, 3, 3)
    gd = torch.float64 if img.dtype == torch.float64 else torch.promote_types(h.dtype, img.dtype)
    h = h.to(gd)
    det = torch.linalg.det(h)
    if not bool((det.abs() > 1e-12).all()):
        raise DegenerateHomography("singular homography")
    ys, xs = torch.meshgrid(torch.arange(hh, dtype=gd, device=img.device),
                            torch.arange(ww, dtype=gd, device=img.device), indexing="ij")
    xs, ys = xs.reshape(-1), ys.reshape(-1)
    den = h[:, 2, 0:1] * xs + h[:, 2, 1:2] * ys + h[:, 2, 2:3]
    ok = den.abs() > 1e-12
    den = torch.where(ok, den, torch.ones_like(den))
    sx = (h[:, 0, 0:1] * xs + h[:, 0, 1:2] * ys + h[:, 0, 2:3]) / den
    sy = (h[:, 1, 0:1] * xs + h[:, 1, 1:2] * ys + h[:, 1, 2:3]) / den
    ok = ok & (sx >= 0) & (sx <= ww - 1) & (sy >= 0) & (sy <= hh - 1)
    zero = torch.zeros_like(sx)
    sx = torch.where(ok, sx, zero)
    sy = torch.where(ok, sy, zero)
    x0 = sx.detach().floor().clamp(max=ww - 2)
    y0 = sy.detach().floor().clamp(max=hh - 2)
    fx = (sx - x0).to(img.dtype)[:, None]
    fy = (sy - y0).to(img.dtype)[:, None]
    x0, y0 = x0.long(), y0.long()
    flat = img.reshape(b, c, hh * ww)

    def tap(yy, xx):
        idx = (yy * ww + xx)[:, None].expand(b, c, -1)
        return flat.gather(2, idx)

    out = ((1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
           + fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)))
    mask = ok.to(img.dtype)[:, None]
    out = (out * mask).reshape(b, c, hh, ww)
    mask = mask.reshape(b, 1, hh, ww)
    return (out[0], mask[0]) if squeeze else (out, mask)


# ---------------------------------------------------------------------------
# semantic adapter

def semantic_gate(x, y):
    """``x * sigmoid(channel_mean(y))``, the gate broadcast over ``x``'s channels."""
    if x.shape[-2:] != y.shape[-2:]:
        raise ShapeError(f"spatial mismatch {tuple(x.shape[-2:])} vs {tuple(y.shape[-2:])}")
    return x * torch.sigmoid(y.mean(dim=-3, keepdim=True))


def s_adapter_forward(f_l, f_s, w_dn, w_dn_s, w_up):
    """Bottleneck adapter output (the caller adds it back onto ``f_l``).

    Weights are ``(out, in)`` matrices applied per pixel. ``f_s`` is resized to
    ``f_l``'s spatial size first.
    """
    if f_l.dim() != 4 or f_s.dim() != 4:
        raise ShapeError("adapter expects (B, C, H, W) maps")
    if f_l.shape[1] != w_dn.shape[1] or f_s.shape[1] != w_dn_s.shape[1] or w_up.shape[1] != w_dn.shape[0]:
        raise ShapeError("adapter weights do not match feature channels")
    if f_s.shape[-2:] != f_l.shape[-2:]:
        f_s = F.interpolate(f_s, size=f_l.shape[-2:], mode="bilinear", align_corners=False)
    x = torch.einsum("bchw,dc->bdhw", f_l, w_dn)
    y = torch.einsum("bchw,dc->bdhw", f_s, w_dn_s)
    return torch.einsum("bdhw,cd->bchw", torch.relu(semantic_gate(x, y)), w_up)


class SAdapter(nn.Module):
    def __init__(self, channels, semantic_channels, dim):
        super().__init__()
        self.w_dn = nn.Parameter(torch.empty(dim, channels))
        self.w_dn_s = nn.Parameter(torch.empty(dim, semantic_channels))
        self.w_up = nn.Parameter(torch.zeros(channels, dim))
        nn.init.kaiming_uniform_(self.w_dn, a=math.sqrt(5))
        nn.init.kaiming_uniform_(self.w_dn_s, a=math.sqrt(5))

    def forward(self, f_l, f_s):
        return s_adapter_forward(f_l, f_s, self.w_dn, self.w_dn_s, self.w_up)


def make_adapters(cfg):
    return nn.ModuleList(
        SAdapter(c, cfg.semantic_channels, cfg.adapter_dim) for c in cfg.estimator_channels
    )


# ---------------------------------------------------------------------------
# estimator

def build_correlation_volume(fa, fb):
    """All-pairs scaled dot products: ``(B, Ha, Wa, Hb, Wb)``."""
    if fa.dim() != 4 or fb.dim() != 4 or fa.shape[:2] != fb.shape[:2]:
        raise ShapeError("correlation needs (B, C, H, W) maps with equal B and C")
    c = fa.shape[1]
    return torch.einsum("bcij,bckl->bijkl", fa, fb) / math.sqrt(c)


class EstimatorEncoder(nn.Module):
    """Three stride-2 conv layers; feature ``u`` sits on pixel ``8 * u``."""

    def __init__(self, channels=(16, 32, 64), in_channels=3):
        super().__init__()
        layers = []
        prev = in_channels
        for c in channels:
            layers.append(nn.Sequential(
                nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.InstanceNorm2d(c), nn.ReLU(),
                nn.Conv2d(c, c, 3, padding=1), nn.InstanceNorm2d(c), nn.ReLU(),
            ))
            prev = c
        self.layers = nn.ModuleList(layers)

    def forward(self, x, f_s=None, adapters=None):
        feats = []
        x = x - 0.5
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if adapters is not None and f_s is not None:
                x = x + adapters[i](x, f_s)
            feats.append(x)
        return feats


class RegressorBlock(nn.Module):
    """3x3 conv mixing block; strided blocks shrink the map towards 2x2."""

    def __init__(self, channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.skip = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()

    def forward(self, x):
        return torch.relu(self.skip(x) + self.conv2(torch.relu(self.conv1(x))))


@dataclass
class EstimatorState:
    features: list
    displacement: torch.Tensor          # (B, 4, 2) working-resolution pixels
    iteration: int
    history: list = field(default_factory=list)   # displacement after each iteration
    homographies: list = field(default_factory=list)
    degenerate: torch.Tensor | None = None         # (B,) samples that hit a fallback
    converged: torch.Tensor | None = None          # (B,) samples stopped by the tolerance


class HomographyEstimator(nn.Module):
    def __init__(self, channels=(16, 32, 64), iterations=6, radius=3, levels=2,
                 size=128, hidden=64, tolerance=0.0):
        super().__init__()
        self.encoder = EstimatorEncoder(channels)
        self.iterations = iterations
        self.tolerance = tolerance
        self.radius = radius
        self.levels = levels
        self.size = size
        win = (2 * radius + 1) ** 2
        self.inp = nn.Sequential(nn.Conv2d(levels * win + 2, hidden, 1), nn.ReLU())
        n_down = int(math.log2(size // FEATURE_STRIDE)) - 1
        self.blocks = nn.Sequential(
            RegressorBlock(hidden, 1),
            *[RegressorBlock(hidden, 2 if i < n_down else 1) for i in range(3)],
        )
        self.head = nn.Linear(hidden * 4, 8)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.estimator_channels, cfg.estimator_iterations, cfg.corr_radius,
                   cfg.corr_levels, cfg.estimator_size, tolerance=cfg.estimator_tolerance)

    def _pyramid(self, f_t, f_rgb):
        b, _, h, w = f_t.shape
        corr = build_correlation_volume(f_t, f_rgb)
        corr = corr.reshape(b * h * w, 1, *f_rgb.shape[-2:])
        pyr = [corr]
        for _ in range(self.levels - 1):
            pyr.append(F.avg_pool2d(pyr[-1], 2))
        return pyr

    def _lookup(self, pyr, coords):
        b, h, w, _ = coords.shape
        r = self.radius
        off = torch.arange(-r, r + 1, dtype=coords.dtype, device=coords.device)
        dy, dx = torch.meshgrid(off, off, indexing="ij")
        delta = torch.stack([dx, dy], dim=-1)
        out = []
        for lvl, corr in enumerate(pyr):
            hl, wl = corr.shape[-2:]
            c = coords.reshape(b * h * w, 1, 1, 2) / 2 ** lvl + delta[None]
            scale = torch.tensor([2.0 / max(wl - 1, 1), 2.0 / max(hl - 1, 1)],
                                 dtype=c.dtype, device=c.device)
            grid = (c * scale - 1).to(corr.dtype)
            s = F.grid_sample(corr, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
            out.append(s.reshape(b, h, w, -1))
        return torch.cat(out, dim=-1).permute(0, 3, 1, 2)

    def forward(self, rgb, thermal, f_s=None, adapters=None, iterations=None):
        """Estimate corner displacements on ``size x size`` inputs.

        ``rgb`` and ``thermal`` are ``(B, 3, S, S)``. Returns the final
        :class:`EstimatorState`; ``history`` holds every iterate.

        Outside training, a sample whose proposed update moves the corners by
        less than ``tolerance`` pixels on average is converged: it keeps its
        current iterate for the remaining iterations.
        """
        k_max = self.iterations if iterations is None else iterations
        s = rgb.shape[-1]
        f_rgb = self.encoder(rgb, f_s, adapters)
        f_t = self.encoder(thermal, f_s, adapters)
        pyr = self._pyramid(f_t[-1], f_rgb[-1])
        b, _, hf, wf = f_t[-1].shape
        dev = rgb.device
        ys, xs = torch.meshgrid(torch.arange(hf, dtype=torch.float64, device=dev),
                                torch.arange(wf, dtype=torch.float64, device=dev), indexing="ij")
        grid_pix = torch.stack([xs, ys], dim=-1).reshape(1, -1, 2) * FEATURE_STRIDE
        corners = corner_grid(s, s, device=dev).expand(b, 4, 2)
        disp = torch.zeros(b, 4, 2, dtype=torch.float64, device=dev)
        hom = torch.eye(3, dtype=torch.float64, device=dev).expand(b, 3, 3)
        bad = torch.zeros(b, dtype=torch.bool, device=dev)
        done = torch.zeros(b, dtype=torch.bool, device=dev)
        stop_early = not self.training and self.tolerance > 0
        state = EstimatorState(features=[f_rgb, f_t], displacement=disp, iteration=0,
                               degenerate=bad, converged=done)
        for k in range(k_max):
            disp = disp.detach()
            hom = hom.detach()
            mapped = apply_h(hom, grid_pix.expand(b, -1, 2))
            coords = (mapped / FEATURE_STRIDE).reshape(b, hf, wf, 2)
            corr = self._lookup(pyr, coords)
            flow = ((mapped - grid_pix) / FEATURE_STRIDE).reshape(b, hf, wf, 2).permute(0, 3, 1, 2)
            x = torch.cat([corr, flow.to(corr.dtype)], dim=1)
            x = self.blocks(self.inp(x))
            x = F.adaptive_avg_pool2d(x, 2).flatten(1)
            delta = self.head(x).reshape(b, 4, 2).to(torch.float64)
            if stop_early:
                done = done | (delta.detach().norm(dim=-1).mean(dim=-1) < self.tolerance)
                delta = torch.where(done[:, None, None], torch.zeros_like(delta), delta)
            cand = disp + delta
            ok = quad_ok(corners + cand)
            if not bool(ok.all()):
                bad = bad | ~ok
                cand = torch.where(ok[:, None, None], cand, disp)
            disp = cand
            hom = dlt(corners, corners + disp)
            state.history.append(disp)
            state.homographies.append(hom)
        state.displacement = disp
        state.iteration = k_max
        state.degenerate = bad
        state.converged = done
        return state


def to_estimator_input(img, size):
    """Resize ``(B, C, H, W)`` to ``size``, corner-aligned; 1-channel inputs are tiled to 3."""
    if img.shape[1] == 1:
        img = img.expand(-1, 3, -1, -1)
    if img.shape[-2:] != (size, size):
        img = F.interpolate(img, size=(size, size), mode="bilinear", align_corners=True)
    return img


def scaling_t(sx, sy, b, device=None):
    m = torch.zeros(b, 3, 3, dtype=torch.float64, device=device)
    m[:, 0, 0] = sx
    m[:, 1, 1] = sy
    m[:, 2, 2] = 1.0
    return m


def work_to_full(h_work, size, rgb_hw, t_hw):
    """Lift a working-grid homography to full-resolution thermal -> RGB pixels."""
    b = h_work.shape[0]
    s_rgb = scaling_t((rgb_hw[1] - 1) / (size - 1), (rgb_hw[0] - 1) / (size - 1), b, h_work.device)
    s_t_inv = scaling_t((size - 1) / (t_hw[1] - 1), (size - 1) / (t_hw[0] - 1), b, h_work.device)
    h = s_rgb @ h_work @ s_t_inv
    return h / h[:, 2:3, 2:3]


def full_to_work(h_full, size, rgb_hw, t_hw):
    return Homography(np.diag([(size - 1) / (rgb_hw[1] - 1), (size - 1) / (rgb_hw[0] - 1), 1.0])
                      @ h_full.m
                      @ np.diag([(t_hw[1] - 1) / (size - 1), (t_hw[0] - 1) / (size - 1), 1.0]))


def estimate_homography(rgb, thermal, estimator, f_s=None, adapters=None, adapters_disabled=False,
                        return_state=False):
    """Thermal -> RGB homographies ``(B, 3, 3)`` at the inputs' full resolution."""
    size = estimator.size
    dtype = next(estimator.parameters()).dtype
    a = to_estimator_input(rgb, size).to(dtype)
    t = to_estimator_input(thermal, size).to(dtype)
    if adapters_disabled:
        f_s, adapters = None, None
    state = estimator(a, t, f_s, adapters)
    h = work_to_full(state.homographies[-1], size, rgb.shape[-2:], thermal.shape[-2:])
    return (h, state) if return_state else h


# ---------------------------------------------------------------------------
# pretraining on synthetic pairs

def sample_targets(sample, size):
    """Working-grid corner displacement of a sample's true homography."""
    hw_rgb, hw_t = sample.rgb.shape[1:], sample.thermal.shape[1:]
    h = full_to_work(sample.true_homography, size, hw_rgb, hw_t)
    c = image_corners(size, size)
    from .core import apply_homography

    return apply_homography(h, c) - c


def prepare_pairs(samples, size):
    """Stack samples into estimator tensors ``(rgb, thermal, target_disp)``."""
    rgbs, ths, tgts = [], [], []
    for s in samples:
        if s.true_homography is None:
            raise ValueError(f"{s.id}: sample has no true homography")
        rgbs.append(to_estimator_input(torch.from_numpy(s.rgb)[None], size)[0])
        ths.append(to_estimator_input(torch.from_numpy(s.thermal)[None], size)[0])
        tgts.append(torch.from_numpy(sample_targets(s, size)))
    return torch.stack(rgbs).float(), torch.stack(ths).float(), torch.stack(tgts)


def corner_errors(disps, target):
    """Mean corner distance per sample for each iterate: ``(K, B)``."""
    return torch.stack([(d - target).norm(dim=-1).mean(dim=-1) for d in disps])


@torch.no_grad()
def evaluate_estimator(estimator, pairs, batch_size=32):
    """Per-iteration mean corner error on prepared pairs; returns ``(K+1, N)``.

    Row 0 is the identity initialisation.
    """
    rgb, th, tgt = pairs
    estimator.eval()
    rows = []
    for i in range(0, len(rgb), batch_size):
        st = estimator(rgb[i:i + batch_size], th[i:i + batch_size])
        t = tgt[i:i + batch_size]
        zero = torch.zeros_like(t)
        rows.append(corner_errors([zero] + st.history, t))
    return torch.cat(rows, dim=1)


def pretrain_estimator(train_samples, cfg, val_samples=None, log=None, estimator=None):
    """Train the estimator to regress true corner displacements.

    Loss is the L1 corner error summed over iterations. Returns
    ``(estimator, history)``; ``history`` has one dict per epoch.
    """
    torch.manual_seed(cfg.rng_seed)
    if estimator is None:
        estimator = HomographyEstimator.from_config(cfg)
    train = prepare_pairs(train_samples, estimator.size)
    val = prepare_pairs(val_samples, estimator.size) if val_samples else None
    n = len(train[0])
    bs = cfg.pretrain_batch_size
    steps_per_epoch = math.ceil(n / bs)
    total = max(1, steps_per_epoch * cfg.pretrain_epochs)
    opt = torch.optim.AdamW(estimator.parameters(), lr=cfg.pretrain_lr,
                            weight_decay=cfg.pretrain_weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: 0.5 * (1 + math.cos(math.pi * min(step, total) / total)))
    history = []
    if val is not None:
        init_err = evaluate_estimator(estimator, val)
        history.append({"epoch": 0, "loss": float("nan"),
                        "val_mace": float(init_err[-1].mean()),
                        "identity_mace": float(init_err[0].mean())})
        if log:
            log(**history[-1])
    for epoch in range(1, cfg.pretrain_epochs + 1):
        estimator.train()
        order = np.random.default_rng([cfg.rng_seed, epoch]).permutation(n)
        total_loss = 0.0
        for i in range(0, n, bs):
            idx = torch.from_numpy(order[i:i + bs])
            st = estimator(train[0][idx], train[1][idx])
            tgt = train[2][idx]
            loss = sum((d - tgt).abs().mean() for d in st.history)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(estimator.parameters(), 1.0)
            opt.step()
            sched.step()
            total_loss += loss.item() * len(idx)
        rec = {"epoch": epoch, "loss": total_loss / n}
        if val is not None:
            err = evaluate_estimator(estimator, val)
            rec["val_mace"] = float(err[-1].mean())
            rec["identity_mace"] = float(err[0].mean())
        history.append(rec)
        if log:
            log(**rec)
    estimator.eval()
    return estimator, history
