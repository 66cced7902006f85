"""Vectorised numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np

SPACING = np.spacing(1.0)


def warp_bilinear(img, m, out_hw=None):
    img = np.ascontiguousarray(img, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    c, h, w = img.shape
    oh, ow = (h, w) if out_hw is None else out_hw
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    den = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    ok = np.abs(den) > 1e-12
    den = np.where(ok, den, 1.0)
    sx = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / den
    sy = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / den
    ok &= (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.where(ok, sx, 0.0)
    sy = np.where(ok, sy, 0.0)
    x0 = np.minimum(np.floor(sx).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(sy).astype(np.intp), h - 2)
    fx = sx - x0
    fy = sy - y0
    out = ((1.0 - fy) * ((1.0 - fx) * img[:, y0, x0] + fx * img[:, y0, x0 + 1])
           + fy * ((1.0 - fx) * img[:, y0 + 1, x0] + fx * img[:, y0 + 1, x0 + 1]))
    out = np.where(ok, out, 0.0)
    return out, ok.astype(np.float64)


def _object_score(values, n):
    if n == 0:
        return 0.0
    mean = values.sum() / n
    sd = np.sqrt(((values - mean) ** 2).sum() / (n - 1)) if n > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + sd + SPACING)


def _ssim(pred, gt):
    n = pred.size
    if n == 0:
        return 0.0
    mx = pred.sum() / n
    my = gt.sum() / n
    if n > 1:
        dx = pred - mx
        dy = gt - my
        vx = (dx * dx).sum() / (n - 1)
        vy = (dy * dy).sum() / (n - 1)
        cxy = (dx * dy).sum() / (n - 1)
    else:
        vx = vy = cxy = 0.0
    a = 4.0 * mx * my * cxy
    b = (mx * mx + my * my) * (vx + vy)
    if a != 0.0:
        return a / (b + SPACING)
    if b == 0.0:
        return 1.0 if mx == my else 0.0
    return 0.0


def s_measure(pred, gt, alpha=0.5):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    h, w = gt.shape
    area = float(h * w)
    fg = gt > 0.5
    gsum = gt.sum()
    if gsum == 0.0:
        return 1.0 - pred.sum() / area
    if gsum == area:
        return pred.sum() / area
    u = gsum / area
    obj = (u * _object_score(pred[fg] * gt[fg], fg.sum())
           + (1.0 - u) * _object_score((1.0 - pred[~fg]) * (1.0 - gt[~fg]), (~fg).sum()))
    rows, cols = np.nonzero(fg)
    cy = int(np.round(rows.sum() / gsum)) + 1
    cx = int(np.round(cols.sum() / gsum)) + 1
    w1 = cx * cy / area
    w2 = cy * (w - cx) / area
    w3 = (h - cy) * cx / area
    w4 = 1.0 - w1 - w2 - w3
    region = (w1 * _ssim(pred[:cy, :cx], gt[:cy, :cx]) + w2 * _ssim(pred[:cy, cx:], gt[:cy, cx:])
              + w3 * _ssim(pred[cy:, :cx], gt[cy:, :cx]) + w4 * _ssim(pred[cy:, cx:], gt[cy:, cx:]))
    score = alpha * obj + (1.0 - alpha) * region
    return score if score > 0.0 else 0.0
