# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel kernels. Mirrors pcnet._fallback exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, sqrt, nearbyint

cnp.import_array()

cdef double SPACING = np.spacing(1.0)


def warp_bilinear(const double[:, :, ::1] img, const double[:, ::1] m, out_hw=None):
    """Inverse-map bilinear warp: out[c, y, x] = img[c] sampled at m @ (x, y, 1)."""
    cdef Py_ssize_t C = img.shape[0], H = img.shape[1], W = img.shape[2]
    cdef Py_ssize_t OH = H, OW = W
    if out_hw is not None:
        OH, OW = out_hw
    out_arr = np.zeros((C, OH, OW), dtype=np.float64)
    valid_arr = np.zeros((OH, OW), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] valid = valid_arr
    cdef Py_ssize_t x, y, c, x0, y0
    cdef double w, sx, sy, fx, fy
    cdef double xmax = W - 1, ymax = H - 1
    for y in range(OH):
        for x in range(OW):
            w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
            if fabs(w) <= 1e-12:
                continue
            sx = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
            sy = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
            if not (sx >= 0.0 and sx <= xmax and sy >= 0.0 and sy <= ymax):
                continue
            x0 = <Py_ssize_t>floor(sx)
            y0 = <Py_ssize_t>floor(sy)
            if x0 > W - 2:
                x0 = W - 2
            if y0 > H - 2:
                y0 = H - 2
            fx = sx - x0
            fy = sy - y0
            valid[y, x] = 1.0
            for c in range(C):
                out[c, y, x] = ((1.0 - fy) * ((1.0 - fx) * img[c, y0, x0] + fx * img[c, y0, x0 + 1])
                                + fy * ((1.0 - fx) * img[c, y0 + 1, x0] + fx * img[c, y0 + 1, x0 + 1]))
    return out_arr, valid_arr


cdef double _object_score(const double[:, ::1] pred, const double[:, ::1] gt, bint fg):
    # mean/std of the (fg-masked or bg-masked) prediction over the selected region
    cdef Py_ssize_t H = pred.shape[0], W = pred.shape[1], i, j
    cdef double s = 0.0, ss = 0.0, v, mean, sd
    cdef long n = 0
    for i in range(H):
        for j in range(W):
            if (gt[i, j] > 0.5) == fg:
                v = pred[i, j] * gt[i, j] if fg else (1.0 - pred[i, j]) * (1.0 - gt[i, j])
                s += v
                n += 1
    if n == 0:
        return 0.0
    mean = s / n
    for i in range(H):
        for j in range(W):
            if (gt[i, j] > 0.5) == fg:
                v = pred[i, j] * gt[i, j] if fg else (1.0 - pred[i, j]) * (1.0 - gt[i, j])
                ss += (v - mean) * (v - mean)
    sd = sqrt(ss / (n - 1)) if n > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + sd + SPACING)


cdef double _ssim(const double[:, ::1] pred, const double[:, ::1] gt,
                  Py_ssize_t r0, Py_ssize_t r1, Py_ssize_t c0, Py_ssize_t c1):
    cdef Py_ssize_t i, j
    cdef long n = (r1 - r0) * (c1 - c0)
    cdef double mx = 0.0, my = 0.0, vx = 0.0, vy = 0.0, cxy = 0.0, a, b, dx, dy
    if n == 0:
        return 0.0
    for i in range(r0, r1):
        for j in range(c0, c1):
            mx += pred[i, j]
            my += gt[i, j]
    mx /= n
    my /= n
    if n > 1:
        for i in range(r0, r1):
            for j in range(c0, c1):
                dx = pred[i, j] - mx
                dy = gt[i, j] - my
                vx += dx * dx
                vy += dy * dy
                cxy += dx * dy
        vx /= n - 1
        vy /= n - 1
        cxy /= n - 1
    a = 4.0 * mx * my * cxy
    b = (mx * mx + my * my) * (vx + vy)
    if a != 0.0:
        return a / (b + SPACING)
    if b == 0.0:
        return 1.0 if mx == my else 0.0
    return 0.0


def s_measure(const double[:, ::1] pred, const double[:, ::1] gt, double alpha=0.5):
    cdef Py_ssize_t H = pred.shape[0], W = pred.shape[1], i, j
    cdef double gsum = 0.0, psum = 0.0, u, obj, region, score, sx = 0.0, sy = 0.0
    cdef Py_ssize_t cx, cy
    cdef double area = <double>(H * W), w1, w2, w3, w4
    for i in range(H):
        for j in range(W):
            gsum += gt[i, j]
            psum += pred[i, j]
            if gt[i, j] > 0.5:
                sy += i
                sx += j
    u = gsum / area
    if gsum == 0.0:
        return 1.0 - psum / area
    if gsum == area:
        return psum / area
    obj = u * _object_score(pred, gt, True) + (1.0 - u) * _object_score(pred, gt, False)
    cx = <Py_ssize_t>nearbyint(sx / gsum) + 1
    cy = <Py_ssize_t>nearbyint(sy / gsum) + 1
    w1 = cx * cy / area
    w2 = cy * (W - cx) / area
    w3 = (H - cy) * cx / area
    w4 = 1.0 - w1 - w2 - w3
    region = (w1 * _ssim(pred, gt, 0, cy, 0, cx) + w2 * _ssim(pred, gt, 0, cy, cx, W)
              + w3 * _ssim(pred, gt, cy, H, 0, cx) + w4 * _ssim(pred, gt, cy, H, cx, W))
    score = alpha * obj + (1.0 - alpha) * region
    return score if score > 0.0 else 0.0
