"""Double-precision DLT and array warping used by data generation and export."""
import numpy as np

from . import kernels
from .core import Homography, normalize_homography
from .errors import DegenerateHomography

MAX_COND = 1e12


def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d <= 0:
        raise DegenerateHomography("coincident points")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _has_collinear_triple(pts, tol=1e-9):
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300) ** 2
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) <= tol * scale:
            return True
    return False


def solve_dlt(src, dst) -> Homography:
    """Homography taking the four ``src`` points onto the four ``dst`` points.

    Solves the 8x8 DLT system on Hartley-normalised coordinates.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DegenerateHomography("non-finite corners")
    if _has_collinear_triple(src) or _has_collinear_triple(dst):
        raise DegenerateHomography("three collinear corners")
    ts, td = _normalizer(src), _normalizer(dst)
    s = src @ ts[:2, :2].T + ts[:2, 2]
    d = dst @ td[:2, :2].T + td[:2, 2]
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for j in range(4):
        x, y = s[j]
        u, v = d[j]
        a[2 * j] = [x, y, 1, 0, 0, 0, -x * u, -y * u]
        a[2 * j + 1] = [0, 0, 0, x, y, 1, -x * v, -y * v]
        b[2 * j], b[2 * j + 1] = u, v
    if np.linalg.cond(a) > MAX_COND:
        raise DegenerateHomography("ill-conditioned DLT system")
    h = np.append(np.linalg.solve(a, b), 1.0).reshape(3, 3)
    m = np.linalg.inv(td) @ h @ ts
    if abs(m[2, 2]) < 1e-12 or abs(np.linalg.det(m)) < 1e-12:
        raise DegenerateHomography("singular homography")
    return normalize_homography(m)


def warp_array(img, h, out_hw=None):
    """Bilinear inverse-map warp of a ``(C, H, W)`` array.

    Output pixel ``p`` samples ``img`` at ``h @ p`` on an ``out_hw`` grid
    (default: the input size). Returns ``(warped, valid)``; pixels whose
    source coordinate leaves the frame are 0 and flagged invalid.
    """
    m = h.m if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    if abs(np.linalg.det(m)) <= 1e-12:
        raise DegenerateHomography("singular homography")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    out, valid = kernels.warp_bilinear(img, m, out_hw)
    return (out[0] if squeeze else out), valid
