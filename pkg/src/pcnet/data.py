"""Dataset loading, synthetic misalignment and toy RGB-T scenes.

On-disk layout (VT5000 style)::

    root/RGB/<id>.<ext>   root/T/<id>.<ext>   root/GT/<id>.<ext>
    root/H/<id>.txt       (optional, 9 reals: true thermal->RGB homography)
    root/attributes.txt   (optional, ``id: TAG1,TAG2``)
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .core import (
    Homography, format_homography, image_corners, parse_homography,
)
from .errors import (
    DataError, DecodeError, DegenerateHomography, MissingGroundTruth, MissingModality,
)
from .geometry import solve_dlt, warp_array

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class Sample:
    id: str
    rgb: np.ndarray                      # (3, H, W) float32 in [0, 1]
    thermal: np.ndarray                  # (1 or 3, H', W') float32 in [0, 1]
    gt_mask: np.ndarray | None = None    # (1, H, W) float32 in {0, 1}
    attributes: frozenset = frozenset()
    true_homography: Homography | None = None

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DataError(f"{self.id}: rgb must be (3, H, W), got {self.rgb.shape}")
        if self.thermal.ndim != 3 or self.thermal.shape[0] not in (1, 3):
            raise DataError(f"{self.id}: thermal must be (1|3, H, W), got {self.thermal.shape}")
        if self.gt_mask is not None and self.gt_mask.shape != (1,) + self.rgb.shape[1:]:
            raise DataError(f"{self.id}: gt shape {self.gt_mask.shape} does not match rgb")
        for name in ("rgb", "thermal"):
            a = getattr(self, name)
            if min(a.shape[1:]) < 8:
                raise DataError(f"{self.id}: {name} smaller than 8 px")

    def replace(self, **kw) -> "Sample":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class MisalignParams:
    """Sampling intervals ``(lo, hi)`` for the random thermal misalignment.

    Rotation is in degrees, translation and perspective jitter are fractions
    of the image side, scale is multiplicative. ``translation_y`` defaults to
    the ``translation`` interval.
    """

    rotation: tuple = (-10.0, 10.0)
    translation: tuple = (-0.1, 0.1)
    scale: tuple = (0.9, 1.1)
    perspective: tuple = (-0.02, 0.02)
    translation_y: tuple | None = None

    def __post_init__(self):
        if self.translation_y is None:
            object.__setattr__(self, "translation_y", self.translation)
        for name in ("rotation", "translation", "translation_y", "scale", "perspective"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo <= hi:
                raise ValueError(f"{name}: empty interval ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))
        if self.scale[0] <= 0:
            raise ValueError("scale must stay positive")

    @classmethod
    def identity(cls) -> "MisalignParams":
        return cls((0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (0.0, 0.0))

    @classmethod
    def symmetric(cls, rotation_deg=10.0, translation_frac=0.1, scale_min=0.9,
                  scale_max=1.1, perspective_frac=0.02) -> "MisalignParams":
        return cls((-rotation_deg, rotation_deg), (-translation_frac, translation_frac),
                   (scale_min, scale_max), (-perspective_frac, perspective_frac))

    @classmethod
    def from_config(cls, cfg) -> "MisalignParams":
        return cls.symmetric(cfg.rotation_deg, cfg.translation_frac, cfg.scale_min,
                             cfg.scale_max, cfg.perspective_frac)


# ---------------------------------------------------------------------------
# image IO

def read_image(path, mode=None) -> np.ndarray:
    """Decode an image file into a ``(C, H, W)`` float32 array in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            im.load()
            if mode is None:
                mode = "L" if im.mode in ("L", "I;16", "I", "F", "1", "LA") else "RGB"
            if im.mode in ("I;16", "I") and mode == "L":
                arr = np.asarray(im, dtype=np.float64)
                arr = arr / max(arr.max(), 1.0)
                return arr[None].astype(np.float32)
            arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise DecodeError(f"cannot decode {path}: {e}") from e
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def to_uint8(arr) -> np.ndarray:
    """Quantise [0, 1] values to 8 bit, rounding half up."""
    return np.floor(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path, arr):
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    PILImage.fromarray(to_uint8(arr)).save(path)


def _stems(folder: Path) -> dict:
    if not folder.is_dir():
        return {}
    out = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_EXTS and p.is_file():
            out.setdefault(p.stem, p)
    return out


def read_attributes(path) -> dict:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise DataError(f"{path}: malformed attribute line {raw!r}")
        key, tags = line.split(":", 1)
        out[key.strip()] = frozenset(t.strip() for t in tags.split(",") if t.strip())
    return out


def load_vt_dataset(root, split="test") -> list[Sample]:
    """Load every ``RGB/T/GT`` triple under ``root``, sorted by id.

    A test split tolerates missing ground truth (``gt_mask=None``); a train
    split does not.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root)
    rgb, th, gt = _stems(root / "RGB"), _stems(root / "T"), _stems(root / "GT")
    ids = sorted(set(rgb) | set(th))
    if not ids:
        raise DataError(f"no images under {root}/RGB or {root}/T")
    attrs = read_attributes(root / "attributes.txt") if (root / "attributes.txt").exists() else {}
    hdir = root / "H"
    samples = []
    for sid in ids:
        if sid not in rgb:
            raise MissingModality(f"{sid}: no RGB image")
        if sid not in th:
            raise MissingModality(f"{sid}: no thermal image")
        mask = None
        if sid in gt:
            mask = (read_image(gt[sid], "L") >= 0.5).astype(np.float32)
        elif split == "train":
            raise MissingGroundTruth(f"{sid}: no ground-truth mask")
        h = None
        hp = hdir / f"{sid}.txt"
        if hp.exists():
            try:
                h = parse_homography(hp.read_text())
            except (ValueError, DegenerateHomography) as e:
                raise DataError(f"{sid}: bad homography file: {e}") from e
        samples.append(Sample(
            id=sid,
            rgb=read_image(rgb[sid], "RGB"),
            thermal=read_image(th[sid]),
            gt_mask=mask,
            attributes=attrs.get(sid, frozenset()),
            true_homography=h,
        ))
    return samples


def save_dataset(samples, root):
    """Materialise samples into the on-disk layout (inverse of the loader)."""
    root = Path(root)
    for sub in ("RGB", "T", "GT", "H"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    attr_lines = []
    for s in samples:
        write_image(root / "RGB" / f"{s.id}.png", s.rgb)
        write_image(root / "T" / f"{s.id}.png", s.thermal)
        if s.gt_mask is not None:
            write_image(root / "GT" / f"{s.id}.png", s.gt_mask)
        if s.true_homography is not None:
            (root / "H" / f"{s.id}.txt").write_text(format_homography(s.true_homography))
        if s.attributes:
            attr_lines.append(f"{s.id}: {','.join(sorted(s.attributes))}")
    if attr_lines:
        (root / "attributes.txt").write_text("\n".join(attr_lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic misalignment

def sample_homography(params: MisalignParams, height: int, width: int,
                      rng: np.random.Generator) -> Homography:
    """Draw a thermal->RGB homography: similarity about the centre plus corner jitter."""
    for _ in range(8):
        theta = math.radians(rng.uniform(*params.rotation))
        lo, hi = params.scale
        s = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        tx = rng.uniform(*params.translation) * width
        ty = rng.uniform(*params.translation_y) * height
        jitter = rng.uniform(*params.perspective, size=(4, 2)) * np.array([width, height])
        a, b = s * math.cos(theta), s * math.sin(theta)
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        affine = np.array([
            [a, -b, tx + (cx - (a * cx - b * cy))],
            [b, a, ty + (cy - (b * cx + a * cy))],
            [0.0, 0.0, 1.0],
        ])
        if not np.any(jitter):
            return Homography(affine)
        corners = image_corners(height, width)
        moved = corners @ affine[:2, :2].T + affine[:2, 2] + jitter
        try:
            return solve_dlt(corners, moved)
        except DegenerateHomography:
            continue
    raise DegenerateHomography("could not sample a non-degenerate quadrilateral in 8 draws")


def synthesize_misalignment(sample: Sample, params: MisalignParams, seed: int) -> Sample:
    """Replace the (aligned) thermal image by a randomly warped copy.

    The drawn homography is stored as ``true_homography``; out-of-frame
    pixels are filled with 0.
    """
    if sample.thermal.shape[1:] != sample.rgb.shape[1:]:
        raise DataError(f"{sample.id}: thermal must be aligned with rgb before misalignment")
    _, h, w = sample.thermal.shape
    hom = sample_homography(params, h, w, np.random.default_rng(seed))
    if np.array_equal(hom.m, np.eye(3)):
        warped = sample.thermal.copy()
    else:
        warped, _ = warp_array(sample.thermal, hom)
        warped = warped.astype(np.float32)
    return sample.replace(thermal=warped, true_homography=hom)


# ---------------------------------------------------------------------------
# toy scenes

@dataclass(frozen=True)
class ToySceneSpec:
    image_size: int = 128
    n_objects: int = 3
    misalign: MisalignParams = field(default_factory=MisalignParams)
    rgb_contrast: tuple = (1.0, 1.0)   # per-scene shape/background contrast interval

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        lo, hi = (float(v) for v in self.rgb_contrast)
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"rgb_contrast must satisfy 0 <= lo <= hi <= 1, got {self.rgb_contrast}")
        object.__setattr__(self, "rgb_contrast", (lo, hi))


FG_FRACTION = (0.01, 0.6)
_KINDS = ("ellipse", "rectangle", "triangle")


def shape_mask(shape: dict, size: int) -> np.ndarray:
    """Binary (size, size) mask of one layout shape."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy, rx, ry, ang = shape["cx"], shape["cy"], shape["rx"], shape["ry"], shape["angle"]
    c, s = math.cos(ang), math.sin(ang)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    kind = shape["kind"]
    if kind == "ellipse":
        m = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    elif kind == "rectangle":
        m = (np.abs(u) <= rx) & (np.abs(v) <= ry)
    else:
        # isoceles triangle, apex at v = -ry, base at v = +ry
        t = (v + ry) / (2 * ry)
        m = (t >= 0) & (t <= 1) & (np.abs(u) <= rx * t)
    return m


def toy_scene_layout(spec: ToySceneSpec, rng: np.random.Generator) -> list[dict]:
    n = spec.image_size
    shapes = []
    for _ in range(spec.n_objects):
        rx = rng.uniform(0.08, 0.22) * n
        ry = rx * rng.uniform(0.6, 1.4)
        r = max(rx, ry)
        shapes.append(dict(
            kind=_KINDS[rng.integers(len(_KINDS))],
            cx=rng.uniform(r, n - 1 - r),
            cy=rng.uniform(r, n - 1 - r),
            rx=rx, ry=ry,
            angle=rng.uniform(0, math.pi),
            color=_saturated_color(rng),
        ))
    return shapes


def _saturated_color(rng):
    hue = rng.uniform(0, 6)
    i, f = int(hue) % 6, hue - int(hue)
    table = [(1, f, 0), (1 - f, 1, 0), (0, 1, f), (0, 1 - f, 1), (f, 0, 1), (1, 0, 1 - f)]
    lo, hi = 0.15, rng.uniform(0.8, 1.0)
    return np.array([lo + (hi - lo) * v for v in table[i]])


def _background(rng, n):
    coarse = rng.uniform(0.25, 0.75, size=(3, 5, 5))
    grid = np.linspace(0, 4, n)
    i0 = np.minimum(grid.astype(int), 3)
    f = grid - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    bg = rows[:, :, i0] * (1 - f) + rows[:, :, i0 + 1] * f
    ys, xs = np.mgrid[0:n, 0:n]
    freq = rng.uniform(0.15, 0.5)
    ang = rng.uniform(0, math.pi)
    stripes = 0.08 * np.sin(freq * (xs * math.cos(ang) + ys * math.sin(ang)))
    bg = bg * 0.6 + 0.2 + stripes[None] + rng.normal(0, 0.04, size=bg.shape)
    return np.clip(bg, 0, 1)


THERMAL_NOISE = 0.05
THERMAL_NOISE_BLUR = 1.0   # px; thermal optics are low-pass, so the noise is too


def smooth_noise(rng, shape, std=THERMAL_NOISE, blur=THERMAL_NOISE_BLUR):
    """Gaussian noise blurred by a separable Gaussian and rescaled to ``std``."""
    r = int(math.ceil(3 * blur))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / blur) ** 2)
    k /= k.sum()
    z = np.pad(rng.normal(0.0, 1.0, size=shape), r, mode="reflect")
    n, m = shape
    z = sum(w * z[i:i + n, :] for i, w in enumerate(k))
    z = sum(w * z[:, i:i + m] for i, w in enumerate(k))
    return z * (std / float((k ** 2).sum()))


def generate_toy_scene(spec: ToySceneSpec, seed: int, sample_id: str | None = None) -> Sample:
    """Coloured shapes on a textured background, with a hot-object thermal view.

    Thermal is ``0.2 + 0.7 * gt`` plus spatially smoothed noise of std 0.05,
    rendered on the aligned scene, then misaligned with ``spec.misalign``.
    With ``spec.rgb_contrast`` below 1 the shapes are blended towards the
    background in RGB only (dim or camouflaged objects), so the thermal view
    carries information the RGB lacks. Deterministic in ``(spec, seed)``.
    """
    rng = np.random.default_rng(seed)
    n = spec.image_size
    while True:
        layout = toy_scene_layout(spec, rng)
        masks = [shape_mask(s, n) for s in layout]
        gt = np.logical_or.reduce(masks)
        if FG_FRACTION[0] <= gt.mean() <= FG_FRACTION[1]:
            break
    bg = rgb = _background(rng, n)
    for s, m in zip(layout, masks):
        shade = s["color"][:, None, None] * (1.0 + rng.normal(0, 0.03, size=(1, n, n)))
        rgb = np.where(m[None], shade, rgb)
    rgb = np.clip(rgb, 0, 1)
    gt = gt.astype(np.float64)[None]
    thermal = np.clip(0.2 + 0.7 * gt + smooth_noise(rng, gt.shape[1:])[None], 0, 1)
    mis_seed = int(rng.integers(2**31 - 1))
    if spec.rgb_contrast != (1.0, 1.0):
        c = rng.uniform(*spec.rgb_contrast)
        rgb = bg + c * (rgb - bg)
    aligned = Sample(
        id=sample_id if sample_id is not None else f"{seed:06d}",
        rgb=rgb.astype(np.float32),
        thermal=thermal.astype(np.float32),
        gt_mask=gt.astype(np.float32),
    )
    return synthesize_misalignment(aligned, spec.misalign, mis_seed)


def generate_toy_dataset(spec: ToySceneSpec, count: int, seed: int) -> list[Sample]:
    """``count`` toy scenes with ids ``00000..``; scene ``i`` uses seed ``seed * 1_000_003 + i``."""
    return [generate_toy_scene(spec, seed * 1_000_003 + i, sample_id=f"{i:05d}")
            for i in range(count)]
