"""Geometry value types and run configuration.

Homographies map target (thermal) pixel coordinates into source (RGB) pixel
coordinates. Pixel centres sit on integer coordinates, so the corners of an
``h x w`` image are ``(0, 0), (w-1, 0), (w-1, h-1), (0, h-1)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateHomography, PointAtInfinity

EPS = 1e-12


@dataclass(frozen=True)
class Homography:
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise DegenerateHomography(f"expected 3x3 matrix, got {m.shape}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.m, dtype=dtype)

    def __eq__(self, other):
        return isinstance(other, Homography) and np.array_equal(self.m, other.m)

    def __hash__(self):
        return hash(self.m.tobytes())

    def __repr__(self):
        rows = "; ".join(" ".join(f"{v:.6g}" for v in row) for row in self.m)
        return f"Homography([{rows}])"

    def apply(self, p):
        return apply_homography(self, p)

    def inverse(self) -> "Homography":
        return inverse(self)

    def det(self) -> float:
        return float(np.linalg.det(self.m))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


@dataclass(frozen=True)
class CornerDisplacement:
    """Pixel offsets of the four image corners (TL, TR, BR, BL)."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64).reshape(4, 2).copy()
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    def to_homography(self, height: int, width: int) -> Homography:
        from .geometry import solve_dlt

        src = image_corners(height, width)
        return solve_dlt(src, src + self.d)

    @classmethod
    def from_homography(cls, h: Homography, height: int, width: int):
        src = image_corners(height, width)
        return cls(apply_homography(h, src) - src)


def image_corners(height: int, width: int) -> np.ndarray:
    return np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]]
    )


def normalize_homography(m) -> Homography:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise DegenerateHomography(f"expected 3x3 matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DegenerateHomography("non-finite homography entries")
    if abs(m[2, 2]) < EPS:
        raise DegenerateHomography(f"|m[2][2]| = {abs(m[2, 2]):.3g} is below {EPS}")
    return Homography(m / m[2, 2])


def apply_homography(h, p):
    """Map a point ``(x, y)`` or an ``(N, 2)`` array of points through ``h``.

    Raises :class:`PointAtInfinity` when any projective denominator vanishes.
    """
    m = h.m if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if np.any(np.abs(w) <= EPS):
        raise PointAtInfinity("point maps to infinity")
    out = np.stack(
        [(m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w, (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w],
        axis=1,
    )
    return out[0] if single else out


def _check_invertible(m: np.ndarray):
    if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= EPS:
        raise DegenerateHomography("singular homography")


def compose(h1: Homography, h2: Homography) -> Homography:
    """Return ``h1 o h2``: apply ``h2`` first, then ``h1``."""
    _check_invertible(h1.m)
    _check_invertible(h2.m)
    prod = h1.m @ h2.m
    _check_invertible(prod)
    return normalize_homography(prod)


def inverse(h: Homography) -> Homography:
    _check_invertible(h.m)
    return normalize_homography(np.linalg.inv(h.m))


def translation(tx: float, ty: float) -> Homography:
    return Homography(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))


def scaling(sx: float, sy: float) -> Homography:
    return Homography(np.diag([float(sx), float(sy), 1.0]))


def rescale_homography(h: Homography, src_hw, dst_hw) -> Homography:
    """Conjugate a homography expressed on a ``src_hw`` grid onto a ``dst_hw`` grid.

    Both grids span the same field of view with corner pixels aligned.
    """
    (sh, sw), (dh, dw) = src_hw, dst_hw
    s = scaling((dw - 1) / (sw - 1), (dh - 1) / (sh - 1))
    return normalize_homography(s.m @ h.m @ np.linalg.inv(s.m))


def format_homography(h: Homography) -> str:
    return " ".join(repr(float(v)) for v in h.m.ravel()) + "\n"


def parse_homography(text: str) -> Homography:
    vals = [float(v) for v in text.split()]
    if len(vals) != 9:
        raise DegenerateHomography(f"expected 9 reals, got {len(vals)}")
    m = np.array(vals).reshape(3, 3)
    _check_invertible(m)
    return normalize_homography(m)


# ---------------------------------------------------------------------------
# run configuration

ABLATIONS = {
    "she": "disable_she",
    "adapter": "disable_adapter",
    "fft": "full_finetune_estimator",
    "iimc": "disable_iimc",
    "intra": "disable_intra",
    "semantics": "disable_semantics",
    "thermal": "thermal_as_rgb",
}


@dataclass
class RunConfig:
    # model
    input_size: int = 192
    backbone_channels: tuple = (32, 64, 128, 256)
    semantic_channels: int = 64
    adapter_dim: int = 16
    attention_dim: int = 64
    decoder_channels: int = 64
    max_tokens_side: int = 24
    # homography estimator
    estimator_size: int = 128
    estimator_channels: tuple = (16, 32, 64)
    estimator_iterations: int = 6
    corr_radius: int = 3
    corr_levels: int = 2
    estimator_tolerance: float = 0.75
    # loss
    bce_w: float = 1.0
    dice_w: float = 1.0
    # optimisation
    lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    pretrain_lr: float = 1e-3
    pretrain_weight_decay: float = 1e-4
    pretrain_batch_size: int = 8
    pretrain_epochs: int = 20
    checkpoint_every: int = 5
    # ablations
    disable_she: bool = False
    disable_adapter: bool = False
    disable_iimc: bool = False
    disable_intra: bool = False
    disable_semantics: bool = False
    thermal_as_rgb: bool = False
    full_finetune_estimator: bool = False
    # data
    train_root: str = ""
    test_root: str = ""
    pretrain_root: str = ""
    synth_count: int = 100
    synth_size: int = 192
    synth_objects: int = 3
    rotation_deg: float = 10.0
    translation_frac: float = 0.1
    scale_min: float = 0.9
    scale_max: float = 1.1
    perspective_frac: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.estimator_channels = tuple(int(c) for c in self.estimator_channels)
        if len(self.backbone_channels) != 4:
            raise ConfigError("backbone_channels needs exactly 4 entries")
        if len(self.estimator_channels) != 3:
            raise ConfigError("estimator_channels needs exactly 3 entries")
        positive = [
            "input_size", "semantic_channels", "adapter_dim", "attention_dim",
            "decoder_channels", "max_tokens_side", "estimator_size",
            "estimator_iterations", "corr_radius", "corr_levels", "batch_size",
            "pretrain_batch_size", "synth_count", "synth_size", "synth_objects",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if any(c <= 0 for c in self.backbone_channels + self.estimator_channels):
            raise ConfigError("channel counts must be positive")
        if self.input_size % 32:
            raise ConfigError("input_size must be divisible by 32")
        if self.estimator_size % 8:
            raise ConfigError("estimator_size must be divisible by 8")
        for name in ("lr", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "pretrain_epochs", "weight_decay", "pretrain_weight_decay",
                     "estimator_tolerance"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.scale_min <= 1.0 <= self.scale_max:
            raise ConfigError("scale range must contain 1")

    # -- ablation helpers
    def with_ablation(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return dataclasses.replace(self, **{ABLATIONS[name]: True})

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # -- serialisation
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val, _default_of(fields[key]))
        return cls(**values)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text, base)

    def save(self, path):
        Path(path).write_text(self.to_text())


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _parse_value(key, val, default):
    try:
        if isinstance(default, bool):
            low = val.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(val)
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            return tuple(int(v) for v in val.replace(",", " ").split())
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None


def paper_config() -> RunConfig:
    """Hyperparameters as published: 384 px inputs, 80 epochs."""
    return RunConfig(input_size=384, epochs=80, synth_size=384)
