"""Color math: power-law gamma, linear RGB <-> XYZ, XYZ <-> CIELAB, Delta E.

Scalar functions reject out-of-range input. The ``*_array`` variants work on
arrays shaped ``(3, ...)`` (channel first) and are what the rest of the
package uses on rasters.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 2.2


class ColorState(str, enum.Enum):
    SRGB = "srgb"
    LINEAR_RGB = "linear_rgb"
    XYZ = "xyz"
    LAB = "lab"


class DeltaEVariant(str, enum.Enum):
    # sqrt(dL^2 + da^2 + db^2)
    CIE76_EUCLIDEAN = "cie76"
    # |dL| + |da| + |db|, i.e. each term written as sqrt of a single square
    PAPER_L1 = "paper_l1"


@dataclass(frozen=True)
class WhitePoint:
    name: str
    xn: float
    yn: float
    zn: float

    def __post_init__(self):
        if min(self.xn, self.yn, self.zn) <= 0:
            raise ValueError(f"white point {self.name}: components must be > 0")
        if self.yn != 1.0:
            raise ValueError(f"white point {self.name}: Yn must be 1.0, got {self.yn}")

    def as_array(self) -> np.ndarray:
        return np.array([self.xn, self.yn, self.zn])


# CIE 1931 2-degree observer, Y normalized to 1 (ASTM E308 tables).
D65 = WhitePoint("D65", 0.95047, 1.0, 1.08883)
D50 = WhitePoint("D50", 0.96422, 1.0, 0.82521)
WHITE_POINTS = {"D65": D65, "D50": D50}

# IEC 61966-2-1 (sRGB / BT.709 primaries, D65 white), linear RGB -> XYZ.
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
if not np.allclose(SRGB_TO_XYZ @ XYZ_TO_SRGB, np.eye(3), rtol=0, atol=1e-9):
    raise RuntimeError("sRGB matrix inverse failed verification")

_EPS = (6.0 / 29.0) ** 3
_KAPPA = 3.0 * (6.0 / 29.0) ** 2
_LAB_OFFSET = 4.0 / 29.0


def white_point(name: str) -> WhitePoint:
    try:
        return WHITE_POINTS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown white point {name!r}; known: {sorted(WHITE_POINTS)}") from None


def _check_unit(v: float, what: str) -> None:
    if not (0.0 <= v <= 1.0) or not np.isfinite(v):
        raise ValueError(f"{what}: value {v!r} outside [0, 1]")


def gamma_decode(v: float, gamma: float = DEFAULT_GAMMA) -> float:
    """Encoded value -> linear value, ``v ** gamma``."""
    _check_unit(v, "gamma_decode")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return float(v) ** gamma


def gamma_encode(v: float, gamma: float = DEFAULT_GAMMA) -> float:
    _check_unit(v, "gamma_encode")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return float(v) ** (1.0 / gamma)


def clamp_unit(a: np.ndarray, what: str = "raster") -> np.ndarray:
    """Clip to [0, 1], logging how many values were touched."""
    n = int(np.count_nonzero((a < 0) | (a > 1)))
    if n:
        log.debug("%s: clamped %d values to [0, 1]", what, n)
    return np.clip(a, 0.0, 1.0)


def gamma_decode_array(v: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    return clamp_unit(np.asarray(v, dtype=float), "gamma_decode") ** gamma


def gamma_encode_array(v: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    return clamp_unit(np.asarray(v, dtype=float), "gamma_encode") ** (1.0 / gamma)


def linear_rgb_to_xyz(rgb, matrix: np.ndarray | None = None) -> np.ndarray:
    """Apply a 3x3 matrix to a triple or to a channel-first array."""
    m = SRGB_TO_XYZ if matrix is None else np.asarray(matrix, dtype=float)
    rgb = np.asarray(rgb, dtype=float)
    return np.tensordot(m, rgb, axes=(1, 0))


def xyz_to_linear_rgb(xyz, matrix: np.ndarray | None = None) -> np.ndarray:
    m = XYZ_TO_SRGB if matrix is None else np.asarray(matrix, dtype=float)
    return np.tensordot(m, np.asarray(xyz, dtype=float), axes=(1, 0))


def lab_f(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.where(t > _EPS, np.cbrt(t), t / _KAPPA + _LAB_OFFSET)


def lab_f_prime(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    safe = np.where(t > _EPS, t, 1.0)
    return np.where(t > _EPS, 1.0 / (3.0 * np.cbrt(safe) ** 2), 1.0 / _KAPPA)


def _lab_f_inv(f: np.ndarray) -> np.ndarray:
    return np.where(f > 6.0 / 29.0, f**3, _KAPPA * (f - _LAB_OFFSET))


def xyz_to_lab(xyz, white: WhitePoint = D65) -> np.ndarray:
    """CIE XYZ -> CIELAB relative to ``white``. Accepts a triple or a (3, ...) array."""
    xyz = np.asarray(xyz, dtype=float)
    if np.any(xyz < 0) or not np.all(np.isfinite(xyz)):
        raise ValueError("xyz_to_lab: XYZ components must be finite and >= 0")
    wp = white.as_array().reshape((3,) + (1,) * (xyz.ndim - 1))
    fx, fy, fz = lab_f(xyz / wp)
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])


def lab_to_xyz(lab, white: WhitePoint = D65) -> np.ndarray:
    lab = np.asarray(lab, dtype=float)
    L, a, b = lab
    if np.any(L < 0) or np.any(L > 100) or not np.all(np.isfinite(lab)):
        raise ValueError("lab_to_xyz: L must lie in [0, 100] and values be finite")
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    wp = white.as_array().reshape((3,) + (1,) * (lab.ndim - 1))
    return np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)]) * wp


def delta_e(lab1, lab2, variant: DeltaEVariant = DeltaEVariant.PAPER_L1) -> np.ndarray | float:
    """Color difference between LAB triples (or (3, ...) arrays of them)."""
    d = np.asarray(lab1, dtype=float) - np.asarray(lab2, dtype=float)
    variant = DeltaEVariant(variant)
    if variant is DeltaEVariant.PAPER_L1:
        out = np.abs(d[0]) + np.abs(d[1]) + np.abs(d[2])
    else:
        out = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    return float(out) if np.ndim(out) == 0 else out


def baseline_srgb_to_xyz(srgb: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Gamma-2.2 decode then the standard matrix: the untrained "Standard" method."""
    return linear_rgb_to_xyz(gamma_decode_array(srgb, gamma))


def baseline_xyz_to_srgb(xyz: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    return gamma_encode_array(xyz_to_linear_rgb(xyz), gamma)
