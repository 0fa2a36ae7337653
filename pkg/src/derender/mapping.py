"""Global (spatially invariant) color mapping with analytical gradients.

A mapping is three monotone piecewise-linear tone curves plus a 3x9 matrix
over the degree-2 monomial basis

    phi(c) = [c0, c1, c2, c0^2, c1^2, c2^2, c0*c1, c0*c2, c1*c2]

ForwardF (sRGB -> XYZ) evaluates ``M @ phi(T(c))``: linearize, then mix.
InverseG (XYZ -> sRGB) evaluates ``T(M @ phi(c))``: mix, then encode.

Each curve is defined by K logits. Ordinates are ``y_0 = 0`` and
``y_k = sum(softmax(logits)[:k])`` so ``y_K = 1`` and the curve is strictly
increasing for any finite logits. ForwardF curves pass through
``(k/K, y_k)``; InverseG curves pass through ``(y_k, k/K)``, i.e. they are
the exact inverse of a ForwardF curve with the same logits. That choice makes
``G(F(x)) == x`` exactly when the two matrices are inverse linear maps.

Parameter vector layout (length 3*K + 27):

    [logits channel 0 (K), logits channel 1 (K), logits channel 2 (K),
     matrix row 0 (9), matrix row 1 (9), matrix row 2 (9)]

Model file layout (little endian):

    offset 0   4 bytes   magic b"DRGM"
    offset 4   uint16    format version (1)
    offset 6   uint8     direction (0 = ForwardF, 1 = InverseG)
    offset 7   uint16    K
    offset 9   uint32    number of float64 values that follow (3*K + 27)
    offset 13  float64[] parameter vector in the layout above
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .color import DEFAULT_GAMMA, SRGB_TO_XYZ, XYZ_TO_SRGB, ColorState
from .image import Image

log = logging.getLogger(__name__)

DEFAULT_KNOTS = 16
N_BASIS = 9
MAGIC = b"DRGM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBHI")


class Direction(str, enum.Enum):
    FORWARD_F = "srgb2xyz"
    INVERSE_G = "xyz2srgb"

    @property
    def input_state(self) -> ColorState:
        return ColorState.SRGB if self is Direction.FORWARD_F else ColorState.XYZ

    @property
    def output_state(self) -> ColorState:
        return ColorState.XYZ if self is Direction.FORWARD_F else ColorState.SRGB


_DIRECTION_CODES = {Direction.FORWARD_F: 0, Direction.INVERSE_G: 1}


class ModelFormatError(ValueError):
    pass


def knot_ordinates(logits: np.ndarray) -> np.ndarray:
    """(..., K) logits -> (..., K+1) ordinates from 0 to 1."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    y = np.concatenate([np.zeros(p.shape[:-1] + (1,)), np.cumsum(p, axis=-1)], axis=-1)
    y[..., -1] = 1.0
    return y


def _ordinate_grad_to_logits(logits: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # y_k = sum_{j<k} p_j  =>  dL/dp_j = sum_{k>j} dL/dy_k
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    gp = np.cumsum(gy[..., ::-1], axis=-1)[..., ::-1][..., 1:]
    return p * (gp - (p * gp).sum(axis=-1, keepdims=True))


def poly_basis(c: np.ndarray) -> np.ndarray:
    """(3, N) -> (9, N) degree-2 monomials."""
    c0, c1, c2 = c
    return np.stack([c0, c1, c2, c0 * c0, c1 * c1, c2 * c2, c0 * c1, c0 * c2, c1 * c2])


def _mix(matrix: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """``matrix @ basis`` summed in a fixed order, so each pixel's result is
    bit-identical no matter how many pixels are evaluated together."""
    out = matrix[:, :1] * basis[0]
    for k in range(1, basis.shape[0]):
        out += matrix[:, k : k + 1] * basis[k]
    return out


def _poly_basis_vjp(c: np.ndarray, g: np.ndarray) -> np.ndarray:
    # g: (9, N) cotangent on phi(c)
    c0, c1, c2 = c
    return np.stack(
        [
            g[0] + 2 * c0 * g[3] + c1 * g[6] + c2 * g[7],
            g[1] + 2 * c1 * g[4] + c0 * g[6] + c2 * g[8],
            g[2] + 2 * c2 * g[5] + c0 * g[7] + c1 * g[8],
        ]
    )


def _curve_forward(y: np.ndarray, x: np.ndarray):
    """Evaluate curves through (k/K, y_k). y: (3, K+1), x: (3, N) in [0, 1]."""
    K = y.shape[1] - 1
    seg = np.clip(np.ceil(x * K).astype(np.int64) - 1, 0, K - 1)
    t = x * K - seg
    lo = np.take_along_axis(y, seg, axis=1)
    hi = np.take_along_axis(y, seg + 1, axis=1)
    return lo + t * (hi - lo), (seg, t, K * (hi - lo))


def _curve_inverse(y: np.ndarray, u: np.ndarray):
    """Evaluate curves through (y_k, k/K). u: (3, N) in [0, 1]."""
    K = y.shape[1] - 1
    seg = np.empty(u.shape, dtype=np.int64)
    for ch in range(3):
        seg[ch] = np.searchsorted(y[ch], u[ch], side="left") - 1
    np.clip(seg, 0, K - 1, out=seg)
    lo = np.take_along_axis(y, seg, axis=1)
    hi = np.take_along_axis(y, seg + 1, axis=1)
    width = hi - lo
    s = (u - lo) / width
    return (seg + s) / K, (seg, u, lo, hi, width)


def _scatter_knots(seg: np.ndarray, w_lo: np.ndarray, w_hi: np.ndarray, n_knots: int) -> np.ndarray:
    g = np.zeros((3, n_knots))
    for ch in range(3):
        g[ch] += np.bincount(seg[ch], weights=w_lo[ch], minlength=n_knots)
        g[ch] += np.bincount(seg[ch] + 1, weights=w_hi[ch], minlength=n_knots)
    return g


@dataclass
class ForwardCache:
    x: np.ndarray
    curve_in: np.ndarray
    curve_out: np.ndarray
    curve_aux: tuple
    basis_in: np.ndarray
    basis: np.ndarray
    keep: np.ndarray  # False where the output was clamped
    clamped: int


@dataclass
class GlobalMapping:
    direction: Direction
    logits: np.ndarray  # (3, K)
    matrix: np.ndarray  # (3, 9)

    def __post_init__(self):
        self.direction = Direction(self.direction)
        self.logits = np.array(self.logits, dtype=float)
        self.matrix = np.array(self.matrix, dtype=float)
        if self.logits.ndim != 2 or self.logits.shape[0] != 3 or self.logits.shape[1] < 1:
            raise ValueError(f"logits must have shape (3, K), got {self.logits.shape}")
        if self.matrix.shape != (3, N_BASIS):
            raise ValueError(f"matrix must have shape (3, 9), got {self.matrix.shape}")

    @property
    def knots(self) -> int:
        return self.logits.shape[1]

    @property
    def n_params(self) -> int:
        return 3 * self.knots + 3 * N_BASIS

    @property
    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.logits.ravel(), self.matrix.ravel()])

    def with_params(self, vector: np.ndarray) -> "GlobalMapping":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vector.shape}")
        n = 3 * self.knots
        return GlobalMapping(self.direction, vector[:n].reshape(3, -1), vector[n:].reshape(3, N_BASIS))

    def ordinates(self) -> np.ndarray:
        return knot_ordinates(self.logits)

    def copy(self) -> "GlobalMapping":
        return self.with_params(self.param_vector.copy())

    # -- evaluation ---------------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """Map (3, N) pixels; returns outputs and the cache needed by ``backward``."""
        x = np.asarray(x, dtype=float)
        y = self.ordinates()
        if self.direction is Direction.FORWARD_F:
            xin = np.clip(x, 0.0, 1.0)
            cin = xin
            cout, aux = _curve_forward(y, cin)
            basis = poly_basis(cout)
            raw = _mix(self.matrix, basis)
            keep = raw >= 0.0
            out = np.where(keep, raw, 0.0)
            return out, ForwardCache(xin, cin, cout, aux, cout, basis, keep, int(raw.size - keep.sum()))
        xin = np.maximum(x, 0.0)
        basis = poly_basis(xin)
        raw = _mix(self.matrix, basis)
        keep = (raw >= 0.0) & (raw <= 1.0)
        cin = np.clip(raw, 0.0, 1.0)
        out, aux = _curve_inverse(y, cin)
        return out, ForwardCache(xin, cin, out, aux, xin, basis, keep, int(raw.size - keep.sum()))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, cotangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reverse-mode pass. Returns (d/d param_vector, d/d input)."""
        ct = np.asarray(cotangent, dtype=float)
        y = self.ordinates()
        n_knots = self.knots + 1
        if self.direction is Direction.FORWARD_F:
            g_raw = np.where(cache.keep, ct, 0.0)
            g_matrix = g_raw @ cache.basis.T
            g_cout = _poly_basis_vjp(cache.curve_out, self.matrix.T @ g_raw)
            seg, t, slope = cache.curve_aux
            g_y = _scatter_knots(seg, g_cout * (1.0 - t), g_cout * t, n_knots)
            g_in = g_cout * slope
        else:
            seg, u, lo, hi, width = cache.curve_aux
            K = self.knots
            g_out = ct
            g_y = _scatter_knots(
                seg,
                g_out * (u - hi) / (width * width) / K,
                -g_out * (u - lo) / (width * width) / K,
                n_knots,
            )
            g_raw = np.where(cache.keep, g_out / (K * width), 0.0)
            g_matrix = g_raw @ cache.basis.T
            g_in = _poly_basis_vjp(cache.basis_in, self.matrix.T @ g_raw)
        g_logits = _ordinate_grad_to_logits(self.logits, g_y)
        return np.concatenate([g_logits.ravel(), g_matrix.ravel()]), g_in


def init_baseline(direction, knots: int = DEFAULT_KNOTS, gamma: float = DEFAULT_GAMMA) -> GlobalMapping:
    """The untrained "Standard" mapping: gamma 2.2 tone curve plus the sRGB matrix."""
    direction = Direction(direction)
    grid = np.linspace(0.0, 1.0, knots + 1) ** gamma
    logits = np.log(np.diff(grid))
    logits = np.tile(logits - logits.mean(), (3, 1))
    matrix = np.zeros((3, N_BASIS))
    matrix[:, :3] = SRGB_TO_XYZ if direction is Direction.FORWARD_F else XYZ_TO_SRGB
    return GlobalMapping(direction, logits, matrix)


def apply(model: GlobalMapping, image: Image) -> Image:
    """Map every pixel of ``image`` independently."""
    if image.state is not model.direction.input_state:
        raise ValueError(
            f"{model.direction.value} model expects a {model.direction.input_state.value} image, "
            f"got {image.state.value}"
        )
    out, cache = model.forward(image.pixels())
    if cache.clamped:
        log.debug("apply %s: %d output values clamped", model.direction.value, cache.clamped)
    return Image.from_pixels(out, image.height, image.width, model.direction.output_state)


def gradient(model: GlobalMapping, image: Image, cotangent: np.ndarray) -> np.ndarray:
    """Gradient over ``param_vector`` of <cotangent, apply(model, image)>."""
    ct = np.asarray(cotangent, dtype=float)
    if ct.shape != image.data.shape:
        raise ValueError(f"cotangent shape {ct.shape} does not match image {image.data.shape}")
    _, cache = model.forward(image.pixels())
    return model.backward(cache, ct.reshape(3, -1))[0]


def serialize(model: GlobalMapping) -> bytes:
    vec = model.param_vector
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _DIRECTION_CODES[model.direction], model.knots, vec.size)
    return header + vec.astype("<f8").tobytes()


def deserialize(blob: bytes) -> GlobalMapping:
    if len(blob) < _HEADER.size:
        raise ModelFormatError("model document truncated (header)")
    magic, version, dcode, knots, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    directions = {v: k for k, v in _DIRECTION_CODES.items()}
    if dcode not in directions:
        raise ModelFormatError(f"bad direction code {dcode}")
    if knots < 1 or count != 3 * knots + 3 * N_BASIS:
        raise ModelFormatError(f"length field {count} inconsistent with K={knots}")
    body = blob[_HEADER.size :]
    if len(body) != 8 * count:
        raise ModelFormatError(f"model document has {len(body)} payload bytes, expected {8 * count}")
    vec = np.frombuffer(body, dtype="<f8").astype(float)
    if not np.all(np.isfinite(vec)):
        raise ModelFormatError("model document contains non-finite values")
    proto = GlobalMapping(directions[dcode], np.zeros((3, knots)), np.zeros((3, N_BASIS)))
    return proto.with_params(vec)
