"""Color-chart annotations, patch masks, percentile extraction and scoring.

Annotation file, one patch per line (``#`` starts a comment)::

    <patch_index> <x1> <y1> <x2> <y2> <x3> <y3> <x4> <y4>

Coordinates are pixels, origin top-left, pixel (col, row) has its center at
(col + 0.5, row + 0.5).

Reference file::

    illuminant <name>
    <patch_index> <L> <a> <b>
    ...
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .color import DeltaEVariant, WhitePoint, delta_e, white_point, xyz_to_lab
from .image import Image

log = logging.getLogger(__name__)

DEFAULT_SHRINK = 0.5
PATCH_QUANTILE = 0.75


class ChartError(ValueError):
    pass


@dataclass
class ChartAnnotation:
    image_id: str
    quads: list[np.ndarray]  # each (4, 2) as (x, y), index == patch index

    def __len__(self) -> int:
        return len(self.quads)


@dataclass
class ChartReference:
    name: str
    illuminant: str
    lab: np.ndarray  # (n_patches, 3)

    def __len__(self) -> int:
        return len(self.lab)

    @property
    def white(self) -> WhitePoint:
        return white_point(self.illuminant)


def signed_area(quad: np.ndarray) -> float:
    x, y = quad[:, 0], quad[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    return orient(p1, p2, q1) * orient(p1, p2, q2) < 0 and orient(q1, q2, p1) * orient(q1, q2, p2) < 0


def check_quad(quad: np.ndarray) -> None:
    if quad.shape != (4, 2) or not np.all(np.isfinite(quad)):
        raise ChartError("quad must be 4 finite (x, y) corners")
    if abs(signed_area(quad)) <= 0.0:
        raise ChartError("degenerate quad (zero area)")
    if _segments_cross(quad[0], quad[1], quad[2], quad[3]) or _segments_cross(quad[1], quad[2], quad[3], quad[0]):
        raise ChartError("self-intersecting quad")


def parse_annotation(text: str, image_id: str = "") -> ChartAnnotation:
    patches: dict[int, np.ndarray] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 9:
            raise ChartError(f"line {lineno}: expected 9 fields, got {len(fields)}")
        try:
            idx = int(fields[0])
            coords = np.array([float(f) for f in fields[1:]]).reshape(4, 2)
        except ValueError as exc:
            raise ChartError(f"line {lineno}: {exc}") from None
        if idx in patches:
            raise ChartError(f"line {lineno}: duplicate patch index {idx}")
        try:
            check_quad(coords)
        except ChartError as exc:
            raise ChartError(f"line {lineno}: {exc}") from None
        patches[idx] = coords
    if not patches:
        raise ChartError("no patches")
    if sorted(patches) != list(range(len(patches))):
        raise ChartError(f"patch indices must be contiguous from 0, got {sorted(patches)}")
    return ChartAnnotation(image_id, [patches[i] for i in range(len(patches))])


def format_annotation(annotation: ChartAnnotation) -> str:
    lines = [f"# chart annotation {annotation.image_id}".rstrip()]
    for i, quad in enumerate(annotation.quads):
        lines.append(" ".join([str(i)] + [f"{v:.17g}" for v in quad.ravel()]))
    return "\n".join(lines) + "\n"


def parse_reference(text: str, name: str = "") -> ChartReference:
    illuminant = None
    rows: dict[int, tuple[float, float, float]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if illuminant is None:
            if fields[0] != "illuminant" or len(fields) != 2:
                raise ChartError(f"line {lineno}: expected header 'illuminant <name>'")
            illuminant = fields[1]
            try:
                white_point(illuminant)
            except ValueError as exc:
                raise ChartError(f"line {lineno}: {exc}") from None
            continue
        if len(fields) != 4:
            raise ChartError(f"line {lineno}: expected '<index> <L> <a> <b>'")
        try:
            idx = int(fields[0])
            L, a, b = (float(f) for f in fields[1:])
        except ValueError as exc:
            raise ChartError(f"line {lineno}: {exc}") from None
        if idx in rows:
            raise ChartError(f"line {lineno}: duplicate patch index {idx}")
        if not (0.0 <= L <= 100.0) or not np.isfinite([a, b]).all():
            raise ChartError(f"line {lineno}: invalid LAB triple")
        rows[idx] = (L, a, b)
    if illuminant is None or not rows:
        raise ChartError("no patches")
    if sorted(rows) != list(range(len(rows))):
        raise ChartError("reference patch indices must be contiguous from 0")
    return ChartReference(name, illuminant, np.array([rows[i] for i in range(len(rows))]))


def format_reference(reference: ChartReference) -> str:
    lines = [f"illuminant {reference.illuminant}"]
    lines += [f"{i} {L:.17g} {a:.17g} {b:.17g}" for i, (L, a, b) in enumerate(reference.lab)]
    return "\n".join(lines) + "\n"


def load_annotation(path) -> ChartAnnotation:
    path = Path(path)
    try:
        return parse_annotation(path.read_text(), image_id=path.stem)
    except ChartError as exc:
        raise ChartError(f"{path}: {exc}") from None


def load_reference(path) -> ChartReference:
    path = Path(path)
    try:
        return parse_reference(path.read_text(), name=path.stem)
    except ChartError as exc:
        raise ChartError(f"{path}: {exc}") from None


def default_reference() -> ChartReference:
    """The bundled 24-patch ColorChecker Classic reference."""
    path = Path(__file__).with_name("data") / "colorchecker24.txt"
    return parse_reference(path.read_text(), name="colorchecker24")


# Importers for third-party coordinate formats: name -> callable(text) -> ChartAnnotation.
ANNOTATION_IMPORTERS: dict[str, Callable[[str], ChartAnnotation]] = {"native": parse_annotation}


def register_importer(name: str, parser: Callable[[str], ChartAnnotation]) -> None:
    ANNOTATION_IMPORTERS[name] = parser


# -- rasterization ----------------------------------------------------------


def _triangle_mask(tri: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # Edge functions with a top-left fill rule: a center exactly on an edge
    # belongs to the triangle only if the edge is a top or left edge. Shared
    # edges between adjacent triangles are therefore counted exactly once.
    if signed_area(tri) < 0:
        tri = tri[::-1]
    inside = np.ones(px.shape, dtype=bool)
    for i in range(3):
        ax, ay = tri[i]
        bx, by = tri[(i + 1) % 3]
        dx, dy = bx - ax, by - ay
        e = dx * (py - ay) - dy * (px - ax)
        top_left = (dy == 0 and dx > 0) or dy < 0
        inside &= (e > 0) | ((e == 0) & top_left)
    return inside


def _split_quad(quad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c, d = quad

    def side(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    # Diagonal a-c is interior iff b and d lie on opposite sides of it.
    if side(a, c, b) * side(a, c, d) < 0:
        return np.array([a, b, c]), np.array([a, c, d])
    return np.array([b, c, d]), np.array([b, d, a])


def shrink_quad(quad: np.ndarray, shrink_factor: float) -> np.ndarray:
    centroid = quad.mean(axis=0)
    return centroid + shrink_factor * (quad - centroid)


def rasterize_patch_mask(quad, shrink_factor: float = DEFAULT_SHRINK, image_dims=None) -> np.ndarray:
    """Pixel coordinates (row, col) whose centers fall inside the shrunken quad.

    ``image_dims`` is (height, width); pixels outside it are dropped. Rows are
    returned in row-major order.
    """
    quad = np.asarray(quad, dtype=float)
    if not 0.0 < shrink_factor <= 1.0:
        raise ChartError(f"shrink factor {shrink_factor} outside (0, 1]")
    check_quad(quad)
    q = shrink_quad(quad, shrink_factor)
    x0, y0 = np.floor(q.min(axis=0)).astype(int)
    x1, y1 = np.ceil(q.max(axis=0)).astype(int)
    if image_dims is not None:
        h, w = image_dims
        x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    cols = np.arange(x0, x1)
    rows = np.arange(y0, y1)
    cc, rr = np.meshgrid(cols, rows)
    px, py = cc + 0.5, rr + 0.5
    t1, t2 = _split_quad(q)
    mask = _triangle_mask(t1, px, py) | _triangle_mask(t2, px, py)
    if not mask.any():
        raise ChartError("patch mask is empty (patch too small)")
    return np.stack([rr[mask], cc[mask]], axis=1)


def mask_flat_indices(coords: np.ndarray, width: int) -> np.ndarray:
    return coords[:, 0] * width + coords[:, 1]


# -- extraction and scoring -------------------------------------------------


def percentile_weights(values: np.ndarray, q: float = PATCH_QUANTILE):
    """Linear-interpolation percentile per row of ``values`` (3, n).

    Returns (result (3,), lo_index (3,), hi_index (3,), frac) with indices into
    the columns of ``values``; result = (1-frac)*v[lo] + frac*v[hi].
    """
    n = values.shape[1]
    if n == 0:
        raise ChartError("empty patch mask")
    order = np.argsort(values, axis=1, kind="stable")
    pos = q * (n - 1)
    lo_rank = int(np.floor(pos))
    hi_rank = min(lo_rank + 1, n - 1)
    frac = pos - lo_rank
    lo = order[:, lo_rank]
    hi = order[:, hi_rank]
    v_lo = values[np.arange(3), lo]
    v_hi = values[np.arange(3), hi]
    return v_lo + frac * (v_hi - v_lo), lo, hi, frac


def extract_patch_color(image: Image, mask: np.ndarray) -> np.ndarray:
    """Per-channel 75th percentile of XYZ values under ``mask`` (row, col) coords."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ChartError("empty patch mask")
    if (mask[:, 0].min() < 0 or mask[:, 1].min() < 0
            or mask[:, 0].max() >= image.height or mask[:, 1].max() >= image.width):
        raise ChartError("patch mask out of image bounds")
    values = image.data[:, mask[:, 0], mask[:, 1]]
    return percentile_weights(values)[0]


@dataclass
class ChartScore:
    per_patch: np.ndarray
    mean: float
    lab: np.ndarray = field(repr=False)  # reconstructed patch colors, (n, 3)


def chart_masks(annotation: ChartAnnotation, dims, shrink_factor: float = DEFAULT_SHRINK) -> list[np.ndarray]:
    masks = []
    h, w = dims
    for i, quad in enumerate(annotation.quads):
        if quad[:, 0].min() < 0 or quad[:, 1].min() < 0 or quad[:, 0].max() > w or quad[:, 1].max() > h:
            raise ChartError(f"patch {i}: quad outside image bounds {w}x{h}")
        try:
            masks.append(rasterize_patch_mask(quad, shrink_factor, dims))
        except ChartError as exc:
            raise ChartError(f"patch {i}: {exc}") from None
    return masks


def chart_delta_e(
    image: Image,
    annotation: ChartAnnotation,
    reference: ChartReference,
    variant: DeltaEVariant = DeltaEVariant.PAPER_L1,
    white: WhitePoint | None = None,
    shrink_factor: float = DEFAULT_SHRINK,
) -> ChartScore:
    """Per-patch Delta E between extracted patch colors and the reference, plus the mean."""
    if len(annotation) != len(reference):
        raise ChartError(f"annotation has {len(annotation)} patches, reference has {len(reference)}")
    white = white or reference.white
    masks = chart_masks(annotation, (image.height, image.width), shrink_factor)
    xyz = np.stack([extract_patch_color(image, m) for m in masks], axis=1)
    lab = xyz_to_lab(np.maximum(xyz, 0.0), white)
    per_patch = np.asarray(delta_e(lab, reference.lab.T, variant), dtype=float)
    return ChartScore(per_patch, float(per_patch.mean()), lab.T)

