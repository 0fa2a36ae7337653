"""PNG image I/O and manifest files.

Saving rounds half away from zero: code = floor(v * max_code + 0.5) for the
clamped value v in [0, 1]. Loading divides by max_code.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np
import png

from .color import ColorState
from .image import Image

log = logging.getLogger(__name__)

DEFAULT_BIT_DEPTH = {ColorState.SRGB: 8, ColorState.XYZ: 16, ColorState.LINEAR_RGB: 16}


class ImageIOError(OSError):
    pass


def quantize(values: np.ndarray, bit_depth: int) -> tuple[np.ndarray, int]:
    """Clamp to [0, 1] and round to integer codes. Returns (codes, n_clamped)."""
    if bit_depth not in (8, 16):
        raise ValueError(f"unsupported bit depth {bit_depth}")
    values = np.asarray(values, dtype=float)
    n_clamped = int(np.count_nonzero((values < 0) | (values > 1)))
    top = (1 << bit_depth) - 1
    codes = np.floor(np.clip(values, 0.0, 1.0) * top + 0.5)
    return codes.astype(np.uint16 if bit_depth == 16 else np.uint8), n_clamped


def dequantize(codes: np.ndarray, bit_depth: int) -> np.ndarray:
    return np.asarray(codes, dtype=float) / ((1 << bit_depth) - 1)


def quantize_image(image: Image, bit_depth: int | None = None) -> Image:
    """Round-trip through the on-disk representation without touching disk."""
    bits = bit_depth or DEFAULT_BIT_DEPTH[image.state]
    return Image(dequantize(quantize(image.data, bits)[0], bits), image.state)


def save_image(image: Image, path, bit_depth: int | None = None) -> int:
    """Write an RGB PNG; returns the number of values clamped into [0, 1]."""
    path = Path(path)
    bits = bit_depth or DEFAULT_BIT_DEPTH.get(image.state, 16)
    codes, n_clamped = quantize(image.data, bits)
    if n_clamped:
        log.warning("%s: clamped %d out-of-range values", path, n_clamped)
    rows = np.moveaxis(codes, 0, -1).reshape(image.height, image.width * 3)
    writer = png.Writer(image.width, image.height, greyscale=False, bitdepth=bits, compression=6)
    try:
        with open(path, "wb") as fh:
            writer.write(fh, rows)
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from exc
    return n_clamped


def load_image(path, expected_state) -> Image:
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"{path}: no such file")
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.vstack([np.asarray(r, dtype=np.uint32) for r in rows])
    except (png.Error, OSError, ValueError) as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    bits = info["bitdepth"]
    if bits not in (8, 16):
        raise ImageIOError(f"{path}: unsupported bit depth {bits}")
    if width == 0 or height == 0:
        raise ImageIOError(f"{path}: zero-sized image")
    planes = info["planes"]
    data = data.reshape(height, width, planes)
    if info.get("greyscale"):
        data = np.repeat(data[..., :1], 3, axis=2)
    else:
        data = data[..., :3]
    return Image(np.moveaxis(dequantize(data, bits), -1, 0), expected_state)


# -- manifests --------------------------------------------------------------


def read_manifest(path, n_fields: int) -> list[tuple[Path, ...]]:
    """Whitespace-separated entries; relative paths resolve against the manifest's folder."""
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"{path}: no such manifest")
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != n_fields:
            raise ValueError(f"{path}:{lineno}: expected {n_fields} paths, got {len(fields)}")
        entries.append(tuple(path.parent / f for f in fields))
    if not entries:
        raise ValueError(f"{path}: manifest is empty")
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    lines = []
    for entry in entries:
        lines.append(" ".join(os.path.relpath(p, path.parent) for p in entry))
    path.write_text("\n".join(lines) + "\n")


def load_pairs(manifest) -> list[tuple[Image, Image]]:
    return [
        (load_image(s, ColorState.SRGB), load_image(x, ColorState.XYZ))
        for s, x in read_manifest(manifest, 2)
    ]


def load_chart_items(manifest):
    from .chart import load_annotation, load_reference

    return [
        (load_image(s, ColorState.SRGB), load_annotation(a), load_reference(r))
        for s, a, r in read_manifest(manifest, 3)
    ]
