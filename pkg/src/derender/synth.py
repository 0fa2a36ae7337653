"""Synthetic camera pipelines, scenes and datasets with known ground truth.

A pipeline renders XYZ to display sRGB as::

    lin  = clip(diag(wb) @ cst @ xyz, 0, 1)
    srgb = tone(lin)

In-family pipelines use a piecewise-linear ``tone`` through (y_k, k/K), the
exact curve family of an InverseG mapping, so both directions of the
learnable mapping can reproduce them. Out-of-family pipelines blend in a
smooth power-law component that no K-knot PWL curve matches.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .chart import ChartAnnotation, ChartReference, default_reference, format_annotation, format_reference
from .color import D65, SRGB_TO_XYZ, XYZ_TO_SRGB, ColorState, lab_to_xyz
from .image import Image
from .mapping import DEFAULT_KNOTS, N_BASIS, Direction, GlobalMapping

CHART_ROWS, CHART_COLS = 4, 6


class Family(str, enum.Enum):
    IN_MODEL = "in_model"
    OUT_OF_FAMILY = "out_of_family"


@dataclass
class SynthPipeline:
    wb: np.ndarray  # (3,) gains in [0.5, 2.0]
    cst: np.ndarray  # (3, 3) XYZ -> camera-linear
    ordinates: np.ndarray  # (3, K+1), increasing from 0 to 1
    family: Family = Family.IN_MODEL
    smooth_weight: float = 0.0
    smooth_gamma: float = 2.2
    id: str = ""

    @property
    def knots(self) -> int:
        return self.ordinates.shape[1] - 1

    @property
    def linear_matrix(self) -> np.ndarray:
        return np.diag(self.wb) @ self.cst

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "family": self.family.value,
            "wb": self.wb.tolist(),
            "cst": self.cst.tolist(),
            "ordinates": self.ordinates.tolist(),
            "smooth_weight": self.smooth_weight,
            "smooth_gamma": self.smooth_gamma,
        }


def _pwl_encode(y: np.ndarray, lin: np.ndarray) -> np.ndarray:
    K = y.shape[1] - 1
    grid = np.linspace(0.0, 1.0, K + 1)
    return np.stack([np.interp(lin[c], y[c], grid) for c in range(3)])


def _pwl_decode(y: np.ndarray, s: np.ndarray) -> np.ndarray:
    K = y.shape[1] - 1
    grid = np.linspace(0.0, 1.0, K + 1)
    return np.stack([np.interp(s[c], grid, y[c]) for c in range(3)])


def standard_pipeline(knots: int = DEFAULT_KNOTS, gamma: float = 2.2) -> SynthPipeline:
    """Generator equal to the untrained baseline mapping (unit gains, sRGB matrix, 2.2 knots)."""
    y = np.tile(np.linspace(0.0, 1.0, knots + 1) ** gamma, (3, 1))
    return SynthPipeline(np.ones(3), XYZ_TO_SRGB.copy(), y, Family.IN_MODEL, id="standard")


def sample_pipeline(seed: int, family=Family.IN_MODEL, knots: int = DEFAULT_KNOTS) -> SynthPipeline:
    family = Family(family)
    rng = np.random.default_rng([seed, 0x5EED])
    gains = rng.uniform(0.55, 1.0, 3)
    wb = gains / gains.max()
    while True:
        cst = (np.eye(3) + 0.04 * rng.standard_normal((3, 3))) @ XYZ_TO_SRGB
        if np.linalg.cond(cst) < 50:
            break
    gamma = rng.uniform(1.8, 2.6)
    base = np.diff(np.linspace(0.0, 1.0, knots + 1) ** gamma)
    inc = base * np.exp(0.15 * rng.standard_normal((3, knots)))
    inc /= inc.sum(axis=1, keepdims=True)
    y = np.concatenate([np.zeros((3, 1)), np.cumsum(inc, axis=1)], axis=1)
    y[:, -1] = 1.0
    smooth = rng.uniform(0.2, 0.4) if family is Family.OUT_OF_FAMILY else 0.0
    return SynthPipeline(wb, cst, y, family, smooth, gamma, id=f"{family.value}-{seed}")


def render_linear(pipeline: SynthPipeline, xyz: np.ndarray) -> np.ndarray:
    return np.clip(pipeline.linear_matrix @ xyz, 0.0, 1.0)


def apply_pipeline_array(pipeline: SynthPipeline, xyz: np.ndarray) -> np.ndarray:
    """(3, N) XYZ -> (3, N) sRGB."""
    lin = render_linear(pipeline, np.asarray(xyz, dtype=float))
    s = _pwl_encode(pipeline.ordinates, lin)
    if pipeline.smooth_weight:
        s = (1.0 - pipeline.smooth_weight) * s + pipeline.smooth_weight * lin ** (1.0 / pipeline.smooth_gamma)
    return np.clip(s, 0.0, 1.0)


def apply_pipeline(pipeline: SynthPipeline, xyz: Image) -> Image:
    if xyz.state is not ColorState.XYZ:
        raise ValueError("apply_pipeline expects an XYZ image")
    out = apply_pipeline_array(pipeline, xyz.pixels())
    return Image.from_pixels(out, xyz.height, xyz.width, ColorState.SRGB)


def invert_pipeline_array(pipeline: SynthPipeline, srgb: np.ndarray) -> np.ndarray:
    """Exact inverse for in-family pipelines (valid away from clamped pixels)."""
    if pipeline.family is not Family.IN_MODEL:
        raise ValueError("closed-form inverse only exists for in-family pipelines")
    return np.linalg.solve(pipeline.linear_matrix, _pwl_decode(pipeline.ordinates, srgb))


def embed_pipeline(pipeline: SynthPipeline) -> tuple[GlobalMapping, GlobalMapping]:
    """Mappings (F, G) that reproduce an in-family pipeline's inverse and forward rendering."""
    if pipeline.family is not Family.IN_MODEL:
        raise ValueError("only in-family pipelines embed exactly")
    logits = np.log(np.diff(pipeline.ordinates, axis=1))
    logits -= logits.mean(axis=1, keepdims=True)
    mf = np.zeros((3, N_BASIS))
    mf[:, :3] = np.linalg.inv(pipeline.linear_matrix)
    mg = np.zeros((3, N_BASIS))
    mg[:, :3] = pipeline.linear_matrix
    return GlobalMapping(Direction.FORWARD_F, logits, mf), GlobalMapping(Direction.INVERSE_G, logits, mg)


# -- scenes -----------------------------------------------------------------


def synthetic_reference(saturation: float = 0.15, max_linear: float = 0.8) -> ChartReference:
    """The bundled chart reference with chroma reduced until every patch sits well inside sRGB.

    Each patch's smallest linear-sRGB channel must be at least ``saturation``
    times its largest, and its largest at most ``max_linear`` (lightness is
    lowered for the brightest patches). Synthetic pipelines perturb the color matrix and clip
    negative camera values, so highly saturated references could not be
    reproduced exactly.
    """
    ref = default_reference()
    lab = ref.lab.copy()
    for i in range(len(lab)):
        for scale in np.linspace(1.0, 0.0, 101):
            trial = np.array([lab[i, 0], lab[i, 1] * scale, lab[i, 2] * scale])
            rgb = XYZ_TO_SRGB @ lab_to_xyz(trial, D65)
            if rgb.min() >= saturation * rgb.max():
                break
        while rgb.max() > max_linear:
            trial[0] -= 0.5
            rgb = XYZ_TO_SRGB @ lab_to_xyz(trial, D65)
        lab[i] = trial
    return ChartReference("synthetic24", "D65", lab)


@dataclass
class SceneSpec:
    height: int = 128
    width: int = 128
    seed: int = 0
    n_rects: int = 12
    chart: bool = False
    patch_size: int = 14
    patch_gap: int = 4


def _random_xyz(rng, n: int, lo: float = 0.1, hi: float = 0.85) -> np.ndarray:
    # linear sRGB inside the gamut -> valid XYZ in [0, 1)
    return SRGB_TO_XYZ @ rng.uniform(lo, hi, (3, n))


def chart_layout(spec: SceneSpec, rng) -> tuple[int, int]:
    step = spec.patch_size + spec.patch_gap
    chart_w = CHART_COLS * step + spec.patch_gap
    chart_h = CHART_ROWS * step + spec.patch_gap
    if chart_w > spec.width or chart_h > spec.height:
        raise ValueError(f"chart ({chart_w}x{chart_h}) does not fit a {spec.width}x{spec.height} scene")
    top = int(rng.integers(0, spec.height - chart_h + 1))
    left = int(rng.integers(0, spec.width - chart_w + 1))
    return top, left


def render_scene(spec: SceneSpec, reference: ChartReference | None = None):
    """XYZ scene, plus (annotation, reference) when ``spec.chart`` is set."""
    rng = np.random.default_rng([spec.seed, 0x5CE7E])
    h, w = spec.height, spec.width
    corners = _random_xyz(rng, 4)
    v = np.linspace(0.0, 1.0, h)[:, None]
    u = np.linspace(0.0, 1.0, w)[None, :]
    weights = [(1 - v) * (1 - u), (1 - v) * u, v * (1 - u), v * u]
    data = sum(corners[:, k, None, None] * weights[k][None] for k in range(4))
    colors = _random_xyz(rng, spec.n_rects)
    for k in range(spec.n_rects):
        rh, rw = rng.integers(h // 10, h // 3 + 1), rng.integers(w // 10, w // 3 + 1)
        r0, c0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        data[:, r0 : r0 + rh, c0 : c0 + rw] = colors[:, k, None, None]
    if not spec.chart:
        return Image(data, ColorState.XYZ)

    reference = reference or synthetic_reference()
    if len(reference) != CHART_ROWS * CHART_COLS:
        raise ValueError(f"chart reference must have {CHART_ROWS * CHART_COLS} patches")
    top, left = chart_layout(spec, rng)
    step = spec.patch_size + spec.patch_gap
    frame = SRGB_TO_XYZ @ np.full(3, 0.04)
    data[:, top : top + CHART_ROWS * step + spec.patch_gap, left : left + CHART_COLS * step + spec.patch_gap] = (
        frame[:, None, None]
    )
    patch_xyz = lab_to_xyz(reference.lab.T, reference.white)
    quads = []
    for i in range(CHART_ROWS * CHART_COLS):
        r, c = divmod(i, CHART_COLS)
        y0 = top + spec.patch_gap + r * step
        x0 = left + spec.patch_gap + c * step
        data[:, y0 : y0 + spec.patch_size, x0 : x0 + spec.patch_size] = patch_xyz[:, i, None, None]
        s = spec.patch_size
        quads.append(np.array([[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]], dtype=float))
    annotation = ChartAnnotation(f"scene-{spec.seed}", quads)
    return Image(data, ColorState.XYZ), annotation, reference


# -- datasets ---------------------------------------------------------------


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 64
    n_test: int = 16
    n_charts: int = 32
    height: int = 128
    width: int = 128
    chart_height: int = 128
    chart_width: int = 128
    knots: int = DEFAULT_KNOTS
    family: str = Family.IN_MODEL.value
    # None: charts share the paired pipeline; otherwise the seed of a second pipeline
    chart_pipeline_seed: int | None = None
    # one pipeline per image instead of one per dataset
    multi_pipeline: bool = False
    standard: bool = False


@dataclass
class DatasetPaths:
    root: Path
    train: Path
    test: Path
    charts: Path
    reference: Path
    files: list[Path] = field(default_factory=list)


def dataset_pipeline(config: SynthConfig, index: int = 0) -> SynthPipeline:
    if config.standard:
        return standard_pipeline(config.knots)
    seed = config.seed * 1000 + index if config.multi_pipeline else config.seed
    return sample_pipeline(seed, config.family, config.knots)


def make_pair(pipeline: SynthPipeline, spec: SceneSpec) -> tuple[Image, Image]:
    """(sRGB, XYZ) at storage precision: XYZ quantized to 16 bits, sRGB rendered from it at 8 bits."""
    xyz = fileio.quantize_image(render_scene(spec))
    srgb = fileio.quantize_image(apply_pipeline(pipeline, xyz))
    return srgb, xyz


def make_chart_item(pipeline: SynthPipeline, spec: SceneSpec, reference: ChartReference | None = None,
                    quantize: bool = True):
    xyz, annotation, reference = render_scene(spec, reference)
    srgb = apply_pipeline(pipeline, xyz)
    if quantize:
        srgb = fileio.quantize_image(srgb)
    return srgb, annotation, reference


def generate_dataset(config: SynthConfig, out_dir) -> DatasetPaths:
    """Write paired train/test images, chart scenes and their manifests under ``out_dir``."""
    root = Path(out_dir)
    for sub in ("pairs", "charts"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    reference = synthetic_reference()
    ref_path = root / "charts" / "reference.txt"
    ref_path.write_text(format_reference(reference))
    files = [ref_path]
    pipelines = {}

    def pipe(index):
        p = dataset_pipeline(config, index)
        pipelines[p.id] = p
        return p

    manifests = {}
    offset = 0
    for split, count in (("train", config.n_train), ("test", config.n_test)):
        entries = []
        for i in range(count):
            spec = SceneSpec(config.height, config.width, seed=config.seed * 100003 + offset + i)
            srgb, xyz = make_pair(pipe(offset + i), spec)
            s_path = root / "pairs" / f"{split}_{i:04d}_srgb.png"
            x_path = root / "pairs" / f"{split}_{i:04d}_xyz.png"
            fileio.save_image(srgb, s_path)
            fileio.save_image(xyz, x_path)
            entries.append((s_path, x_path))
            files += [s_path, x_path]
        offset += count
        manifests[split] = root / f"{split}.txt"
        fileio.write_manifest(manifests[split], entries)

    chart_entries = []
    for i in range(config.n_charts):
        if config.chart_pipeline_seed is None:
            p = pipe(offset + i)
        else:
            p = sample_pipeline(config.chart_pipeline_seed, config.family, config.knots)
            pipelines[p.id] = p
        spec = SceneSpec(config.chart_height, config.chart_width, seed=config.seed * 100003 + offset + i, chart=True)
        srgb, annotation, _ = make_chart_item(p, spec, reference)
        s_path = root / "charts" / f"chart_{i:04d}_srgb.png"
        a_path = root / "charts" / f"chart_{i:04d}.txt"
        fileio.save_image(srgb, s_path)
        a_path.write_text(format_annotation(annotation))
        chart_entries.append((s_path, a_path, ref_path))
        files += [s_path, a_path]
    manifests["charts"] = root / "charts.txt"
    fileio.write_manifest(manifests["charts"], chart_entries)

    audit = {"config": asdict(config), "pipelines": [p.to_dict() for p in pipelines.values()]}
    (root / "generation.json").write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    files += [root / "generation.json", *manifests.values()]
    return DatasetPaths(root, manifests["train"], manifests["test"], manifests["charts"], ref_path, files)

