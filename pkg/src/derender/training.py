"""Losses, optimizer and the three-phase training framework.

Phase I and III minimize the paired loss

    L_s = lambda * MAE(F(x_srgb), x_xyz) + MAE(G(F(x_srgb)), x_srgb) + lambda_reg * |theta|^2

over random augmented crops. Phase II minimizes the chart loss

    L_sslt = delta * MAE(G(F(x_srgb)), x_srgb) + mean_i DeltaE_i + lambda_reg * |theta|^2

on full-frame chart images, where DeltaE_i compares the 75th-percentile XYZ
color of patch i (converted to LAB) with the chart reference, and
``delta = exp(log_delta)`` is trained along with the mappings.

MAE is the mean over batch, pixels and channels. theta holds both mappings'
parameters; log_delta is not regularized.
"""
from __future__ import annotations

import enum
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import fileio
from .chart import ChartAnnotation, ChartReference, chart_masks, mask_flat_indices, percentile_weights
from .color import DeltaEVariant, lab_f, lab_f_prime
from .image import Image
from .mapping import GlobalMapping, ModelFormatError, deserialize, init_baseline, serialize
from .metrics import evaluate_protocol, format_report

log = logging.getLogger(__name__)


class ReconMode(str, enum.Enum):
    ROUND_TRIP = "round_trip"
    # round trip plus MAE(G(x_xyz), x_srgb)
    TEACHER_FORCED_AUX = "teacher_forced_aux"


@dataclass
class TrainConfig:
    lambda_xyz: float = 1.5
    lambda_reg: float = 1e-3
    lr0: float = 1e-4
    lr_decay: float = 0.5
    decay_every: int = 75
    epochs_per_phase: tuple[int, int, int] = (300, 300, 300)
    batch_size: int = 4
    patch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    delta_init: float = 1.0
    seed: int = 0
    deltae_variant: DeltaEVariant = DeltaEVariant.PAPER_L1
    srgb_recon_mode: ReconMode = ReconMode.ROUND_TRIP
    scale_min: float = 0.75
    scale_max: float = 1.25
    shrink_factor: float = 0.5
    knots: int = 16

    def __post_init__(self):
        self.epochs_per_phase = tuple(int(e) for e in self.epochs_per_phase)
        self.deltae_variant = DeltaEVariant(self.deltae_variant)
        self.srgb_recon_mode = ReconMode(self.srgb_recon_mode)
        if len(self.epochs_per_phase) != 3 or min(self.epochs_per_phase) < 0:
            raise ValueError("epochs_per_phase must be three non-negative integers")
        for name in ("lambda_xyz", "lr0", "lr_decay", "decay_every", "batch_size", "patch_size",
                     "adam_eps", "delta_init", "scale_min", "shrink_factor", "knots"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.scale_max < self.scale_min:
            raise ValueError("scale_max must be >= scale_min")


@dataclass
class LossResult:
    total: float
    grad_f: np.ndarray
    grad_g: np.ndarray
    terms: dict[str, float]
    grad_log_delta: float = 0.0
    clamped: int = 0


def _concat_pixels(images: Sequence[Image]) -> np.ndarray:
    return np.concatenate([im.pixels() for im in images], axis=1)


def _mae(residual: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute value and its (sub)gradient, sign(0) = 0."""
    n = residual.size
    return float(np.abs(residual).sum() / n), np.sign(residual) / n


def _regularizer(f: GlobalMapping, g: GlobalMapping) -> tuple[float, np.ndarray, np.ndarray]:
    tf, tg = f.param_vector, g.param_vector
    return float(tf @ tf + tg @ tg), 2.0 * tf, 2.0 * tg


def loss_supervised(f: GlobalMapping, g: GlobalMapping, batch, config: TrainConfig) -> LossResult:
    """Paired loss and gradients. ``batch`` is a sequence of (srgb, xyz) Images of equal size."""
    if not batch:
        raise ValueError("empty batch")
    for s, x in batch:
        if s.data.shape != x.data.shape:
            raise ValueError(f"pair shape mismatch: {s.data.shape} vs {x.data.shape}")
    xs = _concat_pixels([s for s, _ in batch])
    xt = _concat_pixels([x for _, x in batch])

    yf, cache_f = f.forward(xs)
    term_xyz, g_yf = _mae(yf - xt)
    g_yf = config.lambda_xyz * g_yf
    ys, cache_g = g.forward(yf)
    term_srgb, g_ys = _mae(ys - xs)
    grad_g, g_in = g.backward(cache_g, g_ys)
    g_yf = g_yf + g_in
    grad_f, _ = f.backward(cache_f, g_yf)
    clamped = cache_f.clamped + cache_g.clamped

    terms = {"xyz": term_xyz, "srgb": term_srgb}
    total = config.lambda_xyz * term_xyz + term_srgb
    if config.srgb_recon_mode is ReconMode.TEACHER_FORCED_AUX:
        ya, cache_a = g.forward(xt)
        term_aux, g_ya = _mae(ya - xs)
        grad_g = grad_g + g.backward(cache_a, g_ya)[0]
        terms["aux"] = term_aux
        total += term_aux

    reg, rf, rg = _regularizer(f, g)
    terms["reg"] = reg
    total += config.lambda_reg * reg
    grad_f = grad_f + config.lambda_reg * rf
    grad_g = grad_g + config.lambda_reg * rg
    return LossResult(total, grad_f, grad_g, terms, clamped=clamped)


@dataclass
class ChartItem:
    """A chart image with its patch masks precomputed as flat pixel indices."""

    srgb: Image
    annotation: ChartAnnotation
    reference: ChartReference
    masks: list[np.ndarray]


def prepare_chart_item(srgb: Image, annotation: ChartAnnotation, reference: ChartReference,
                       shrink_factor: float = 0.5) -> ChartItem:
    if len(annotation) != len(reference):
        raise ValueError(f"annotation has {len(annotation)} patches, reference has {len(reference)}")
    coords = chart_masks(annotation, (srgb.height, srgb.width), shrink_factor)
    return ChartItem(srgb, annotation, reference, [mask_flat_indices(c, srgb.width) for c in coords])


def chart_loss(xyz: np.ndarray, item: ChartItem, variant: DeltaEVariant):
    """Mean patch Delta E of (3, N) reconstructed XYZ, and its gradient w.r.t. ``xyz``."""
    white = item.reference.white
    wp = white.as_array()
    grad = np.zeros_like(xyz)
    n_patches = len(item.masks)
    per_patch = np.empty(n_patches)
    rows = np.arange(3)
    for i, idx in enumerate(item.masks):
        values = xyz[:, idx]
        c, lo, hi, frac = percentile_weights(values)
        t = c / wp
        fx, fy, fz = lab_f(t)
        lab = np.array([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])
        d = lab - item.reference.lab[i]
        if variant is DeltaEVariant.PAPER_L1:
            per_patch[i] = np.abs(d).sum()
            g_lab = np.sign(d)
        else:
            norm = float(np.sqrt(d @ d))
            per_patch[i] = norm
            g_lab = d / norm if norm > 0 else np.zeros(3)
        g_lab = g_lab / n_patches
        g_f = np.array([500.0 * g_lab[1], 116.0 * g_lab[0] - 500.0 * g_lab[1] + 200.0 * g_lab[2], -200.0 * g_lab[2]])
        g_c = g_f * lab_f_prime(t) / wp
        np.add.at(grad, (rows, idx[lo]), (1.0 - frac) * g_c)
        np.add.at(grad, (rows, idx[hi]), frac * g_c)
    return float(per_patch.mean()), per_patch, grad


def loss_ssl(f: GlobalMapping, g: GlobalMapping, item: ChartItem, log_delta: float,
             config: TrainConfig) -> LossResult:
    xs = item.srgb.pixels()
    yf, cache_f = f.forward(xs)
    ys, cache_g = g.forward(yf)
    mae_rt, g_ys = _mae(ys - xs)
    delta = float(np.exp(log_delta))
    l_ssl, per_patch, g_yf = chart_loss(yf, item, config.deltae_variant)

    grad_g, g_in = g.backward(cache_g, delta * g_ys)
    grad_f, _ = f.backward(cache_f, g_yf + g_in)
    reg, rf, rg = _regularizer(f, g)
    total = delta * mae_rt + l_ssl + config.lambda_reg * reg
    terms = {"srgb": mae_rt, "ssl": l_ssl, "reg": reg, "delta": delta}
    return LossResult(
        total,
        grad_f + config.lambda_reg * rf,
        grad_g + config.lambda_reg * rg,
        terms,
        grad_log_delta=delta * mae_rt,
        clamped=cache_f.clamped + cache_g.clamped,
    )


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              config: TrainConfig) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays, inputs untouched."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and optimizer state must have matching shapes")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at parameter index {int(bad[0])}")
    b1, b2 = config.beta1, config.beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps), AdamState(m, v, t)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.lr_decay ** (epoch // config.decay_every)


# -- augmentation -----------------------------------------------------------


def _scaled_shape(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, round(h * scale)), max(1, round(w * scale))


def _resample_window(data: np.ndarray, scale: float, top: int, left: int, size: int) -> np.ndarray:
    """Bilinear resize by ``scale`` (pixel-area aligned) restricted to one output window.

    Equals cropping ``ndimage.zoom(data, ..., order=1, grid_mode=True, mode="nearest")``
    without resampling the whole image.
    """
    h, w = data.shape[1:]
    sh, sw = _scaled_shape(h, w, scale)
    if top < 0 or left < 0 or top + size > sh or left + size > sw:
        raise ValueError("crop window outside image")
    rows = (np.arange(top, top + size) + 0.5) * (h / sh) - 0.5
    cols = (np.arange(left, left + size) + 0.5) * (w / sw) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([ndimage.map_coordinates(ch, [rr, cc], order=1, mode="nearest") for ch in data])


def crop_pair(pair, patch_size: int, top: int, left: int, scale: float = 1.0,
              hflip: bool = False, vflip: bool = False) -> tuple[Image, Image]:
    """Deterministic crop with the given augmentation applied identically to both images."""
    out = []
    for im in pair:
        if scale == 1.0:
            if top < 0 or left < 0 or top + patch_size > im.height or left + patch_size > im.width:
                raise ValueError("crop window outside image")
            data = im.data[:, top : top + patch_size, left : left + patch_size]
        else:
            data = _resample_window(im.data, scale, top, left, patch_size)
        if hflip:
            data = data[:, :, ::-1]
        if vflip:
            data = data[:, ::-1, :]
        out.append(Image(np.ascontiguousarray(data), im.state))
    return out[0], out[1]


def sample_crop(pair, patch_size: int, rng: np.random.Generator, scale_range=(0.75, 1.25)):
    """Random scale, position and reflections. Draw order: scale, top, left, hflip, vflip."""
    h, w = pair[0].height, pair[0].width
    if min(h, w) < patch_size:
        raise ValueError(f"image {w}x{h} smaller than patch size {patch_size}")
    scale = float(rng.uniform(*scale_range))
    # never shrink below the patch size
    scale = max(scale, patch_size / min(h, w))
    sh, sw = _scaled_shape(h, w, scale)
    top = int(rng.integers(0, sh - patch_size + 1))
    left = int(rng.integers(0, sw - patch_size + 1))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    return crop_pair(pair, patch_size, top, left, scale, hflip, vflip)


# -- phases -----------------------------------------------------------------


@dataclass
class PhaseLog:
    phase: int
    records: list[dict] = field(default_factory=list)

    def lines(self, timing: bool = False) -> list[str]:
        out = []
        for rec in self.records:
            rec = dict(rec) if timing else {k: v for k, v in rec.items() if k != "wall_time"}
            out.append(json.dumps({"phase": self.phase, **rec}, sort_keys=True))
        return out


@dataclass
class PhaseResult:
    f: GlobalMapping
    g: GlobalMapping
    log_delta: float | None
    log: PhaseLog


class PhaseError(ValueError):
    pass


def _is_pair(item) -> bool:
    return (isinstance(item, tuple) and len(item) == 2
            and all(isinstance(im, Image) for im in item))


def _as_chart_item(item, config: TrainConfig) -> ChartItem:
    if isinstance(item, ChartItem):
        return item
    if isinstance(item, tuple) and len(item) == 3:
        return prepare_chart_item(*item, shrink_factor=config.shrink_factor)
    raise PhaseError("phase 2 expects chart items (srgb, annotation, reference)")


def run_phase(phase: int, f: GlobalMapping, g: GlobalMapping, dataset, config: TrainConfig,
              log_delta: float | None = None, epochs: int | None = None) -> PhaseResult:
    """Train ``epochs`` (default: the phase's configured count) and return new mappings.

    Inputs are not modified; parameters leave as new objects (weight transfer by value).
    """
    if phase not in (1, 2, 3):
        raise PhaseError(f"unknown phase {phase}")
    if not dataset:
        raise PhaseError(f"phase {phase}: empty dataset")
    chart_phase = phase == 2
    if chart_phase:
        items = [_as_chart_item(it, config) for it in dataset]
        if log_delta is None:
            log_delta = float(np.log(config.delta_init))
    else:
        if not all(_is_pair(it) for it in dataset):
            raise PhaseError(f"phase {phase} expects (srgb, xyz) image pairs")
        items = list(dataset)
    n_epochs = config.epochs_per_phase[phase - 1] if epochs is None else epochs

    nf, ng = f.n_params, g.n_params
    params = np.concatenate([f.param_vector, g.param_vector] + ([[log_delta]] if chart_phase else []))
    state = AdamState.zeros(params.size)
    rng = np.random.default_rng([config.seed, phase])
    batch_size = 1 if chart_phase else config.batch_size
    plog = PhaseLog(phase)

    for epoch in range(n_epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, config)
        order = rng.permutation(len(items))
        sums: dict[str, float] = {}
        n_steps = 0
        clamped = 0
        for b0 in range(0, len(items), batch_size):
            cur_f = f.with_params(params[:nf])
            cur_g = g.with_params(params[nf : nf + ng])
            if chart_phase:
                res = loss_ssl(cur_f, cur_g, items[order[b0]], float(params[-1]), config)
                grads = np.concatenate([res.grad_f, res.grad_g, [res.grad_log_delta]])
            else:
                batch = [
                    sample_crop(items[i], config.patch_size, rng, (config.scale_min, config.scale_max))
                    for i in order[b0 : b0 + batch_size]
                ]
                res = loss_supervised(cur_f, cur_g, batch, config)
                grads = np.concatenate([res.grad_f, res.grad_g])
            params, state = adam_step(params, grads, state, lr, config)
            sums["loss"] = sums.get("loss", 0.0) + res.total
            for k, v in res.terms.items():
                sums[k] = sums.get(k, 0.0) + v
            clamped += res.clamped
            n_steps += 1
        record = {"epoch": epoch, "lr": lr, "steps": n_steps, "clamped": clamped}
        record.update({k: v / n_steps for k, v in sums.items()})
        if chart_phase:
            record["delta"] = float(np.exp(params[-1]))
        record["wall_time"] = time.perf_counter() - start
        plog.records.append(record)
        log.info("phase %d epoch %d loss %.6g lr %.3g", phase, epoch, record["loss"], lr)

    new_f = f.with_params(params[:nf])
    new_g = g.with_params(params[nf : nf + ng])
    return PhaseResult(new_f, new_g, float(params[-1]) if chart_phase else None, plog)


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"DRCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHBdII")


def save_checkpoint(path, f: GlobalMapping, g: GlobalMapping, log_delta: float | None = None,
                    phase: int = 0) -> None:
    """Checkpoint layout (little endian): magic b"DRCK", uint16 version, uint8 phase,
    float64 log_delta (NaN when absent), uint32 len(F doc), uint32 len(G doc), F doc, G doc.
    Each doc is a model document as written by ``mapping.serialize``."""
    df, dg = serialize(f), serialize(g)
    ld = float("nan") if log_delta is None else float(log_delta)
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, phase, ld, len(df), len(dg))
    Path(path).write_bytes(header + df + dg)


def load_checkpoint(path) -> tuple[GlobalMapping, GlobalMapping, float | None, int]:
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise ModelFormatError(f"{path}: checkpoint truncated")
    magic, version, phase, ld, nf, ng = _CKPT_HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise ModelFormatError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise ModelFormatError(f"{path}: unsupported checkpoint version {version}")
    body = blob[_CKPT_HEADER.size :]
    if len(body) != nf + ng:
        raise ModelFormatError(f"{path}: checkpoint length fields do not match payload")
    f, g = deserialize(body[:nf]), deserialize(body[nf:])
    return f, g, None if np.isnan(ld) else ld, phase


# -- framework --------------------------------------------------------------


@dataclass
class FrameworkResult:
    f: GlobalMapping
    g: GlobalMapping
    log_delta: float
    logs: list[PhaseLog]
    checkpoints: list[Path]
    report: str


def _phase_summary(plog: PhaseLog) -> str:
    if not plog.records:
        return f"phase {plog.phase}: 0 epochs"
    first, last = plog.records[0], plog.records[-1]
    extra = f" delta {last['delta']:.6g}" if "delta" in last else ""
    return (f"phase {plog.phase}: {len(plog.records)} epochs, loss {first['loss']:.6g} -> "
            f"{last['loss']:.6g}, final lr {last['lr']:.6g}{extra}")


def run_framework(config: TrainConfig, paired_manifest, chart_manifest, out_dir,
                  test_manifest=None, phases: Sequence[int] = (1, 2, 3),
                  init: tuple[GlobalMapping, GlobalMapping, float | None] | None = None) -> FrameworkResult:
    """Phase I -> II -> III with weight transfer, writing ``phase{n}.model`` after each phase,
    ``train_log.jsonl`` (deterministic), ``timing.jsonl`` and ``report.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = fileio.load_pairs(paired_manifest) if {1, 3} & set(phases) else []
    charts = fileio.load_chart_items(chart_manifest) if 2 in phases else []
    if init is None:
        f, g, log_delta = init_baseline("srgb2xyz", config.knots), init_baseline("xyz2srgb", config.knots), None
    else:
        f, g, log_delta = init
    if log_delta is None:
        log_delta = float(np.log(config.delta_init))

    logs, ckpts = [], []
    for phase in phases:
        data = charts if phase == 2 else pairs
        res = run_phase(phase, f, g, data, config, log_delta=log_delta)
        f, g = res.f, res.g
        if res.log_delta is not None:
            log_delta = res.log_delta
        path = out / f"phase{phase}.model"
        save_checkpoint(path, f, g, log_delta, phase)
        ckpts.append(path)
        logs.append(res.log)

    (out / "train_log.jsonl").write_text("".join(line + "\n" for pl in logs for line in pl.lines()))
    (out / "timing.jsonl").write_text(
        "".join(line + "\n" for pl in logs for line in pl.lines(timing=True))
    )
    lines = ["# training report", f"config {json.dumps(config_to_dict(config), sort_keys=True)}"]
    lines += [_phase_summary(pl) for pl in logs]
    report = "\n".join(lines) + "\n"
    if test_manifest is not None:
        report += "\n" + format_report(evaluate_protocol(f, g, fileio.load_pairs(test_manifest)), "trained")
    (out / "report.txt").write_text(report)
    return FrameworkResult(f, g, log_delta, logs, ckpts, report)


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["epochs_per_phase"] = list(config.epochs_per_phase)
    d["deltae_variant"] = config.deltae_variant.value
    d["srgb_recon_mode"] = config.srgb_recon_mode.value
    return d


TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))
