"""Command-line entry point: ``derender <subcommand> ...``.

Failures print one line ``error: <kind>: <message>`` to stderr and exit 1;
usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .chart import chart_delta_e, load_annotation, load_reference
from .color import ColorState, DeltaEVariant
from .mapping import Direction, apply, deserialize, MAGIC
from .metrics import evaluate_protocol, format_report

log = logging.getLogger("derender")


def _load_models(path):
    """Checkpoint -> (F, G, log_delta, phase); a single model document fills one slot."""
    from .training import load_checkpoint

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such model file")
    blob = path.read_bytes()
    if blob[:4] == MAGIC:
        m = deserialize(blob)
        return (m, None, None, 0) if m.direction is Direction.FORWARD_F else (None, m, None, 0)
    return load_checkpoint(path)


def cmd_synth(args) -> int:
    from .config import load_config
    from .synth import generate_dataset

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.data_dir
    paths = generate_dataset(cfg.synth, out)
    print(f"wrote {len(paths.files)} files under {paths.root}")
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .training import load_checkpoint, run_framework

    cfg = load_config(args.config)
    train_m, test_m, chart_m = cfg.manifests()
    phases = (1, 2, 3) if args.phase == "all" else (int(args.phase),)
    init = None
    if args.init:
        f, g, ld, _ = load_checkpoint(args.init)
        init = (f, g, ld)
    out = Path(args.out) if args.out else cfg.out_dir
    test = test_m if test_m.is_file() else None
    res = run_framework(cfg.train, train_m, chart_m, out, test_manifest=test, phases=phases, init=init)
    for p in res.checkpoints:
        print(f"checkpoint {p}")
    print(f"report {out / 'report.txt'}")
    return 0


def cmd_eval(args) -> int:
    f, g, _, _ = _load_models(args.model)
    if f is None or g is None:
        raise ValueError("eval needs a checkpoint holding both directions")
    report = format_report(evaluate_protocol(f, g, fileio.load_pairs(args.manifest)), args.method)
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_convert(args) -> int:
    f, g, _, _ = _load_models(args.model)
    direction = Direction(args.direction)
    model = f if direction is Direction.FORWARD_F else g
    if model is None:
        raise ValueError(f"{args.model} holds no {direction.value} mapping")
    image = fileio.load_image(args.input, direction.input_state)
    out = apply(model, image)
    fileio.save_image(out, args.output, args.bit_depth)
    print(f"wrote {args.output}")
    return 0


def cmd_chart_eval(args) -> int:
    annotation = load_annotation(args.annotation)
    reference = load_reference(args.reference)
    if args.model:
        f, _, _, _ = _load_models(args.model)
        if f is None:
            raise ValueError(f"{args.model} holds no srgb2xyz mapping")
        xyz = apply(f, fileio.load_image(args.image, ColorState.SRGB))
    else:
        xyz = fileio.load_image(args.image, ColorState.XYZ)
    score = chart_delta_e(xyz, annotation, reference, DeltaEVariant(args.variant), shrink_factor=args.shrink)
    print(f"# patch\tdelta_e\tL\ta\tb ({args.variant})")
    for i, (de, lab) in enumerate(zip(score.per_patch, score.lab)):
        print(f"{i}\t{de:.6f}\t{lab[0]:.4f}\t{lab[1]:.4f}\t{lab[2]:.4f}")
    print(f"mean\t{score.mean:.6f}")
    return 0


def cmd_inspect(args) -> int:
    f, g, ld, phase = _load_models(args.model)
    doc = {"file": str(args.model), "phase": phase, "log_delta": ld,
           "delta": None if ld is None else float(np.exp(ld)), "models": []}
    for m in (f, g):
        if m is None:
            continue
        doc["models"].append({
            "direction": m.direction.value,
            "knots": m.knots,
            "ordinates": m.ordinates().round(8).tolist(),
            "matrix": m.matrix.tolist(),
        })
    print(json.dumps(doc, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="derender", description="sRGB <-> CIE-XYZ de-rendering with chart self-supervision")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run one phase or the full framework")
    s.add_argument("--config", required=True)
    s.add_argument("--phase", choices=["1", "2", "3", "all"], default="all")
    s.add_argument("--init", help="checkpoint to start from (default: baseline)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="table-style PSNR/SSIM report on a paired manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--method", default="model")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("convert", help="apply a model to one image")
    s.add_argument("--model", required=True)
    s.add_argument("--direction", choices=[d.value for d in Direction], required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--bit-depth", type=int, choices=[8, 16])
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("chart-eval", help="per-patch Delta E report")
    s.add_argument("--image", required=True)
    s.add_argument("--annotation", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--model", help="if given, the image is sRGB and mapped to XYZ first")
    s.add_argument("--variant", choices=[v.value for v in DeltaEVariant], default=DeltaEVariant.PAPER_L1.value)
    s.add_argument("--shrink", type=float, default=0.5)
    s.set_defaults(func=cmd_chart_eval)

    s = sub.add_parser("inspect", help="dump model parameters")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
