"""Run configuration: a flat TOML file whose keys are TrainConfig fields,
SynthConfig fields prefixed with ``synth_``, and the paths below.

Unknown keys are rejected before anything is written.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .synth import SynthConfig
from .training import TrainConfig

OUT_DIR_ENV = "DERENDER_OUT"

PATH_KEYS = ("train_manifest", "test_manifest", "chart_manifest", "data_dir", "out_dir")
SYNTH_PREFIX = "synth_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train_manifest: Path | None = None
    test_manifest: Path | None = None
    chart_manifest: Path | None = None
    # where `synth` writes; manifests default to the files it produces
    data_dir: Path = Path("data")
    out_dir: Path = field(default_factory=lambda: Path(os.environ.get(OUT_DIR_ENV, "runs")))

    def manifests(self) -> tuple[Path, Path, Path]:
        return (
            self.train_manifest or self.data_dir / "train.txt",
            self.test_manifest or self.data_dir / "test.txt",
            self.chart_manifest or self.data_dir / "charts.txt",
        )


def known_keys() -> list[str]:
    keys = [f.name for f in fields(TrainConfig)]
    keys += [SYNTH_PREFIX + f.name for f in fields(SynthConfig)]
    return keys + list(PATH_KEYS)


def from_dict(values: dict, base_dir: Path | None = None) -> RunConfig:
    unknown = sorted(set(values) - set(known_keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    train_names = {f.name for f in fields(TrainConfig)}
    train_kw = {k: v for k, v in values.items() if k in train_names}
    synth_kw = {k[len(SYNTH_PREFIX):]: v for k, v in values.items() if k.startswith(SYNTH_PREFIX)}
    try:
        train = TrainConfig(**train_kw)
        synth = SynthConfig(**synth_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(train, synth)
    for key in PATH_KEYS:
        if key in values:
            p = Path(values[key])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            setattr(cfg, key, p)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            values = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    try:
        return from_dict(values, base_dir=path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
