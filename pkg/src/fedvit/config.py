"""INI run configuration with the training protocol defaults baked in."""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import SkewSpec
from .fed import FedConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a path to an FVD1 file
    per_client_n: int = 600
    alpha: float = 0.5
    feature_shift: float = 0.3
    class_sep: float = 0.12
    min_per_class: int = 5
    holdout_frac: float = 0.1
    seed: Optional[int] = None  # defaults to the fed seed

    @property
    def is_synthetic(self) -> bool:
        return self.source == "synthetic"


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/default"

    def skew(self) -> SkewSpec:
        seed = self.fed.seed if self.data.seed is None else self.data.seed
        return SkewSpec(alpha=self.data.alpha, feature_shift=self.data.feature_shift, seed=seed)


def _coerce(cls, section: configparser.SectionProxy, name: str):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        t = str(types[key])
        try:
            if "int" in t and "Optional" in t:
                out[key] = None if raw.strip().lower() in ("", "none") else int(raw)
            elif "int" in t:
                out[key] = int(raw)
            elif "float" in t:
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        except ValueError as e:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {e}") from None
    return out


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    """Parse and fully validate; ``FEDVIT_SEED`` overrides ``[fed] seed``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    unknown = set(cp.sections()) - {"model", "fed", "data", "output"}
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    empty = configparser.ConfigParser()
    empty.read_dict({"x": {}})

    def sec(name):
        return cp[name] if cp.has_section(name) else empty["x"]

    try:
        model = ViTConfig(**_coerce(ViTConfig, sec("model"), "model"))
        fed_kw = _coerce(FedConfig, sec("fed"), "fed")
        env_seed = os.environ.get("FEDVIT_SEED")
        if env_seed is not None:
            fed_kw["seed"] = int(env_seed)
        fed = FedConfig(**fed_kw)
        data = DataConfig(**_coerce(DataConfig, sec("data"), "data"))
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    if data.per_client_n <= 0 or data.min_per_class < 0 or not 0 <= data.holdout_frac < 1:
        raise ConfigError("[data] per_client_n > 0, min_per_class >= 0, holdout_frac in [0, 1) required")
    if data.class_sep < 0:
        raise ConfigError("[data] class_sep must be >= 0")
    if not data.is_synthetic:
        p = Path(data.source)
        if not p.is_absolute():
            p = Path(base_dir) / p
        if not p.is_file():
            raise ConfigError(f"[data] source {data.source!r} does not exist")
        data.source = str(p)
    cfg = RunConfig(model, fed, data, sec("output").get("dir", "runs/default"))
    try:
        cfg.skew()
    except ValueError as e:
        raise ConfigError(f"[data] {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, path.parent)


def dump_config(cfg: RunConfig) -> str:
    lines = ["[model]"]
    lines += [f"{f.name} = {getattr(cfg.model, f.name)}" for f in dataclasses.fields(ViTConfig)]
    lines += ["", "[fed]"]
    lines += [f"{f.name} = {getattr(cfg.fed, f.name)}" for f in dataclasses.fields(FedConfig)]
    lines += ["", "[data]"]
    lines += [f"{f.name} = {getattr(cfg.data, f.name)}" for f in dataclasses.fields(DataConfig)]
    lines += ["", "[output]", f"dir = {cfg.out}", ""]
    return "\n".join(lines)
