"""Plain-text run configuration.

One ``key = value`` per line; ``#`` starts a comment. Lists are comma separated.
Every key mirrors a command-line flag (``train_manifest`` <-> ``--train-manifest``)
and flags win over file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .fusion import SENSORS
from .inference import EnsembleConfig
from .model import ModelConfig
from .train import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # model
    preset: str = "base"
    fusion: str = "embrace"
    input_mode: str = "raw"
    modalities: tuple[str, ...] = SENSORS
    p: tuple[float, ...] | None = None
    fusion_mode: str = "stochastic"
    # training
    batch_size: int = 8
    total_steps: int = 5000
    lr0: float = 1e-4
    decay_interval: int = 1000
    decay_factor: float = 2.0
    seed: int = 0
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    augment_rotation: bool = False
    # inference
    ensemble_n: int = 1
    # paths
    train_manifest: tuple[str, ...] = ()
    val_manifest: tuple[str, ...] = ()
    out_dir: str = "run"
    resume: str | None = None
    checkpoint: str | None = None
    manifest: tuple[str, ...] = ()
    output: str | None = None
    probabilities: str | None = None
    metrics_log: str | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig.preset_config(
            self.preset,
            fusion=self.fusion,
            input_mode=self.input_mode,
            modalities=tuple(self.modalities),
            p=None if self.p is None else tuple(self.p),
            fusion_mode=self.fusion_mode,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{n: getattr(self, n) for n in names})

    def ensemble_config(self) -> EnsembleConfig:
        return EnsembleConfig(self.ensemble_n, self.seed)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(clean) - set(KEYS)
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return dataclasses.replace(self, **clean)


KEYS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = str(KEYS[key].type)
    if kind.startswith("tuple[str"):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if kind.startswith("tuple[float"):
        return tuple(float(s) for s in raw.split(","))
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if raw.lower() in ("", "none") and "None" in kind:
        return None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    seen_at = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen_at:
            raise ConfigurationError(f"{source}:{lineno}: key {key!r} already set on line {seen_at[key]}")
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        seen_at[key] = lineno
    return values


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        cfg = cfg.with_overrides(parse_config_text(text, str(path)))
        base = path.parent
        # manifest paths in a config file are relative to that file
        for key in ("train_manifest", "val_manifest", "manifest"):
            setattr(cfg, key, tuple(str(base / p) for p in getattr(cfg, key)))
    return cfg.with_overrides(overrides or {})


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for name in KEYS:
        value = getattr(cfg, name)
        if value is None or value == ():
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
