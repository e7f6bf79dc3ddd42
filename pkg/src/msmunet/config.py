"""Training configuration and its flat key=value text format."""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import AugmentConfig, WindowSpec
from .model import ModelConfig

AUG_PREFIX = "aug_"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 5e-4
    min_lr: float = 0.0
    period: int = 32
    weight_decay: float = 0.01
    epochs: int = 40
    batch_size: int = 4
    max_steps: int = 0  # 0 means no cap
    seed: int = 0
    window_lo: float = -100.0
    window_hi: float = 240.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    swap_edge_weights: bool = False
    val_fraction: float = 0.2
    data: str = ""
    val_data: str = ""
    out: str = ""

    def __post_init__(self):
        WindowSpec(self.window_lo, self.window_hi)
        if self.epochs < 1 or self.batch_size < 1 or self.period < 1:
            raise ValueError("epochs, batch_size and period must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.window_lo, self.window_hi)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(model=ModelConfig.paper_scale(), epochs=300, batch_size=14, **overrides)

    def items(self) -> list[tuple[str, object]]:
        """Flat (key, value) pairs: model fields, run fields, then aug_* fields."""
        out = [(f.name, getattr(self.model, f.name)) for f in fields(ModelConfig)]
        for f in fields(self):
            if f.name not in ("model", "augment"):
                out.append((f.name, getattr(self, f.name)))
        out += [(AUG_PREFIX + f.name, getattr(self.augment, f.name)) for f in fields(AugmentConfig)]
        return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple:
            args = typing.get_args(hint)
            parts = [p.strip() for p in text.split(",")] if text.strip() else []
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_parse(p, args[0], key) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_parse(p, a, key) for p, a in zip(parts, args))
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {text!r} ({exc})") from None
    raise TypeError(f"config key {key!r}: unsupported type {hint}")


def serialize(config: TrainConfig) -> str:
    lines = ["# msmunet training config"]
    lines += [f"{k}={_format(v)}" for k, v in config.items()]
    return "\n".join(lines) + "\n"


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse key=value lines; keys not given keep the values of ``base``."""
    base = base or TrainConfig()
    model_hints, run_hints, aug_hints = _hints(ModelConfig), _hints(TrainConfig), _hints(AugmentConfig)
    model_kw = {f.name: getattr(base.model, f.name) for f in fields(ModelConfig)}
    aug_kw = {f.name: getattr(base.augment, f.name) for f in fields(AugmentConfig)}
    run_kw = {f.name: getattr(base, f.name) for f in fields(TrainConfig) if f.name not in ("model", "augment")}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_kw:
            model_kw[key] = _parse(value, model_hints[key], key)
        elif key in run_kw:
            run_kw[key] = _parse(value, run_hints[key], key)
        elif key.startswith(AUG_PREFIX) and key[len(AUG_PREFIX):] in aug_kw:
            name = key[len(AUG_PREFIX):]
            aug_kw[name] = _parse(value, aug_hints[name], key)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return TrainConfig(model=ModelConfig(**model_kw), augment=AugmentConfig(**aug_kw), **run_kw)


def load(path) -> TrainConfig:
    return parse(Path(path).read_text())


def save(config: TrainConfig, path) -> None:
    from .data import atomic_write_bytes

    atomic_write_bytes(Path(path), serialize(config).encode())


def model_config_diff(a: ModelConfig, b: ModelConfig) -> list[str]:
    """Names of ModelConfig fields that differ."""
    return [f.name for f in fields(ModelConfig) if getattr(a, f.name) != getattr(b, f.name)]
