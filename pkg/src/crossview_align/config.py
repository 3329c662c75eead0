"""Plain-text ``key=value`` run configuration.

Keys are ``section.field`` with sections ``data``, ``encoder``, ``loss``,
``dam`` and ``optim``; ``seed`` is top level. Blank lines and ``#`` comments
are ignored. ``encoder.placement`` accepts a preset name (``all``,
``first_layer``, ``first_4``, ``middle_4``, ``last_4``, ``none``) or a comma
separated list of layer indices.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .dam import DamConfig
from .data import SyntheticSpec
from .encoder import ConfigError, EncoderConfig, PRESETS, placement_presets
from .objectives import LossConfig


@dataclass
class OptimConfig:
    lr: float = 3.5e-4
    reference_batch: int = 64
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 12
    warmup_epochs: float = -1.0
    P: int = 8
    K: int = 4
    classifier_lr_mult: float = 1.0
    flip_prob: float = 0.5
    ckpt_every: int = 0

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    @property
    def scaled_lr(self) -> float:
        return self.lr * self.batch_size / self.reference_batch

    @property
    def warmup(self) -> float:
        return self.epochs / 6.0 if self.warmup_epochs < 0 else self.warmup_epochs

    def validate(self) -> None:
        if self.K < 2 or self.P < 2:
            raise ConfigError("PK sampling needs P >= 2 identities and K >= 2 instances")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dam: DamConfig = field(default_factory=DamConfig)
    dam_enabled: bool = True
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    placement_name: str = "all"
    seed: int = 0

    def validate(self) -> None:
        self.encoder.validate()
        self.optim.validate()
        self.data.validate()


def _coerce(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple) or default is None:
        if raw.lower() in ("", "none"):
            return None if default is None else ()
        return tuple(float(v) if "." in v or "e" in v.lower() else int(v) for v in raw.split(","))
    return raw


def _set(obj, name: str, raw: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names:
        raise ConfigError(f"unknown config key {name!r} for {type(obj).__name__}")
    try:
        object.__setattr__(obj, name, _coerce(raw, getattr(obj, name)))
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``(key, value)`` string pairs and rebuild derived fields."""
    enc = dataclasses.asdict(cfg.encoder)
    loss = dataclasses.asdict(cfg.loss)
    dam = dataclasses.asdict(cfg.dam)
    placement_name = cfg.placement_name
    explicit_placement = None
    for key, value in pairs:
        key = key.strip()
        section, _, name = key.partition(".")
        if not name:
            if key == "seed":
                cfg.seed = int(value)
                continue
            raise ConfigError(f"unknown config key {key!r}")
        if section == "encoder":
            if name == "placement":
                value = value.strip()
                if value in PRESETS:
                    placement_name, explicit_placement = value, None
                else:
                    placement_name = "custom"
                    explicit_placement = tuple(int(v) for v in value.split(",") if v.strip())
                continue
            if name not in enc:
                raise ConfigError(f"unknown config key {key!r}")
            default = enc[name]
            if name == "eta_per_layer":
                enc[name] = None if value.strip().lower() in ("", "none") else tuple(float(v) for v in value.split(","))
            else:
                enc[name] = _coerce(value, default)
        elif section == "loss":
            if name not in loss:
                raise ConfigError(f"unknown config key {key!r}")
            loss[name] = _coerce(value, loss[name])
        elif section == "dam":
            if name == "enabled":
                cfg.dam_enabled = _coerce(value, True)
            elif name in dam:
                dam[name] = _coerce(value, dam[name])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        elif section == "optim":
            _set(cfg.optim, name, value)
        elif section == "data":
            _set(cfg.data, name, value)
        else:
            raise ConfigError(f"unknown config section {section!r}")

    if explicit_placement is None and placement_name != "custom":
        enc["placement"] = placement_presets(placement_name, enc["depth"])
    elif explicit_placement is not None:
        enc["placement"] = explicit_placement
    try:
        cfg.encoder = EncoderConfig(**enc)
        cfg.loss = LossConfig(**loss)
        cfg.dam = DamConfig(**dam)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.placement_name = placement_name
    cfg.validate()
    return cfg


def parse_lines(text: str):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path: Optional[Union[str, Path]] = None, overrides=(), base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    pairs = []
    if path is not None:
        try:
            pairs.extend(parse_lines(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs.extend(overrides)
    return apply_overrides(cfg, pairs)


def config_from_text(text: str) -> RunConfig:
    return apply_overrides(RunConfig(), parse_lines(text))


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"seed={cfg.seed}"]
    for name, value in dataclasses.asdict(cfg.data).items():
        lines.append(f"data.{name}={value}")
    for name, value in dataclasses.asdict(cfg.encoder).items():
        if name == "placement":
            value = ",".join(str(i) for i in value) if value else "none"
        elif isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"encoder.{name}={value}")
    for name, value in dataclasses.asdict(cfg.loss).items():
        lines.append(f"loss.{name}={value!r}")
    lines.append(f"dam.enabled={cfg.dam_enabled}")
    for name, value in dataclasses.asdict(cfg.dam).items():
        lines.append(f"dam.{name}={value}")
    for name, value in dataclasses.asdict(cfg.optim).items():
        lines.append(f"optim.{name}={value!r}" if isinstance(value, float) else f"optim.{name}={value}")
    return "\n".join(lines) + "\n"
