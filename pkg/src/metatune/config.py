"""Flat ``key = value`` run configuration with command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import Variant

TRUE = {"1", "true", "yes", "on"}
FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """A configuration file or override could not be parsed or validated."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    benchmark: str = "benchmark"
    out: str = "run"
    # benchmark generation
    n_images: int = 2000
    image_size: int = 64
    # search
    variant: str = "static"
    stages: str = "loss,aug"
    episodes: int = 200
    eta: float = 0.0005
    sigma0: float = 0.1
    sigma_min: float = 0.01
    n_trials: int = 8
    aug_init: float = 0.5
    # proxy tasks
    n_proxy_novel: int = 4
    proxy_seed: int = 0
    k_shot: int = 5
    count_by: str = "instances"
    inner_iterations: int = 100
    inner_lr: float = 24.0
    batch_images: int = 8
    reward: str = "novel"
    reward_scale: float = 100.0
    reinit_model: bool = True
    normalize_rewards: bool = True
    proxy_imitation: bool = True
    # base training and final fine-tuning
    pretrain_iterations: int = 10000
    pretrain_lr: float = 4.0
    pretrain_batch: int = 16
    final_repeats: int = 5
    ablate_seeds: int = 5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and f.name not in ("seed", "proxy_seed") and not v > 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.seed < 0 or self.proxy_seed < 0:
            raise ConfigError("seeds must be non-negative")
        if self.sigma_min > self.sigma0:
            raise ConfigError("sigma_min must not exceed sigma0")
        if not 0.0 < self.aug_init < 1.0:
            raise ConfigError("aug_init must lie strictly between 0 and 1")
        try:
            Variant.parse(self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        stages = self.stage_list
        if not stages or stages not in (("loss",), ("aug",), ("loss", "aug")):
            raise ConfigError(f"stages must be 'loss', 'aug' or 'loss,aug', got {self.stages!r}")
        if self.reward not in ("novel", "all", "hm"):
            raise ConfigError(f"reward must be novel, all or hm, got {self.reward!r}")
        if self.count_by not in ("instances", "images"):
            raise ConfigError(f"count_by must be instances or images, got {self.count_by!r}")

    @property
    def stage_list(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.stages.split(",") if s.strip())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"{f.name} = {format_value(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(name: str, text: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown configuration key {name!r}")
    kind, text = kinds[name], text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in TRUE:
                return True
            if low in FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config_text(text: str) -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (which win)."""
    values = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
