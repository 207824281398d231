"""Run configuration: training, rendering and network settings in one JSON file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .render import RenderSettings
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    num_frequencies: int = 6
    hidden: int = 128
    depth: int = 6
    skip: int = 3
    dtype: str = "float32"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    eval_samples: int = 512
    checkpoint_every: int = 1000
    log_every: int = 100
    mouth_filter: bool = False
    retarget_density: str = "analytic"
    data: str | None = None
    out: str | None = None

    def validate(self) -> None:
        try:
            self.train.validate()
            self.render.__post_init__()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.retarget_density not in ("analytic", "learned"):
            raise ConfigError(f"retarget_density must be analytic|learned, got {self.retarget_density!r}")
        if self.network.dtype not in ("float32", "float64"):
            raise ConfigError(f"network.dtype must be float32|float64, got {self.network.dtype!r}")
        if self.checkpoint_every < 1 or self.eval_samples < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every, eval_samples and log_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["adam_betas"] = list(d["train"]["adam_betas"])
        if d["render"]["background"] is not None:
            d["render"]["background"] = list(d["render"]["background"])
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(data: dict) -> RunConfig:
    data = dict(data)
    train = _build(TrainConfig, data.pop("train", {}), "train")
    render = dict(data.pop("render", {}))
    if render.get("background") is not None:
        render["background"] = tuple(render["background"])
    render = _build(RenderSettings, render, "render")
    network = _build(NetworkConfig, data.pop("network", {}), "network")
    cfg = _build(RunConfig, data, "run")
    cfg.train, cfg.render, cfg.network = train, render, network
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        from .data import MissingFileError

        raise MissingFileError(f"config not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data)
