"""Run configuration: nested dataclasses with JSON round-tripping and ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .objective import LossWeights
from .priornet import NetConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class SyntheticSpec:
    clusters: int = 3
    per_cluster: int = 100
    image_size: int = 64
    train_views: int = 3
    eval_views: int = 2
    ring_radius: float = 3.3
    elevation_deg: float = 25.0
    fov_deg: float = 45.0
    floaters: int = 0            # spurious Gaussians added to the initial training scene
    init_noise: float = 0.02     # position jitter of the initial scene, fraction of extent
    seed: int = 0


@dataclass
class TrainConfig:
    iterations: int = 1500
    grouping_iter: int = 100
    group_min: int = 16
    group_max: int = 64
    knn_k: int = 10
    min_group_size: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_positions: float = 0.1    # multipliers of lr per parameter block
    lr_rotations: float = 1.0
    lr_scales: float = 5.0
    lr_colors: float = 10.0
    lr_opacities: float = 20.0
    lr_latents: float = 1.0
    lr_network: float = 1.0
    use_priornet: bool = True
    train_base_after_grouping: bool = True
    intra_group_edges: bool = True
    masked_l1: bool = True
    regroup_every: int = 0       # 0 disables periodic re-partitioning
    descriptor_every: int = 500
    densify: bool = False
    densify_interval: int = 100
    densify_until: int = 1000
    densify_grad_threshold: float = 2e-4
    densify_scale_fraction: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 2000
    eval_every: int = 0

    def validate(self) -> None:
        if not 0 <= self.grouping_iter < self.iterations:
            raise ConfigError("train.grouping_iter: must satisfy 0 <= grouping_iter < iterations")
        if not 1 <= self.group_min <= self.group_max:
            raise ConfigError("train.group_min/group_max: need 1 <= group_min <= group_max")
        if self.knn_k < 2:
            raise ConfigError("train.knn_k: must be at least 2")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr") and getattr(self, f.name) < 0:
                raise ConfigError(f"train.{f.name}: must be non-negative")


@dataclass
class RunConfig:
    data: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    out_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True

    def validate(self, check_paths: bool = True) -> None:
        import os
        self.train.validate()
        if check_paths and self.data is not None and not os.path.isdir(self.data):
            raise ConfigError(f"data: directory {self.data!r} does not exist")
        try:
            LossWeights(**dataclasses.asdict(self.loss))
            NetConfig(**dataclasses.asdict(self.net))
        except ValueError as err:
            raise ConfigError(f"loss/net: {err}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _build(cls, d: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{prefix}{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        hint = hints[f.name]
        value = d[f.name]
        if dataclasses.is_dataclass(hint):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{f.name}: expected an object")
            kwargs[f.name] = _build(hint, value, f"{prefix}{f.name}.")
        else:
            kwargs[f.name] = _coerce(value, hint, prefix + f.name)
    try:
        return cls(**kwargs)
    except ValueError as err:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {err}") from None


def _coerce(value, hint, name):
    args = typing.get_args(hint)
    if args and type(None) in args:
        if value is None or value == "null":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {hint.__name__}") from None
    return value


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.field=value`` strings (JSON values accepted) and rebuild the config."""
    d = config.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"{key}: unknown section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown field")
        node[parts[-1]] = value
    return RunConfig.from_dict(d)


def describe_fields(cls=RunConfig, prefix="") -> list[tuple[str, str, object]]:
    """Flattened (name, type, default) rows for help output."""
    rows = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            rows += describe_fields(hint, prefix + f.name + ".")
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        rows.append((prefix + f.name, getattr(hint, "__name__", str(hint)), default))
    return rows
