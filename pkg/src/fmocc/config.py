"""Run configuration: nested dataclasses, YAML file form, canonical hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .masking import MaskSchedule
from .scene import SceneSpec


@dataclass
class SceneSection:
    dims: tuple[int, int, int] = (32, 32, 4)
    voxel_size_m: float = 0.4
    num_classes: int = 6
    num_boxes: int = 8
    wall_probability: float = 0.5
    noise_sigma: float = 0.2
    ego: tuple[int, int, int] = (16, 16, 2)
    channels: int = 8
    prototype_seed: int = 1234

    def spec(self) -> SceneSpec:
        return SceneSpec(**dataclasses.asdict(self))


@dataclass
class DataSection:
    n_train: int = 64
    n_test: int = 16
    train_first_seed: int = 0
    test_first_seed: int = 100_000


@dataclass
class ModelSection:
    use_fmssm: bool = True
    state_size: int = 8
    depth: int = 2
    share_planes: bool = False
    head_hidden: int = 32
    emb_scale: float = 1.0
    emb_trainable: bool = True
    scan_chunk: int = 32


@dataclass
class FlowSection:
    n_euler_steps: int = 4
    t_sampling: str = "uniform"
    flow_weight: float = 1.0
    ce_weight: float = 1.0
    head_on: str = "one_step"


@dataclass
class MaskSection:
    enabled: bool = True
    beta: float = 25.0


@dataclass
class OptimSection:
    lr: float = 3e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 20


@dataclass
class TrainSection:
    epochs: int = 24
    batch_size: int = 4
    checkpoint_every: int = 4


@dataclass
class EvalSection:
    n_azimuth: int = 360
    n_elevation: int = 8
    elevation_deg: tuple[float, float] = (-30.0, 0.0)
    mask_ratios: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    mask_seed: int = 7


@dataclass
class BenchSection:
    scan_lengths: tuple[int, ...] = (256, 1024, 4096)
    euler_steps: tuple[int, ...] = (1, 2, 4, 8)
    repeats: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    scene: SceneSection = field(default_factory=SceneSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    flow: FlowSection = field(default_factory=FlowSection)
    mask: MaskSection = field(default_factory=MaskSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    # sections that change what a checkpoint contains or how it was produced
    TRAINING_SECTIONS = ("seed", "scene", "data", "model", "flow", "mask", "optim", "train")

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def canonical(self, keys=None) -> str:
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """Hash over the training-relevant sections; stored in checkpoints."""
        return hashlib.sha256(self.canonical(self.TRAINING_SECTIONS).encode()).hexdigest()

    def scene_hash(self) -> str:
        """Hash over the scene section; stored in data manifests."""
        return hashlib.sha256(self.canonical(("scene",)).encode()).hexdigest()

    def mask_schedule(self) -> MaskSchedule | None:
        if not self.mask.enabled:
            return None
        return MaskSchedule(self.mask.beta, self.train.epochs)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        return _build(cls, d or {}, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if d is not None and not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(d)

    def replace(self, **updates) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"model.use_fmssm": False})``."""
        d = self.to_dict()
        for dotted, value in updates.items():
            node = d
            *parents, leaf = dotted.split(".")
            for p in parents:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: dict[str, Any], path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(value, default, f"{path}{name}")
    return cls(**kwargs)


def _coerce(value, default, key: str):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        if default and isinstance(default[0], int) and not isinstance(default[0], bool):
            return tuple(int(v) for v in value)
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value
