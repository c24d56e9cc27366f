"""Run configuration: a versioned JSON document mapped onto nested dataclasses."""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from ..errors import ConfigError

SCHEMA_VERSION = 1
BUILTIN_MESH = "builtin:toy_car"
BUILTIN_SELECTIONS = ("builtin:global", "builtin:local")
MODES = ("diffusion", "one-step")


@dataclass
class PoseRanges:
    elevation: list = field(default_factory=lambda: [0.0, 50.0])
    azimuth: list = field(default_factory=lambda: [0.0, 360.0])
    distance: list = field(default_factory=lambda: [6.0, 14.0])

    def as_dict(self):
        return {k: tuple(v) for k, v in asdict(self).items()}


@dataclass
class EnvironmentConfig:
    ambient: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    diffuse_color: float = 1.0
    specular: list = field(default_factory=lambda: [0.2, 0.2, 0.2])
    shininess: float = 10.0
    light_direction: list = field(default_factory=lambda: [0.3, 1.0, 0.4])
    # training-time lighting randomization
    eot_diffuse_range: list = field(default_factory=lambda: [1.0, 15.0])
    eot_min_light_elevation: float = 20.0


@dataclass
class LossWeights:
    alpha: float = 0.05
    beta: float = 1.0
    gamma: float = 1.0
    mu: float = 2.5
    tau: float = 2.0
    c_ru: float = 0.15
    palette: str = None


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    batch_size: int = 4
    step_size: float = 2.0
    ascend: bool = False


@dataclass
class DiffusionSettings:
    steps: int = 10
    sigma_max: float = 0.5
    generator_channels: list = field(default_factory=lambda: [32, 64, 128])


@dataclass
class DetectorConfig:
    name: str = "toy"
    weights: str = None
    train_scenes: int = 1200
    val_scenes: int = 240
    # upper bound; training stops at the first epoch that passes the gate
    train_epochs: int = 30
    stop_at_gate: bool = True
    gate: float = 0.9
    seed: int = 1


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    preset: str = "desk"
    mesh: str = BUILTIN_MESH
    selection: str = "builtin:global"
    texture_resolution: list = field(default_factory=lambda: [64, 64])
    render_resolution: list = field(default_factory=lambda: [128, 128])
    pose_ranges: PoseRanges = field(default_factory=PoseRanges)
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mode: str = "diffusion"
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    backgrounds: str = None
    scenes: list = field(default_factory=lambda: ["grass", "desert", "highway", "urban", "plain"])
    train_views: int = 128
    out: str = "runs/default"

    # -- serialization

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")
        return path

    @classmethod
    def from_dict(cls, data):
        data = copy.deepcopy(data)
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version} (expected {SCHEMA_VERSION})")
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def config_hash(self):
        """SHA-256 of the canonical JSON without the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes):
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)

    # -- validation

    def validate(self, check_paths=True):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if any(int(x) < 8 for x in self.texture_resolution):
            raise ConfigError("texture resolution must be at least 8x8")
        if any(int(x) % 32 for x in self.render_resolution):
            raise ConfigError("render resolution must be a multiple of 32")
        if self.optimizer.epochs < 1 or self.optimizer.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.train_views < 1:
            raise ConfigError("train_views must be >= 1")
        for key, (lo, hi) in self.pose_ranges.as_dict().items():
            if lo > hi:
                raise ConfigError(f"inverted pose range {key}: [{lo}, {hi}]")
        if check_paths:
            for name in ("mesh", "selection", "backgrounds"):
                value = getattr(self, name)
                if value and not str(value).startswith("builtin:") and not Path(value).exists():
                    raise ConfigError(f"{name} path does not exist: {value}")
            for name, value in (("palette", self.loss.palette), ("detector weights", self.detector.weights)):
                if value and not Path(value).exists():
                    raise ConfigError(f"{name} path does not exist: {value}")
        if self.selection.startswith("builtin:") and self.selection not in BUILTIN_SELECTIONS:
            raise ConfigError(f"unknown built-in selection {self.selection!r}; choose from {BUILTIN_SELECTIONS}")
        return self


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            value = _build(type(default), value, f"{where}.{name}")
        kwargs[name] = value
    return cls(**kwargs)


PRESETS = {
    "desk": {},
    "full": {
        "preset": "full",
        "texture_resolution": [480, 480],
        "render_resolution": [416, 416],
        "pose_ranges": {"elevation": [0.0, 50.0], "azimuth": [0.0, 360.0], "distance": [5.0, 50.0]},
        "optimizer": {"batch_size": 8},
        "train_views": 2000,
        "detector": {"train_scenes": 4000, "val_scenes": 500, "stop_at_gate": False},
    },
}


def preset_config(name="desk", **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = RunConfig().to_dict()
    _merge(d, PRESETS[name])
    _merge(d, overrides)
    return RunConfig.from_dict(d)


def _merge(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v
