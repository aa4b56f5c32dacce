"""Run configuration and its flat ``section.key = value`` text format.

Unknown keys are rejected. Values are Python literals (numbers, lists,
quoted strings, True/False); ``true``/``false`` and bare words are also
accepted for convenience.
"""

import ast
import dataclasses
import hashlib
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .errors import ConfigurationError
from .mlsqe import MlsqeConfig
from .mpmsca import AttentionConfig
from .navigator import NavigatorConfig


@dataclass
class QpConfig:
    lam: float = 2.0
    delta: int = 2
    aux_lr: float = 0.01


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 2
    schedule: str = "cosine"
    clip_norm: float = 5.0


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    augment: bool = True
    qp_records: bool = True


@dataclass
class ModelConfig:
    navigator: bool = True
    mlsqe: bool = True
    mpmsca: bool = True


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    classes: int = 8
    per_class: int = 32
    resolution: int = 64
    test_fraction: float = 0.25
    seed: int = 0
    path: str = ""

    def validate(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigurationError(f"data.kind must be synthetic or directory, got {self.kind!r}")
        if self.classes < 2:
            raise ConfigurationError(f"data.classes must be >= 2, got {self.classes}")
        if self.kind == "directory" and not self.path:
            raise ConfigurationError("data.path is required for a directory dataset")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigurationError("data.test_fraction must lie in [0, 1)")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mlsqe: MlsqeConfig = field(default_factory=MlsqeConfig)
    navigator: NavigatorConfig = field(default_factory=NavigatorConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    qp: QpConfig = field(default_factory=QpConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    output: str = "runs/default"

    def validate(self):
        self.backbone.validate()
        self.mlsqe.validate(self.backbone.stages)
        self.navigator.validate()
        self.data.validate()
        if self.data.resolution != self.backbone.resolution:
            raise ConfigurationError(
                f"data.resolution {self.data.resolution} != backbone.resolution {self.backbone.resolution}")
        if self.model.mpmsca and not (self.model.mlsqe and self.model.navigator):
            raise ConfigurationError("model.mpmsca requires model.mlsqe and model.navigator")
        if self.model.mpmsca:
            self.attention.validate(self.mlsqe.proj_channels,
                                    self.mlsqe.stages_used * self.navigator.parts)
        if self.optim.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"optim.schedule must be cosine or constant, got {self.optim.schedule!r}")
        if self.optim.warmup_epochs < 0 or self.optim.warmup_epochs > self.train.epochs:
            raise ConfigurationError("optim.warmup_epochs must lie in [0, train.epochs]")
        if self.optim.clip_norm < 0:
            raise ConfigurationError("optim.clip_norm must be >= 0 (0 disables clipping)")
        if self.qp.delta < 1:
            raise ConfigurationError("qp.delta must be >= 1")
        return self

    def hash(self):
        return hashlib.sha256(to_text(self).encode()).hexdigest()


def paper_config():
    """Hyper-parameters reported for the full-size model (448 px input)."""
    return RunConfig(
        backbone=BackboneConfig(stages=4, channels=[256, 512, 1024, 2048], blocks=1, resolution=448),
        mlsqe=MlsqeConfig(stages_used=3, proj_channels=1024, alphas=[0.7, 0.8, 0.9, 1.0]),
        navigator=NavigatorConfig(levels=3, anchor_scales=[48, 96, 192], grids=[14, 7, 4], parts=4,
                                  iou_threshold=0.25),
        attention=AttentionConfig(heads=16, top_v=3),
        qp=QpConfig(lam=2.0, delta=2, aux_lr=0.01),
        optim=OptimConfig(lr=0.01, momentum=0.9, weight_decay=5e-4, warmup_epochs=5, clip_norm=0.0),
        train=TrainConfig(epochs=50, batch_size=16),
        data=DatasetSpec(classes=200, resolution=448),
    )


def _flatten(cfg, prefix=""):
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = value
    return out


def to_text(cfg):
    return "".join(f"{k} = {v!r}\n" for k, v in sorted(_flatten(cfg).items()))


def _parse_value(raw):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def _coerce(key, value, current):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if isinstance(value, tuple):
            value = list(value)
        if not isinstance(value, list):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(current, str):
        return str(value)
    return value


def apply_overrides(cfg, items):
    """Set dotted keys on ``cfg`` in place; raises on unknown keys or bad types."""
    known = _flatten(cfg)
    for key, value in items:
        if key not in known:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        *path, attr = key.split(".")
        owner = cfg
        for part in path:
            owner = getattr(owner, part)
        setattr(owner, attr, _coerce(key, value, known[key]))
    return cfg


def parse_text(text, base=None):
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        items.append((key.strip(), _parse_value(raw)))
    cfg = base if base is not None else RunConfig()
    return apply_overrides(cfg, items)


def load(path):
    with open(path) as fh:
        return parse_text(fh.read()).validate()


def save(cfg, path):
    with open(path, "w") as fh:
        fh.write(to_text(cfg))
