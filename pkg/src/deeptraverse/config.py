"""Declarative run configuration and its plain-text file format.

The file is `key = value` per line, `#` comments, versioned through
`config_version`. Stages are compact triples/quadruples:

    stages = 16:3:1, 32:3:2, 64:3:2        out_channels:blocks:stride
    stages = 16:3:1:4, ...                 optional per-stage recursion

Unknown keys are rejected so typos fail loudly. `serialize_config` emits a
canonical form whose git-style content hash identifies the run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass
class StageConfig:
    out_channels: int
    num_blocks: int
    stride: int
    recursion_override: int | None = None


@dataclass
class ModelConfig:
    input_channels: int = 3
    stem_channels: int = 16
    stages: list[StageConfig] = field(default_factory=list)
    reduction: int = 8
    recursion: int = 2
    dropout_rate: float = 0.1
    num_classes: int = 10
    depthwise_kernel: int = 3
    width_floor: int = 4

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be >= 1, got {self.stem_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {self.reduction}")
        if self.recursion < 0:
            raise ConfigError(f"recursion must be >= 0, got {self.recursion}")
        if self.depthwise_kernel < 1 or self.depthwise_kernel % 2 == 0:
            raise ConfigError(f"depthwise_kernel must be odd and >= 1, got {self.depthwise_kernel}")
        if self.width_floor < 1:
            raise ConfigError(f"width_floor must be >= 1, got {self.width_floor}")
        if not self.stages:
            raise ConfigError("stages must contain at least one stage")
        for i, st in enumerate(self.stages):
            if st.out_channels < 1:
                raise ConfigError(f"stages[{i}].out_channels must be >= 1, got {st.out_channels}")
            if st.num_blocks < 1:
                raise ConfigError(f"stages[{i}].num_blocks must be >= 1, got {st.num_blocks}")
            if st.stride not in (1, 2):
                raise ConfigError(f"stages[{i}].stride must be 1 or 2, got {st.stride}")
            if st.recursion_override is not None and st.recursion_override < 0:
                raise ConfigError(f"stages[{i}].recursion_override must be >= 0")


@dataclass
class TrainSettings:
    dataset: str = "cifar10"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 100
    augment: str = "standard"
    schedule: str = "cosine"
    blob_train_size: int = 1000
    blob_test_size: int = 200
    blob_resolution: int = 16

    def validate(self) -> None:
        if self.dataset not in ("cifar10", "cifar100", "mnist", "blobs"):
            raise ConfigError(f"dataset must be cifar10|cifar100|mnist|blobs, got {self.dataset!r}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.augment not in ("none", "standard"):
            raise ConfigError(f"augment must be none|standard, got {self.augment!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be cosine|constant, got {self.schedule!r}")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainSettings

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()


def dt_tiny(num_classes: int = 10, input_channels: int = 3) -> ModelConfig:
    """The reference desk-scale configuration used throughout the test suite."""
    return ModelConfig(
        input_channels=input_channels,
        stem_channels=16,
        stages=[StageConfig(16, 3, 1), StageConfig(32, 3, 2), StageConfig(64, 3, 2)],
        reduction=8,
        recursion=2,
        dropout_rate=0.1,
        num_classes=num_classes,
    )


def tiny_smoke(num_classes: int = 10, input_channels: int = 3) -> ModelConfig:
    """Two-block model small enough for exhaustive gradient checking."""
    return ModelConfig(
        input_channels=input_channels,
        stem_channels=8,
        stages=[StageConfig(8, 1, 1), StageConfig(16, 1, 2)],
        reduction=4,
        recursion=1,
        dropout_rate=0.0,
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# text format


def _format_stages(stages: list[StageConfig]) -> str:
    parts = []
    for st in stages:
        s = f"{st.out_channels}:{st.num_blocks}:{st.stride}"
        if st.recursion_override is not None:
            s += f":{st.recursion_override}"
        parts.append(s)
    return ", ".join(parts)


def _parse_stages(text: str) -> list[StageConfig]:
    stages = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        bits = chunk.split(":")
        if len(bits) not in (3, 4):
            raise ConfigError(f"stage entry {chunk!r} must be out:blocks:stride[:recursion]")
        try:
            nums = [int(b) for b in bits]
        except ValueError as exc:
            raise ConfigError(f"stage entry {chunk!r} has a non-integer field") from exc
        stages.append(StageConfig(nums[0], nums[1], nums[2], nums[3] if len(bits) == 4 else None))
    return stages


_MODEL_INT = ("input_channels", "stem_channels", "reduction", "recursion", "num_classes",
              "depthwise_kernel", "width_floor")
_TRAIN_INT = ("batch_size", "epochs", "blob_train_size", "blob_test_size", "blob_resolution")
_TRAIN_FLOAT = ("lr", "momentum", "weight_decay")
_TRAIN_STR = ("dataset", "augment", "schedule")


def parse_config(text: str) -> RunConfig:
    model = ModelConfig()
    train = TrainSettings()
    seen_version = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "config_version":
                if int(value) != CONFIG_VERSION:
                    raise ConfigError(f"unsupported config_version {value}, expected {CONFIG_VERSION}")
                seen_version = True
            elif key == "stages":
                model.stages = _parse_stages(value)
            elif key == "dropout_rate":
                model.dropout_rate = float(value)
            elif key in _MODEL_INT:
                setattr(model, key, int(value))
            elif key in _TRAIN_INT:
                setattr(train, key, int(value))
            elif key in _TRAIN_FLOAT:
                setattr(train, key, float(value))
            elif key in _TRAIN_STR:
                setattr(train, key, value)
            else:
                raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: bad value {value!r} (line {lineno})") from exc
    if not seen_version:
        raise ConfigError("config file is missing the config_version field")
    cfg = RunConfig(model=model, train=train)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form: fixed key order, all defaults materialized."""
    lines = [f"config_version = {CONFIG_VERSION}"]
    m, t = cfg.model, cfg.train
    lines.append(f"input_channels = {m.input_channels}")
    lines.append(f"stem_channels = {m.stem_channels}")
    lines.append(f"stages = {_format_stages(m.stages)}")
    lines.append(f"reduction = {m.reduction}")
    lines.append(f"recursion = {m.recursion}")
    lines.append(f"dropout_rate = {m.dropout_rate!r}")
    lines.append(f"num_classes = {m.num_classes}")
    lines.append(f"depthwise_kernel = {m.depthwise_kernel}")
    lines.append(f"width_floor = {m.width_floor}")
    lines.append(f"dataset = {t.dataset}")
    lines.append(f"lr = {t.lr!r}")
    lines.append(f"momentum = {t.momentum!r}")
    lines.append(f"weight_decay = {t.weight_decay!r}")
    lines.append(f"batch_size = {t.batch_size}")
    lines.append(f"epochs = {t.epochs}")
    lines.append(f"augment = {t.augment}")
    lines.append(f"schedule = {t.schedule}")
    lines.append(f"blob_train_size = {t.blob_train_size}")
    lines.append(f"blob_test_size = {t.blob_test_size}")
    lines.append(f"blob_resolution = {t.blob_resolution}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Git-blob-style sha1 of the canonical config text."""
    payload = serialize_config(cfg).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()
