"""Pipeline configuration (YAML) and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .tensor.io import ArchiveError, ArchiveVersionError, read_archive, write_archive


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    train_split: str = "train"
    val_split: str = "val"
    crop_frames: int = 768
    window_frames: int = 768
    overlap: float = 0.25


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    levels: int = 4
    mlp_ratio: int = 2
    range_base: float = 4.0
    tcn_stages: int = 3
    tcn_layers: int = 10
    tcn_channels: int = 64
    include_background_confidence: bool = False
    uncovered: str = "uniform"
    # backbone path (clip datasets only)
    backbone_depth: int = 2
    backbone_dim: int = 32
    backbone_heads: int = 4
    patch_t: int = 16
    patch_s: int = 10
    freeze_backbone: bool = True
    adapter_kind: str = "cea"
    adapter_r: int = 4
    adapter_k: int = 3
    adapter_position: str = "block"


@dataclass
class LossConfig:
    lambda_r: float = 1.0
    gamma: float = 2.0
    indicator: str = "target"
    level_weight: float = 0.0
    lambda_s: float = 0.15
    tau: float = 4.0
    detach_smoothing: bool = False


@dataclass
class AugmentConfig:
    enabled: bool = True
    A: int = 30
    K: int = 20
    draws: int = 1
    include_original: bool = False
    resample_k: bool = False


@dataclass
class TrainConfig:
    seed: int = 0
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    lr: float = 2e-4          # adapters
    lr_heads: float = 1e-3    # detector and refiner
    eval_every: int = 5


@dataclass
class EvalConfig:
    nms: float | None = 0.5     # class-aware suppression before AP only
    thresholds: list[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict | None) -> "PipelineConfig":
        return _build(cls, obj or {}, "")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(yaml.safe_load(text))

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] = ()) -> "PipelineConfig":
        obj = yaml.safe_load(Path(path).read_text()) if path else {}
        obj = obj or {}
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            *parents, leaf = key.split(".")
            node = obj
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = yaml.safe_load(raw)
        return cls.from_dict(obj)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class ConfigError(ValueError):
    pass


def _build(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(obj).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys in {where or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in obj.items():
        sub = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}{name}.")
        else:
            kwargs[name] = _coerce(value, str(fields[name].type), f"{where}{name}")
    return cls(**kwargs)


def _coerce(value, annotation: str, where: str):
    """Check a leaf value against its declared type; numeric strings such as '1e-3' become numbers."""
    kinds = [a.strip() for a in annotation.split("|")]
    if value is None and "None" in kinds:
        return None
    base = kinds[0]
    try:
        if base == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if base == "int":
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if base == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if base.startswith("list[float]"):
            return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {annotation}, got {value!r}") from None
    return value


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1
_META = "__meta__"


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TensorNameError(CheckpointError):
    pass


def _encode(obj: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode(arr: np.ndarray) -> dict:
    return json.loads(bytes(arr.astype(np.uint8)).decode("utf-8"))


def checkpoint_bytes(tensors: dict[str, np.ndarray], config: PipelineConfig, extra: dict | None = None) -> bytes:
    meta = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "config_digest": config.digest(),
            "extra": extra or {}}
    buf = io.BytesIO()
    write_archive(buf, {_META: _encode(meta), **{k: tensors[k] for k in sorted(tensors)}})
    return buf.getvalue()


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: PipelineConfig,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(tensors, config, extra))


def load_checkpoint(path: str | Path, expected_config: PipelineConfig | None = None,
                    expected_names: set[str] | None = None) -> tuple[dict[str, np.ndarray], PipelineConfig, dict]:
    """Returns (tensors, stored config, extra metadata)."""
    try:
        with open(path, "rb") as fh:
            raw = read_archive(fh)
    except ArchiveVersionError as err:
        raise CheckpointVersionError(f"{path}: {err}") from None
    except ArchiveError as err:
        raise CheckpointError(f"{path}: {err}") from None
    if _META not in raw:
        raise CheckpointError(f"{path}: no metadata record")
    meta = _decode(raw.pop(_META))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    config = PipelineConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config.digest() != meta["config_digest"]:
        warnings.warn(f"{path}: config digest {meta['config_digest']} differs from current {expected_config.digest()}",
                      stacklevel=2)
    if expected_names is not None:
        missing = sorted(set(expected_names) - set(raw))
        unexpected = sorted(set(raw) - set(expected_names))
        if missing or unexpected:
            raise TensorNameError(f"{path}: missing tensors {missing}, unexpected {unexpected}")
    return raw, config, meta.get("extra", {})
