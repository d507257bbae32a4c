"""Pipeline configuration: reference constants, section dataclasses and layered loading."""

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from .classicreg import IterativeRegConfig
from .errors import ConfigError
from .losses import LossWeights

# Training schedule
PHASE1_EPOCHS = 40
PHASE2_EPOCHS = 60
BASELINE_EPOCHS = 100
LR_PHASE1 = 0.001
LR_PHASE2 = 0.0001
DECAY_EVERY = 200
DECAY_GAMMA = 0.9
BATCH_SIZE = 2
MOMENTUM = 0.9

# Degradation protocol (voxel quantities are at the 256 reference grid)
REFERENCE_GRID = 256
MAX_ROTATION_DEG = 45.0
MAX_TRANSLATION_VOX = 30.0
SLICE_DISTANCES = (1, 2, 4, 8, 16)

# Corpus
N_TRAIN = 164
N_TEST = 42
N_EVAL = 4

# Fusion and evaluation
FUSION_THRESHOLD = 0.5
BOUNDARY_TOLERANCE = 2

CONS2_TARGETS = ("as-written", "pose-consistent")
FUSION_METHODS = ("gaussian", "vote", "nearest")


@dataclass
class DataConfig:
    size: int = REFERENCE_GRID
    d_vox: int = 8
    n_train: int = N_TRAIN
    n_test: int = N_TEST
    n_eval: int = N_EVAL
    seed: int = 0
    noise_sigma: float = 0.02
    max_rotation_deg: float = MAX_ROTATION_DEG
    max_translation_vox: float = MAX_TRANSLATION_VOX
    contrast_jitter: bool = True
    workers: int = 1

    def validate(self) -> None:
        if self.size < 32:
            raise ConfigError("data.size must be at least 32", {"size": self.size})
        if self.d_vox not in SLICE_DISTANCES:
            raise ConfigError(
                "data.d_vox must be one of the supported slice distances",
                {"d_vox": self.d_vox, "allowed": list(SLICE_DISTANCES)},
            )
        if self.size % self.d_vox:
            raise ConfigError(
                "data.size must be divisible by data.d_vox",
                {"size": self.size, "d_vox": self.d_vox},
            )
        if self.n_train < 1 or self.n_test < 1 or self.n_eval < 0:
            raise ConfigError(
                "study counts must be positive",
                {"n_train": self.n_train, "n_test": self.n_test, "n_eval": self.n_eval},
            )
        if self.n_eval >= self.n_train:
            raise ConfigError(
                "data.n_eval must leave at least one training study",
                {"n_train": self.n_train, "n_eval": self.n_eval},
            )
        if not 0 <= self.max_rotation_deg <= MAX_ROTATION_DEG:
            raise ConfigError("data.max_rotation_deg outside [0, 45]")
        if not 0 <= self.max_translation_vox <= MAX_TRANSLATION_VOX:
            raise ConfigError("data.max_translation_vox outside [0, 30]")
        if self.noise_sigma < 0 or self.workers < 1:
            raise ConfigError("data.noise_sigma must be >= 0 and data.workers >= 1")


@dataclass
class TrainConfig:
    phase1_epochs: int = PHASE1_EPOCHS
    phase2_epochs: int = PHASE2_EPOCHS
    baseline_epochs: int = BASELINE_EPOCHS
    lr_phase1: float = LR_PHASE1
    lr_phase2: float = LR_PHASE2
    decay_every: int = DECAY_EVERY
    decay_gamma: float = DECAY_GAMMA
    batch_size: int = BATCH_SIZE
    momentum: float = MOMENTUM
    use_momentum: bool = True
    seed: int = 0
    base_channels: int = 8
    supervised_aligner: bool = False
    cc_window: int = 9
    augment_max_rotation_deg: float = MAX_ROTATION_DEG
    augment_max_translation_vox: float = MAX_TRANSLATION_VOX
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        for name in ("phase1_epochs", "phase2_epochs", "baseline_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        for name in ("lr_phase1", "lr_phase2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.decay_every < 1 or not 0 < self.decay_gamma <= 1:
            raise ConfigError(
                "train.decay_every must be >= 1 and train.decay_gamma in (0, 1]"
            )
        if self.batch_size < 1 or self.base_channels < 1:
            raise ConfigError("train.batch_size and train.base_channels must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum must be in [0, 1)")
        if self.cc_window < 1 or self.cc_window % 2 == 0:
            raise ConfigError("train.cc_window must be a positive odd integer")
        if not 0 <= self.augment_max_rotation_deg <= MAX_ROTATION_DEG:
            raise ConfigError("train.augment_max_rotation_deg outside [0, 45]")
        if not 0 <= self.augment_max_translation_vox <= MAX_TRANSLATION_VOX:
            raise ConfigError("train.augment_max_translation_vox outside [0, 30]")
        self.weights.validate()


@dataclass
class FusionConfig:
    method: str = "gaussian"
    views: int = 3
    sigma_vox: Optional[float] = None
    threshold: float = FUSION_THRESHOLD
    cons2_target: str = "pose-consistent"

    def validate(self) -> None:
        if self.method not in FUSION_METHODS:
            raise ConfigError(
                "fusion.method unknown", {"method": self.method, "allowed": FUSION_METHODS}
            )
        if self.views not in (1, 2, 3):
            raise ConfigError("fusion.views must be 1, 2 or 3")
        if self.sigma_vox is not None and self.sigma_vox <= 0:
            raise ConfigError("fusion.sigma_vox must be positive")
        if not 0 < self.threshold < 1:
            raise ConfigError("fusion.threshold must be in (0, 1)")
        if self.cons2_target not in CONS2_TARGETS:
            raise ConfigError(
                "fusion.cons2_target unknown",
                {"cons2_target": self.cons2_target, "allowed": CONS2_TARGETS},
            )


@dataclass
class EvalConfig:
    tau: int = BOUNDARY_TOLERANCE

    def validate(self) -> None:
        if self.tau < 0:
            raise ConfigError("eval.tau must be >= 0")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    runs_dir: str = "runs"
    log_dir: str = "logs"

    def validate(self) -> None:
        for name in ("data_dir", "runs_dir", "log_dir"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ConfigError(f"paths.{name} must be a non-empty path string")


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    classicreg: IterativeRegConfig = field(default_factory=IterativeRegConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "PipelineConfig":
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "PipelineConfig":
        return _build(cls, payload, "")


DESK_PROFILE: Dict[str, Any] = {
    "data": {"size": 64, "d_vox": 8, "n_train": 10, "n_test": 4, "n_eval": 2},
    "train": {
        "phase1_epochs": 10,
        "phase2_epochs": 15,
        "baseline_epochs": 15,
        "lr_phase1": 0.01,
        "lr_phase2": 0.001,
        "augment_max_rotation_deg": 20.0,
        "augment_max_translation_vox": 30.0,
    },
}


def _build(cls, payload: Any, section: str):
    if not isinstance(payload, dict):
        raise ConfigError(
            "configuration section must be an object", {"section": section or "<root>"}
        )
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(
            "unknown configuration keys",
            {"section": section or "<root>", "keys": unknown},
        )
    kwargs = {}
    for name, value in payload.items():
        nested = _nested_type(cls, name)
        path = f"{section}.{name}" if section else name
        kwargs[name] = _build(nested, value, path) if nested else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e), {"section": section or "<root>"}) from e


def _nested_type(cls, name: str):
    default = cls.__dataclass_fields__[name].default_factory
    if default is not dataclasses.MISSING and dataclasses.is_dataclass(default):
        return default
    return None


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> Dict[str, Any]:
    """Turn 'train.weights.alpha1=0.1' into a nested dict; values parse as JSON when possible."""
    if "=" not in text:
        raise ConfigError("override must look like section.key=value", {"override": text})
    dotted, raw = text.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.strip().split(".")
    if len(keys) < 2 or not all(keys):
        raise ConfigError("override must name section.key", {"override": text})
    nested: Dict[str, Any] = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        nested = {key: nested}
    return nested


def load_config(
    path: Optional[Union[str, Path]] = None,
    desk: bool = False,
    overrides: Iterable[str] = (),
) -> PipelineConfig:
    """Layer defaults, the desk profile, a JSON file and --set overrides, then validate."""
    payload: Dict[str, Any] = PipelineConfig().to_dict()
    if desk:
        payload = _merge(payload, DESK_PROFILE)
    if path is not None:
        try:
            file_payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError("config file not found", {"path": str(path)}) from e
        except json.JSONDecodeError as e:
            raise ConfigError(
                "config file is not valid JSON", {"path": str(path), "reason": str(e)}
            ) from e
        payload = _merge(payload, file_payload)
    for text in overrides:
        payload = _merge(payload, parse_override(text))
    return PipelineConfig.from_dict(payload).validate()


def derive_seed(root: int, *labels: Any) -> int:
    """Deterministic 32-bit child seed for a component named by labels."""
    digest = hashlib.sha256(
        json.dumps([int(root), *[str(x) for x in labels]]).encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:4], "little")
