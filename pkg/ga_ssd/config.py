"""Experiment configuration as JSON-backed dataclasses."""

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

from .attention import GAConfig
from .errors import ConfigurationError, DataError


LEVELS = ("P1", "P2", "P3", "P4")
LEVEL_STRIDES = {"P1": 2, "P2": 4, "P3": 8, "P4": 16}
INPUT_MODES = ("multi_channel_2_5d", "volume_3d")

T = TypeVar("T")


def _default_scales() -> Dict[str, List[float]]:
    return {"P1": [4.0, 6.0], "P2": [8.0, 12.0], "P3": [16.0, 24.0], "P4": [32.0, 48.0]}


@dataclass
class HeadConfig:
    scales: Dict[str, List[float]] = field(default_factory=_default_scales)
    ratios: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    pos_thr: float = 0.5
    neg_thr: float = 0.4
    mining_ratio: float = 3.0
    variances: Tuple[float, float] = (0.1, 0.2)
    dropout: float = 0.1
    nms_iou: float = 0.3
    decode_floor: float = 0.1
    report_threshold: float = 0.5
    max_detections: int = 100
    pre_nms_top_k: int = 1000
    init_std: float = 0.01
    prior_prob: float = 0.01

    def __post_init__(self) -> None:
        self.variances = tuple(self.variances)
        if self.pos_thr <= self.neg_thr:
            raise ConfigurationError(f"pos_thr {self.pos_thr} must exceed neg_thr {self.neg_thr}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ConfigurationError("ratios must be a non-empty list of positive numbers")
        for level, scales in self.scales.items():
            if not scales or any(s <= 0 for s in scales):
                raise ConfigurationError(f"scales for {level} must be a non-empty list of positive numbers")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigurationError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_detections < 1 or self.pre_nms_top_k < 1:
            raise ConfigurationError("max_detections and pre_nms_top_k must be positive")
        if self.init_std <= 0:
            raise ConfigurationError(f"init_std must be positive, got {self.init_std}")
        if not 0.0 < self.prior_prob < 1.0:
            raise ConfigurationError(f"prior_prob must lie in (0, 1), got {self.prior_prob}")

    def anchors_per_cell(self, level: str) -> int:
        return len(self.scales[level]) * len(self.ratios)


@dataclass
class NetworkConfig:
    input_mode: str = "volume_3d"
    ga_at_load: bool = True
    ga_at_fpn: bool = True
    use_fpn: bool = True
    active_levels: List[str] = field(default_factory=lambda: ["P2", "P3", "P4"])
    stem_channels: int = 16
    cardinality: int = 4
    blocks_per_stage: int = 1
    pyramid_channels: int = 32
    max_channels: int = 128
    num_classes: int = 9
    n_slices: int = 9
    tile: Tuple[int, int, int] = (32, 64, 64)
    load_subsample: int = 8
    ga: GAConfig = field(default_factory=GAConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self) -> None:
        self.tile = tuple(int(t) for t in self.tile)
        if self.input_mode not in INPUT_MODES:
            raise ConfigurationError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if not self.active_levels:
            raise ConfigurationError("active_levels must not be empty")
        unknown = [lvl for lvl in self.active_levels if lvl not in LEVELS]
        if unknown:
            raise ConfigurationError(f"unknown pyramid levels {unknown}")
        self.active_levels = sorted(set(self.active_levels), key=LEVELS.index)
        for name in ("stem_channels", "cardinality", "blocks_per_stage", "pyramid_channels",
                     "max_channels", "num_classes", "n_slices", "load_subsample"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_slices % 2 == 0:
            raise ConfigurationError(f"n_slices must be odd, got {self.n_slices}")
        if len(self.tile) != 3 or self.tile[1] % 32 or self.tile[2] % 32:
            raise ConfigurationError(f"tile H and W must be multiples of 32, got {self.tile}")
        missing = [lvl for lvl in self.active_levels if lvl not in self.head.scales]
        if missing:
            raise ConfigurationError(f"no anchor scales configured for {missing}")

    @property
    def input_channels(self) -> int:
        return self.n_slices if self.input_mode == "multi_channel_2_5d" else 1

    @property
    def input_depth(self) -> int:
        return 1 if self.input_mode == "multi_channel_2_5d" else self.tile[0]

    @property
    def top_level(self) -> str:
        return self.active_levels[-1]


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    data_dir: str = "data"
    train_fraction: float = 0.8
    checkpoint_dir: str = "checkpoints"
    run_log: Optional[str] = None
    log_every: int = 1
    reg_weight: float = 1.0
    lr_milestones: Tuple[float, float] = (0.6, 0.85)
    lr_gamma: float = 0.1
    augment: bool = True
    background_ratio: float = 1.0
    grad_clip: Optional[float] = 5.0
    dtype: str = "float32"
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self) -> None:
        self.lr_milestones = tuple(self.lr_milestones)
        if self.lr < 0:
            raise ConfigurationError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigurationError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError(f"grad_clip must be positive or null, got {self.grad_clip}")

    @property
    def log_path(self) -> str:
        return self.run_log or os.path.join(self.checkpoint_dir, "run_log.jsonl")


_NESTED = {"ga": GAConfig, "head": HeadConfig, "network": NetworkConfig}


def from_dict(cls: Type[T], data: Dict[str, Any]) -> T:
    """Build a config dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{cls.__name__} expects a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get(key)
        kwargs[key] = from_dict(nested, value) if nested is not None and isinstance(value, dict) else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"{cls.__name__}: {e}") from e


def to_dict(cfg) -> Dict[str, Any]:
    return json.loads(json.dumps(asdict(cfg)))


def load_json(path: str, cls: Type[T], defaults: Optional[Dict[str, Any]] = None) -> T:
    """Load `cls` from a JSON file; `defaults` fill top-level keys the file leaves out."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
    if defaults and isinstance(data, dict):
        data = {**defaults, **data}
    return from_dict(cls, data)


def save_json(path: str, cfg) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2)
