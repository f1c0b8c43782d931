"""The GA-SSD network: optional GA at data load, backbone, (GA-)FPN and multibox heads."""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import ops
from .attention import GAParams, build_ga_params, ga_forward
from .backbone import backbone_forward, build_backbone_params, build_fpn_params, fpn_merge, ga_fpn_merge
from .boxes import Anchors, generate_anchors
from .config import LEVELS, NetworkConfig, from_dict, to_dict
from .errors import ConfigurationError, DimensionError, ManifestError
from .params import ConvParams, ParameterSet, load_checkpoint, save_checkpoint
from .phantom import CATEGORIES
from .tensor import Tensor


logger = logging.getLogger(__name__)

CLASS_NAMES = ("background",) + CATEGORIES


@dataclass
class HeadParams:
    cls: ConvParams
    reg: ConvParams


@dataclass
class Predictions:
    """Per-anchor outputs in anchor order: cls (N, K, classes), reg (N, K, 4)."""

    cls_logits: Tensor
    reg: Tensor
    level_extents: Dict[str, Tuple[int, int, int]]


def _halve(extents: Tuple[int, ...]) -> Tuple[int, ...]:
    return tuple(-(-e // 2) if e > 1 else 1 for e in extents)


def prior_bias(num_classes: int, anchors_per_cell: int, prior_prob: float) -> np.ndarray:
    """Classification bias giving every foreground class probability about `prior_prob` at init."""
    per_anchor = np.full(num_classes, -np.log((1.0 - prior_prob) / prior_prob))
    per_anchor[0] = 0.0
    return np.tile(per_anchor, anchors_per_cell)


def level_extents(input_extents: Tuple[int, int, int], level: str) -> Tuple[int, int, int]:
    """Spatial extents of pyramid level P_k for an input crop (k stride-2 reductions)."""
    extents = tuple(input_extents)
    for _ in range(LEVELS.index(level) + 1):
        extents = _halve(extents)
    return extents


class GASSD:
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float64) -> None:
        if cfg.num_classes != len(CLASS_NAMES):
            raise ConfigurationError(
                f"num_classes must be {len(CLASS_NAMES)} (background + {len(CATEGORIES)} categories), "
                f"got {cfg.num_classes}"
            )
        self.cfg = cfg
        self.seed = seed
        self.params = ParameterSet(seed=seed, dtype=dtype)
        ps = self.params
        c_in = cfg.input_channels

        self.load_ga_cfg = dataclasses.replace(
            cfg.ga, spatial_subsample=max(cfg.ga.spatial_subsample, cfg.load_subsample)
        )
        self.load_ga: Optional[GAParams] = (
            build_ga_params(ps, "load.ga", c_in, self.load_ga_cfg) if cfg.ga_at_load else None
        )
        self.backbone = build_backbone_params(ps, cfg, c_in)
        self.fpn = build_fpn_params(ps, cfg)
        self.heads: Dict[str, HeadParams] = {}
        head = cfg.head
        for level in cfg.active_levels:
            a = head.anchors_per_cell(level)
            self.heads[level] = HeadParams(
                cls=ps.conv(f"head.{level}.cls", cfg.pyramid_channels, a * cfg.num_classes, kernel=3,
                            std=head.init_std, bias=prior_bias(cfg.num_classes, a, head.prior_prob)),
                reg=ps.conv(f"head.{level}.reg", cfg.pyramid_channels, a * 4, kernel=3, std=head.init_std),
            )
        self._anchor_cache: Dict[Tuple[int, int, int], Anchors] = {}
        logger.debug("built GA-SSD with %d parameter tensors", len(ps))

    @property
    def input_extents(self) -> Tuple[int, int, int]:
        """(D, H, W) of one network input crop."""
        _, h, w = self.cfg.tile
        return (self.cfg.input_depth, h, w)

    @property
    def dtype(self) -> np.dtype:
        return self.params.dtype

    def anchors(self, input_extents: Optional[Tuple[int, int, int]] = None) -> Anchors:
        extents = tuple(input_extents or self.input_extents)
        if extents not in self._anchor_cache:
            parts = []
            for level in self.cfg.active_levels:
                lvl = level_extents(extents, level)
                strides = tuple(max(e // l, 1) for e, l in zip(extents, lvl))
                parts.append(generate_anchors(
                    lvl, strides, self.cfg.head.scales[level], self.cfg.head.ratios, level=level
                ))
            self._anchor_cache[extents] = Anchors.concat(parts)
        return self._anchor_cache[extents]

    def _head(self, feature: Tensor, conv: ConvParams, width: int) -> Tensor:
        out = ops.conv3d(feature, conv)
        n = out.shape[0]
        out = ops.permute(out, (0, 2, 3, 4, 1))
        return ops.reshape(out, (n, -1, width))

    def forward(self, x: Tensor, mode: str = "train", seed: int = 0) -> Predictions:
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.input_channels:
            raise DimensionError(
                f"network expects (N, {cfg.input_channels}, D, H, W) input, got {x.shape}", axis="C"
            )
        extents = tuple(x.shape[2:])
        if self.load_ga is not None:
            x = ga_forward(x, self.load_ga_cfg, self.load_ga)
        features = backbone_forward(x, self.backbone, cfg, mode, upto="C" + cfg.top_level[1:])
        merge = ga_fpn_merge if cfg.ga_at_fpn else fpn_merge
        pyramid = merge(features, self.fpn, cfg, extents)

        cls_parts, reg_parts = [], []
        shapes: Dict[str, Tuple[int, int, int]] = {}
        for i, (level, feature) in enumerate(pyramid):
            shapes[level] = tuple(feature.shape[2:])
            feature = ops.dropout(feature, cfg.head.dropout, mode, rng_seed=seed * len(LEVELS) + i)
            cls_parts.append(self._head(feature, self.heads[level].cls, cfg.num_classes))
            reg_parts.append(self._head(feature, self.heads[level].reg, 4))
        cls_logits = cls_parts[0] if len(cls_parts) == 1 else ops.concat(cls_parts, axis=1)
        reg = reg_parts[0] if len(reg_parts) == 1 else ops.concat(reg_parts, axis=1)
        expected = len(self.anchors(extents))
        if cls_logits.shape[1] != expected:
            raise DimensionError(f"heads produced {cls_logits.shape[1]} rows for {expected} anchors")
        return Predictions(cls_logits=cls_logits, reg=reg, level_extents=shapes)

    # Checkpoints

    def save(self, directory: str, **meta) -> str:
        manifest = {
            "network": to_dict(self.cfg),
            "seed": self.seed,
            "dtype": str(self.dtype),
        }
        manifest.update(meta)
        return save_checkpoint(directory, self.params, manifest)

    @classmethod
    def load(cls, directory: str, expect: Optional[NetworkConfig] = None) -> "GASSD":
        manifest, arrays = load_checkpoint(directory)
        if "network" not in manifest:
            raise ManifestError(f"{directory}: manifest carries no network configuration")
        try:
            cfg = from_dict(NetworkConfig, manifest["network"])
        except ConfigurationError as e:
            raise ManifestError(f"{directory}: stored network configuration is invalid ({e})") from e
        if expect is not None and to_dict(expect) != to_dict(cfg):
            raise ManifestError(f"{directory}: checkpoint network configuration differs from the requested one")
        model = cls(cfg, seed=int(manifest.get("seed", 0)), dtype=np.dtype(manifest.get("dtype", "float64")))
        model.params.load_state(arrays)
        return model
