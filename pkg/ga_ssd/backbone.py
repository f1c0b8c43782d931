"""ResNeXt-style 3D backbone and the FPN / GA-FPN top-down merge.

C1 is the stem output (stride 2); stages C2..C6 each halve every spatial
axis whose extent is still above 1. Pyramid level P_k sits on C_k, so
P1..P4 have strides 2, 4, 8, 16 on H and W.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import ops
from .attention import GAParams, build_ga_params, ga_forward
from .config import LEVELS, NetworkConfig
from .errors import DimensionError
from .params import BatchNormParams, ConvParams, ParameterSet
from .tensor import Tensor


STAGES = ("C1", "C2", "C3", "C4", "C5", "C6")


@dataclass
class BlockParams:
    reduce: ConvParams
    reduce_bn: BatchNormParams
    grouped: ConvParams
    grouped_bn: BatchNormParams
    expand: ConvParams
    expand_bn: BatchNormParams
    shortcut: Optional[ConvParams] = None
    downsample: bool = False


@dataclass
class BackboneParams:
    stem: ConvParams
    stem_bn: BatchNormParams
    stages: Dict[str, List[BlockParams]] = field(default_factory=dict)


@dataclass
class FPNParams:
    lateral: Dict[str, Tuple[Tensor, Tensor]] = field(default_factory=dict)
    smooth: Dict[str, ConvParams] = field(default_factory=dict)
    ga: Dict[str, GAParams] = field(default_factory=dict)


@dataclass
class PyramidFeatures:
    maps: Dict[str, Tensor]
    strides: Dict[str, Tuple[int, int, int]]

    def __iter__(self):
        return iter(self.maps.items())

    def __len__(self) -> int:
        return len(self.maps)


def stage_channels(cfg: NetworkConfig) -> Dict[str, int]:
    return {
        name: min(cfg.stem_channels * 2 ** i, cfg.max_channels)
        for i, name in enumerate(STAGES)
    }


def _bottleneck_width(c_out: int, cardinality: int) -> int:
    width = max(c_out // 2, cardinality)
    return -(-width // cardinality) * cardinality


def _entry_stride(x: Tensor) -> Tuple[int, int, int]:
    return tuple(2 if extent > 1 else 1 for extent in x.shape[2:])


# Parameter construction

def build_block_params(ps: ParameterSet, name: str, c_in: int, c_out: int,
                       cardinality: int, downsample: bool) -> BlockParams:
    width = _bottleneck_width(c_out, cardinality)
    shortcut = None
    if downsample or c_in != c_out:
        shortcut = ps.conv(f"{name}.shortcut", c_in, c_out, kernel=1)
    return BlockParams(
        reduce=ps.conv(f"{name}.reduce", c_in, width, kernel=1),
        reduce_bn=ps.batch_norm(f"{name}.reduce_bn", width),
        grouped=ps.conv(f"{name}.grouped", width, width, kernel=3, groups=cardinality),
        grouped_bn=ps.batch_norm(f"{name}.grouped_bn", width),
        expand=ps.conv(f"{name}.expand", width, c_out, kernel=1),
        expand_bn=ps.batch_norm(f"{name}.expand_bn", c_out),
        shortcut=shortcut,
        downsample=downsample,
    )


def build_backbone_params(ps: ParameterSet, cfg: NetworkConfig, in_channels: int) -> BackboneParams:
    widths = stage_channels(cfg)
    params = BackboneParams(
        stem=ps.conv("backbone.stem", in_channels, widths["C1"], kernel=3),
        stem_bn=ps.batch_norm("backbone.stem_bn", widths["C1"]),
    )
    c_in = widths["C1"]
    for stage in STAGES[1:]:
        blocks = []
        for b in range(cfg.blocks_per_stage):
            blocks.append(build_block_params(
                ps, f"backbone.{stage}.{b}", c_in, widths[stage], cfg.cardinality, downsample=(b == 0)
            ))
            c_in = widths[stage]
        params.stages[stage] = blocks
    return params


def build_fpn_params(ps: ParameterSet, cfg: NetworkConfig) -> FPNParams:
    widths = stage_channels(cfg)
    width = cfg.pyramid_channels
    lowest = LEVELS.index(cfg.active_levels[0])
    top = LEVELS.index(cfg.top_level)
    params = FPNParams()
    for level in LEVELS[lowest:top + 1]:
        c_level = widths["C" + level[1:]]
        w = ps.rng.normal(0.0, (1.0 / c_level) ** 0.5, size=(width, c_level, 1, 1, 1))
        params.lateral[level] = (
            ps.tensor(f"fpn.{level}.lateral.weight", w),
            ps.tensor(f"fpn.{level}.lateral.bias", [0.0] * width),
        )
    for level in cfg.active_levels:
        if cfg.ga_at_fpn:
            params.ga[level] = build_ga_params(ps, f"fpn.{level}.ga", width, cfg.ga)
        params.smooth[level] = ps.conv(f"fpn.{level}.smooth", width, width, kernel=3)
    return params


# Forward

def _conv_bn_relu(x: Tensor, conv: ConvParams, bn: BatchNormParams, mode: str, stride=None) -> Tensor:
    h = ops.conv3d_raw(x, conv.weight, conv.bias, stride=stride or conv.stride, groups=conv.groups)
    h = ops.batch_norm(h, bn.gamma, bn.beta, bn.running, mode)
    return ops.relu(h)


def resnext_block(x: Tensor, block: BlockParams, cardinality: int, mode: str = "train") -> Tensor:
    """1x1 reduce -> grouped 3x3x3 -> 1x1 expand, each with BN + ReLU, plus shortcut."""
    if x.shape[1] != block.reduce.in_channels:
        raise DimensionError(
            f"block expects {block.reduce.in_channels} channels, got {x.shape[1]}", axis="C"
        )
    if block.grouped.groups != cardinality:
        raise DimensionError(f"block built with cardinality {block.grouped.groups}, called with {cardinality}")
    stride = _entry_stride(x) if block.downsample else (1, 1, 1)
    h = _conv_bn_relu(x, block.reduce, block.reduce_bn, mode)
    h = _conv_bn_relu(h, block.grouped, block.grouped_bn, mode, stride=stride)
    h = _conv_bn_relu(h, block.expand, block.expand_bn, mode)
    if block.shortcut is not None:
        skip = ops.conv3d_raw(x, block.shortcut.weight, block.shortcut.bias, stride=stride)
    else:
        skip = x
    return ops.add(h, skip)


def backbone_forward(
    x: Tensor,
    params: BackboneParams,
    cfg: NetworkConfig,
    mode: str = "train",
    upto: str = "C6",
) -> Dict[str, Tensor]:
    for axis, extent in zip("HW", x.shape[3:]):
        if extent % 32:
            raise DimensionError(f"input extent {extent} is not divisible by 32", axis=axis)
    if x.shape[1] != params.stem.in_channels:
        raise DimensionError(
            f"backbone expects {params.stem.in_channels} input channels, got {x.shape[1]}", axis="C"
        )
    features: Dict[str, Tensor] = {}
    h = _conv_bn_relu(x, params.stem, params.stem_bn, mode, stride=_entry_stride(x))
    features["C1"] = h
    for stage in STAGES[1:STAGES.index(upto) + 1]:
        for block in params.stages[stage]:
            h = resnext_block(h, block, cfg.cardinality, mode)
        features[stage] = h
    return features


def _strides(reference: Tuple[int, ...], level: Tensor) -> Tuple[int, int, int]:
    return tuple(max(r // e, 1) for r, e in zip(reference, level.shape[2:]))


def fpn_merge(
    features: Dict[str, Tensor],
    params: FPNParams,
    cfg: NetworkConfig,
    input_extents: Tuple[int, int, int],
    with_ga: bool = False,
) -> PyramidFeatures:
    """Top-down merge starting at the highest active level."""
    lowest = LEVELS.index(cfg.active_levels[0])
    top = LEVELS.index(cfg.top_level)
    merged: Dict[str, Tensor] = {}
    above: Optional[Tensor] = None
    for level in reversed(LEVELS[lowest:top + 1]):
        c_name = "C" + level[1:]
        if c_name not in features:
            raise DimensionError(f"fpn_merge needs backbone level {c_name}")
        w, b = params.lateral[level]
        lateral = ops.conv1x1(features[c_name], w, b)
        if above is not None and cfg.use_fpn:
            factor = tuple(lo // hi for lo, hi in zip(lateral.shape[2:], above.shape[2:]))
            lateral = ops.add(lateral, ops.upsample_nearest(above, factor))
        merged[level] = lateral
        above = lateral

    maps: Dict[str, Tensor] = {}
    strides: Dict[str, Tuple[int, int, int]] = {}
    for level in cfg.active_levels:
        p = merged[level]
        if with_ga:
            p = ga_forward(p, cfg.ga, params.ga[level])
        maps[level] = ops.conv3d(p, params.smooth[level])
        strides[level] = _strides(input_extents, maps[level])
    return PyramidFeatures(maps=maps, strides=strides)


def ga_fpn_merge(
    features: Dict[str, Tensor],
    params: FPNParams,
    cfg: NetworkConfig,
    input_extents: Tuple[int, int, int],
) -> PyramidFeatures:
    """fpn_merge with a GA module on every merged map before smoothing."""
    return fpn_merge(features, params, cfg, input_extents, with_ga=True)
