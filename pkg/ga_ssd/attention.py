"""Group-attention (GA) module.

A grouped 3x3x3 convolution over M channel partitions, followed by non-local
attention over the concatenated groups:

    y_i = 1/C(x) * sum_j f(x_i, x_j) g(x_j),  f = exp(theta_i . phi_j),
    C(x) = sum_j f(x_i, x_j)

then a 1x1 output projection and an optional residual add. With the output
projection zero-initialised the module starts out as the identity.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError
from .params import ConvParams, ParameterSet
from .tensor import Tensor, attach


logger = logging.getLogger(__name__)

DEFAULT_GROUPS = 9


@dataclass
class GAConfig:
    groups: int = DEFAULT_GROUPS
    embed_channels: Optional[int] = None
    spatial_subsample: int = 1
    residual: bool = True
    chunk_size: int = 2048

    def __post_init__(self) -> None:
        if self.groups < 1:
            raise ConfigurationError(f"GA groups must be >= 1, got {self.groups}")
        if self.embed_channels is not None and self.embed_channels < 1:
            raise ConfigurationError(f"GA embed_channels must be >= 1, got {self.embed_channels}")
        if self.spatial_subsample < 1:
            raise ConfigurationError(f"GA spatial_subsample must be >= 1, got {self.spatial_subsample}")
        if self.chunk_size < 1:
            raise ConfigurationError(f"GA chunk_size must be >= 1, got {self.chunk_size}")

    def embed_for(self, channels: int) -> int:
        if self.embed_channels is not None:
            return self.embed_channels
        return max(channels // 2, 1)


@dataclass
class AttentionWeights:
    """Row-stochastic (N, P, P') matrix: query positions by key positions."""

    matrix: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=-1)


@dataclass
class GAParams:
    group: ConvParams
    theta_w: Tensor
    theta_b: Tensor
    phi_w: Tensor
    phi_b: Tensor
    g_w: Tensor
    g_b: Tensor
    out_w: Tensor
    out_b: Tensor
    subsample: int = 1


def effective_groups(channels: int, groups: int, where: str = "GA") -> int:
    """Largest divisor of `channels` not exceeding `groups`.

    Clamping the default group count, or a count above the channel count, is
    expected and logged at DEBUG; any other clamp is a WARNING.
    """
    if channels < 1 or groups < 1:
        raise ConfigurationError(f"{where}: cannot split {channels} channels into {groups} groups")
    m = min(groups, channels)
    while channels % m:
        m -= 1
    if m != groups:
        level = logging.DEBUG if groups == DEFAULT_GROUPS or channels < groups else logging.WARNING
        logger.log(level, "%s: %d channels not divisible by %d groups, using %d", where, channels, groups, m)
    return m


def build_ga_params(ps: ParameterSet, name: str, channels: int, cfg: GAConfig) -> GAParams:
    m = effective_groups(channels, cfg.groups, where=name)
    embed = cfg.embed_for(channels)

    def one_by_one(suffix: str, c_in: int, c_out: int, zero: bool = False) -> Tuple[Tensor, Tensor]:
        shape = (c_out, c_in, 1, 1, 1)
        w = np.zeros(shape) if zero else ps.rng.normal(0.0, np.sqrt(1.0 / c_in), size=shape)
        return ps.tensor(f"{name}.{suffix}.weight", w), ps.tensor(f"{name}.{suffix}.bias", np.zeros(c_out))

    group = ps.conv(f"{name}.group", channels, channels, kernel=3, groups=m)
    theta_w, theta_b = one_by_one("theta", channels, embed)
    phi_w, phi_b = one_by_one("phi", channels, embed)
    g_w, g_b = one_by_one("g", channels, embed)
    out_w, out_b = one_by_one("out", embed, channels, zero=True)
    return GAParams(group, theta_w, theta_b, phi_w, phi_b, g_w, g_b, out_w, out_b, cfg.spatial_subsample)


def group_stage(x: Tensor, cfg: GAConfig, params: GAParams) -> Tensor:
    """Convolve each channel group independently and concatenate, shape preserved."""
    if params.group.in_channels != x.shape[1]:
        raise DimensionError(
            f"group stage built for {params.group.in_channels} channels, input has {x.shape[1]}", axis="C"
        )
    return ops.conv3d(x, params.group)


def attention_embed(x: Tensor, params: GAParams) -> Tuple[Tensor, Tensor, Tensor]:
    theta = ops.conv1x1(x, params.theta_w, params.theta_b)
    phi = ops.subsample(ops.conv1x1(x, params.phi_w, params.phi_b), params.subsample)
    g_feat = ops.subsample(ops.conv1x1(x, params.g_w, params.g_b), params.subsample)
    return theta, phi, g_feat


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def nonlocal_attention(
    theta: Tensor,
    phi: Tensor,
    g_feat: Tensor,
    chunk_size: int = 2048,
    return_weights: bool = False,
) -> Tuple[Tensor, Optional[AttentionWeights]]:
    """Embedded-Gaussian non-local attention.

    Queries are processed `chunk_size` rows at a time; the backward pass
    recomputes each chunk's weights instead of keeping the full (P, P')
    matrix alive.
    """
    if theta.shape[:2] != phi.shape[:2] or phi.shape != g_feat.shape:
        raise DimensionError(
            f"attention embeddings disagree: theta {theta.shape}, phi {phi.shape}, g {g_feat.shape}", axis="C"
        )
    n, e = theta.shape[:2]
    spatial = theta.shape[2:]
    q = theta.data.reshape(n, e, -1).transpose(0, 2, 1)   # (N, P, E)
    k = phi.data.reshape(n, e, -1)                        # (N, E, P')
    v = g_feat.data.reshape(n, e, -1).transpose(0, 2, 1)  # (N, P', E)
    p = q.shape[1]
    chunks = [(s, min(s + chunk_size, p)) for s in range(0, p, chunk_size)]

    y = np.empty((n, p, e), dtype=theta.dtype)
    weights = np.empty((n, p, k.shape[2]), dtype=theta.dtype) if return_weights else None
    for b in range(n):
        for lo, hi in chunks:
            w = _row_softmax(q[b, lo:hi] @ k[b])
            y[b, lo:hi] = w @ v[b]
            if weights is not None:
                weights[b, lo:hi] = w

    def backward(grad: np.ndarray) -> None:
        gy = grad.reshape(n, e, -1).transpose(0, 2, 1)
        gq = np.zeros_like(q)
        gk = np.zeros_like(k)
        gv = np.zeros_like(v)
        for b in range(n):
            for lo, hi in chunks:
                w = _row_softmax(q[b, lo:hi] @ k[b])
                gv[b] += w.T @ gy[b, lo:hi]
                gw = gy[b, lo:hi] @ v[b].T
                gs = w * (gw - (gw * w).sum(axis=1, keepdims=True))
                gq[b, lo:hi] = gs @ k[b].T
                gk[b] += q[b, lo:hi].T @ gs
        if theta.requires_grad:
            theta._accumulate(gq.transpose(0, 2, 1).reshape(theta.shape))
        if phi.requires_grad:
            phi._accumulate(gk.reshape(phi.shape))
        if g_feat.requires_grad:
            g_feat._accumulate(gv.transpose(0, 2, 1).reshape(g_feat.shape))

    out = attach(y.transpose(0, 2, 1).reshape(n, e, *spatial), (theta, phi, g_feat), backward)
    return out, (AttentionWeights(weights) if weights is not None else None)


def ga_forward(
    x: Tensor,
    cfg: GAConfig,
    params: GAParams,
    return_weights: bool = False,
):
    """group_stage -> embeddings -> non-local attention -> 1x1 projection (+ x)."""
    grouped = group_stage(x, cfg, params)
    theta, phi, g_feat = attention_embed(grouped, params)
    y, weights = nonlocal_attention(theta, phi, g_feat, cfg.chunk_size, return_weights)
    out = ops.conv1x1(y, params.out_w, params.out_b)
    if cfg.residual:
        out = ops.add(out, x)
    if out.shape != x.shape:
        raise DimensionError(f"GA output {out.shape} differs from input {x.shape}")
    return (out, weights) if return_weights else out
