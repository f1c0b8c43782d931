"""Differentiable operations on `Tensor`.

Feature maps are channel-second, (N, C, D, H, W). Every op returns a new
tensor and, when an input requires a gradient, registers a backward closure
through `attach`.
"""

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DimensionError
from .params import BatchNormState, ConvParams
from .tensor import Tensor, as_tensor, attach


Triple = Tuple[int, int, int]


def _triple(value: Union[int, Sequence[int]], name: str) -> Triple:
    if isinstance(value, (int, np.integer)):
        out = (int(value),) * 3
    else:
        out = tuple(int(v) for v in value)
    if len(out) != 3 or any(v < 1 for v in out):
        raise ConfigurationError(f"{name} must be one or three positive integers, got {value!r}")
    return out  # type: ignore[return-value]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return attach(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return attach(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        factor = float(b)

        def backward_scalar(g: np.ndarray) -> None:
            a._accumulate(g * factor)

        return attach(a.data * factor, (a,), backward_scalar)

    b = as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return attach(a.data * b.data, (a, b), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return attach(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot contract {a.shape} with {b.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return attach(a.data @ b.data, (a, b), backward)


# Views

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(x.shape))

    return attach(out, (x,), backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.transpose(g, inverse))

    return attach(np.transpose(x.data, axes), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return attach(out, tensors, backward)


def index_select(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        x._accumulate(full)

    return attach(np.take(x.data, indices, axis=axis), (x,), backward)


# Activations and normalisation

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return attach(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return attach(y, (x,), backward)


def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: BatchNormState,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batch_norm: gamma/beta {gamma.shape}/{beta.shape} do not match {channels} channels",
            axis="C",
        )
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = [1] * x.ndim
    bshape[1] = channels
    count = x.data.size // channels

    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running.mean[...] = (1.0 - momentum) * running.mean + momentum * mean
        running.var[...] = (1.0 - momentum) * running.var + momentum * unbiased
    elif mode == "eval":
        mean, var = running.mean, running.var
    else:
        raise ConfigurationError(f"batch_norm: unknown mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = (x.data - mean.reshape(bshape)) * inv_std
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                dx = (
                    count * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                ) * (inv_std / count)
            else:
                dx = dxhat * inv_std
            x._accumulate(dx)

    return attach(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, mode: str = "train", rng_seed: int = 0) -> Tensor:
    """Inverted dropout; the mask depends only on `rng_seed` and the shape."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = np.random.default_rng(rng_seed).random(x.shape) >= rate
    scale = keep * (1.0 / (1.0 - rate))

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * scale)

    return attach((x.data * scale).astype(x.dtype, copy=False), (x,), backward)


def upsample_nearest(x: Tensor, factor: Union[int, Sequence[int]]) -> Tensor:
    fd, fh, fw = _triple(factor, "factor")
    if x.ndim != 5:
        raise DimensionError(f"upsample_nearest expects (N, C, D, H, W), got {x.shape}")
    if (fd, fh, fw) == (1, 1, 1):
        return x
    out = x.data.repeat(fd, axis=2).repeat(fh, axis=3).repeat(fw, axis=4)
    n, c, d, h, w = x.shape

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(n, c, d, fd, h, fh, w, fw).sum(axis=(3, 5, 7)))

    return attach(out, (x,), backward)


# Convolution

def same_padding(extent: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """Return (output extent, pad before, pad after) for "same" padding."""
    out = math.ceil(extent / stride)
    before = kernel // 2
    after = max((out - 1) * stride + kernel - extent - before, 0)
    return out, before, after


def _conv_geometry(x: Tensor, weight: Tensor, stride: Triple, groups: int):
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects (N, C, D, H, W), got {x.shape}")
    if weight.ndim != 5:
        raise DimensionError(f"conv3d weight must be (C_out, C_in/groups, kD, kH, kW), got {weight.shape}")
    n, c_in = x.shape[:2]
    c_out, c_in_g = weight.shape[:2]
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_in_g * groups != c_in:
        raise DimensionError(
            f"conv3d: input has {c_in} channels, weight expects {c_in_g * groups}", axis="C"
        )
    if any(k % 2 == 0 for k in weight.shape[2:]):
        raise ConfigurationError(f"kernel extents must be odd for same padding, got {weight.shape[2:]}")
    dims = [same_padding(e, k, s) for e, k, s in zip(x.shape[2:], weight.shape[2:], stride)]
    return dims


def _im2col(xp: np.ndarray, kernel: Triple, stride: Triple, out_dims: Triple) -> np.ndarray:
    n, c = xp.shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    od, oh, ow = out_dims
    cols = np.empty((n, c, kd * kh * kw, od, oh, ow), dtype=xp.dtype)
    k = 0
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                cols[:, :, k] = xp[
                    :, :,
                    a:a + sd * (od - 1) + 1:sd,
                    b:b + sh * (oh - 1) + 1:sh,
                    e:e + sw * (ow - 1) + 1:sw,
                ]
                k += 1
    return cols


def _col2im(cols: np.ndarray, padded_shape, kernel: Triple, stride: Triple, out_dims: Triple) -> np.ndarray:
    kd, kh, kw = kernel
    sd, sh, sw = stride
    od, oh, ow = out_dims
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    k = 0
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                xp[
                    :, :,
                    a:a + sd * (od - 1) + 1:sd,
                    b:b + sh * (oh - 1) + 1:sh,
                    e:e + sw * (ow - 1) + 1:sw,
                ] += cols[:, :, k]
                k += 1
    return xp


def conv3d_raw(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Union[int, Sequence[int]] = 1,
    groups: int = 1,
) -> Tensor:
    stride = _triple(stride, "stride")
    dims = _conv_geometry(x, weight, stride, groups)
    out_dims = tuple(d[0] for d in dims)
    pads = [(0, 0), (0, 0)] + [(d[1], d[2]) for d in dims]
    xp = np.pad(x.data, pads)
    kernel = tuple(weight.shape[2:])
    n, c_in = x.shape[:2]
    c_out = weight.shape[0]
    cin_g, cout_g = c_in // groups, c_out // groups
    ksize = int(np.prod(kernel))
    positions = int(np.prod(out_dims))

    cols = _im2col(xp, kernel, stride, out_dims).reshape(n, groups, cin_g * ksize, positions)
    w = weight.data.reshape(groups, cout_g, cin_g * ksize)
    out = np.matmul(w[None], cols).reshape(n, c_out, *out_dims)
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"conv3d bias must have shape ({c_out},), got {bias.shape}")
        out = out + bias.data.reshape(1, c_out, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        gg = g.reshape(n, groups, cout_g, positions)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if weight.requires_grad:
            dw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.shape))
        if x.requires_grad:
            dcols = np.matmul(np.swapaxes(w, -1, -2)[None], gg)
            dcols = dcols.reshape(n, c_in, ksize, *out_dims)
            dxp = _col2im(dcols, xp.shape, kernel, stride, out_dims)
            d0, h0, w0 = (p[0] for p in pads[2:])
            dd, hh, ww = x.shape[2:]
            x._accumulate(dxp[:, :, d0:d0 + dd, h0:h0 + hh, w0:w0 + ww])

    return attach(out.astype(x.dtype, copy=False), parents, backward)


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    """3D convolution with zero-filled same padding; spatial extents become ceil(extent / stride)."""
    return conv3d_raw(x, p.weight, p.bias, stride=p.stride, groups=p.groups)


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-voxel linear map across channels."""
    c_out, c_in = weight.shape[:2]
    if any(k != 1 for k in weight.shape[2:]) or weight.ndim != x.ndim:
        raise DimensionError(f"conv1x1 weight {weight.shape} does not match input rank {x.ndim}")
    if x.shape[1] != c_in:
        raise DimensionError(f"conv1x1: input has {x.shape[1]} channels, weight expects {c_in}", axis="C")
    n = x.shape[0]
    spatial = x.shape[2:]
    flat = x.data.reshape(n, c_in, -1)
    w = weight.data.reshape(c_out, c_in)
    out = np.matmul(w, flat)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        gf = g.reshape(n, c_out, -1)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gf.sum(axis=(0, 2)))
        if weight.requires_grad:
            weight._accumulate(np.matmul(gf, np.swapaxes(flat, 1, 2)).sum(axis=0).reshape(weight.shape))
        if x.requires_grad:
            x._accumulate(np.matmul(w.T, gf).reshape(x.shape))

    return attach(out.reshape(n, c_out, *spatial).astype(x.dtype, copy=False), parents, backward)


# Losses

def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed softmax cross-entropy of (K, classes) logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    logp = log_softmax_np(logits.data, axis=1)
    rows = np.arange(targets.shape[0])
    loss = -logp[rows, targets].sum()

    def backward(g: np.ndarray) -> None:
        probs = np.exp(logp)
        probs[rows, targets] -= 1.0
        logits._accumulate(probs * g)

    return attach(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Summed smooth-L1 (Huber with transition at `beta`)."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"smooth_l1: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    adiff = np.abs(diff)
    small = adiff < beta
    loss = np.where(small, 0.5 * diff * diff / beta, adiff - 0.5 * beta).sum()

    def backward(g: np.ndarray) -> None:
        pred._accumulate(np.where(small, diff / beta, np.sign(diff)) * g)

    return attach(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


def subsample(x: Tensor, step: Union[int, Sequence[int]]) -> Tensor:
    """Keep every `step`-th position along each spatial axis of a 5-D tensor."""
    sd, sh, sw = _triple(step, "step")
    if (sd, sh, sw) == (1, 1, 1):
        return x
    index = (slice(None), slice(None), slice(None, None, sd), slice(None, None, sh), slice(None, None, sw))

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)

    return attach(np.ascontiguousarray(x.data[index]), (x,), backward)
