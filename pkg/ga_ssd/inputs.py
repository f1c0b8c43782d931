"""Network inputs: HU windowing, 2.5D and 3D crops, augmentation."""

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError
from .phantom import HU_MAX, HU_MIN, NoduleAnnotation, Volume
from .tensor import Tensor


PAD_HU = 0.0


def normalize(hu) -> np.ndarray:
    """Map the [-1000, 400] HU window onto [0, 1]; values outside clamp."""
    return np.clip((np.asarray(hu, dtype=np.float64) - HU_MIN) / (HU_MAX - HU_MIN), 0.0, 1.0)


def denormalize(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * (HU_MAX - HU_MIN) + HU_MIN


PAD_VALUE = float(normalize(PAD_HU))


def crop_padded(voxels: np.ndarray, origin: Sequence[int], extents: Sequence[int],
                fill: float = PAD_HU) -> np.ndarray:
    """Crop `extents` at `origin`, filling whatever falls outside the array."""
    if len(origin) != voxels.ndim or len(extents) != voxels.ndim:
        raise DataError(f"crop needs {voxels.ndim} origin and extent values")
    if any(int(e) < 1 for e in extents):
        raise DataError(f"degenerate crop extents {tuple(extents)}")
    out = np.full(tuple(int(e) for e in extents), fill, dtype=voxels.dtype)
    src, dst = [], []
    for o, e, n in zip(origin, extents, voxels.shape):
        lo, hi = max(int(o), 0), min(int(o) + int(e), n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - int(o), hi - int(o)))
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def make_input_25d(
    v: Volume,
    center_slice: int,
    n_slices: int,
    origin_yx: Tuple[int, int] = (0, 0),
    extents_yx: Optional[Tuple[int, int]] = None,
    dtype=np.float64,
) -> Tensor:
    """Neighbouring slices stacked on the channel axis: (1, n_slices, 1, H, W).

    Slices beyond the first or last are replaced by the edge slice.
    """
    d, h, w = v.shape
    if n_slices < 1 or n_slices % 2 == 0:
        raise DataError(f"n_slices must be a positive odd number, got {n_slices}")
    if not 0 <= center_slice < d:
        raise DataError(f"center slice {center_slice} outside volume {v.scan_id!r} with {d} slices")
    half = n_slices // 2
    indices = np.clip(np.arange(center_slice - half, center_slice + half + 1), 0, d - 1)
    ext = extents_yx or (h, w)
    slices = [crop_padded(v.voxels[i], origin_yx, ext) for i in indices]
    stacked = normalize(np.stack(slices))[None, :, None]
    return Tensor(stacked.astype(dtype))


def make_input_3d(
    v: Volume,
    crop_origin: Sequence[int],
    crop_extents: Sequence[int],
    pad: bool = True,
    dtype=np.float64,
) -> Tensor:
    """Windowed crop with one channel: (1, 1, d, h, w). Outside the volume reads as 0 HU."""
    if any(int(e) < 1 for e in crop_extents):
        raise DataError(f"degenerate crop extents {tuple(crop_extents)}")
    if not pad:
        for o, e, n in zip(crop_origin, crop_extents, v.shape):
            if o < 0 or o + e > n:
                raise DataError(f"crop {tuple(crop_origin)}+{tuple(crop_extents)} leaves volume {v.shape}")
    crop = crop_padded(v.voxels, crop_origin, crop_extents)
    return Tensor(normalize(crop)[None, None].astype(dtype))


@dataclass(frozen=True)
class AugmentDraw:
    flip_x: bool = False
    flip_y: bool = False
    shift_x: int = 0
    shift_y: int = 0


def draw_augmentation(rng_seed: int, max_shift: int = 4) -> AugmentDraw:
    rng = np.random.default_rng(rng_seed)
    flips = rng.random(2) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=2)
    return AugmentDraw(bool(flips[0]), bool(flips[1]), int(shifts[0]), int(shifts[1]))


def _shift(array: np.ndarray, offset: int, axis: int, fill: float) -> np.ndarray:
    if offset == 0:
        return array
    out = np.full_like(array, fill)
    n = array.shape[axis]
    src = [slice(None)] * array.ndim
    dst = [slice(None)] * array.ndim
    if abs(offset) >= n:
        return out
    if offset > 0:
        src[axis], dst[axis] = slice(0, n - offset), slice(offset, n)
    else:
        src[axis], dst[axis] = slice(-offset, n), slice(0, n + offset)
    out[tuple(dst)] = array[tuple(src)]
    return out


def apply_augmentation(
    data: np.ndarray,
    annotations: Sequence[NoduleAnnotation],
    draw: AugmentDraw,
    fill: float = PAD_VALUE,
) -> Tuple[np.ndarray, List[NoduleAnnotation]]:
    """Flip, then shift, the last two axes (y, x) of `data` and move annotations along."""
    h, w = data.shape[-2:]
    out = data
    moved = list(annotations)
    if draw.flip_x:
        out = out[..., ::-1]
        moved = [dataclasses.replace(a, x=w - 1 - a.x) for a in moved]
    if draw.flip_y:
        out = out[..., ::-1, :]
        moved = [dataclasses.replace(a, y=h - 1 - a.y) for a in moved]
    out = _shift(out, draw.shift_x, out.ndim - 1, fill)
    out = _shift(out, draw.shift_y, out.ndim - 2, fill)
    moved = [dataclasses.replace(a, x=a.x + draw.shift_x, y=a.y + draw.shift_y) for a in moved]
    return np.ascontiguousarray(out), moved


def augment(
    data: Union[np.ndarray, Tensor],
    annotations: Sequence[NoduleAnnotation],
    rng_seed: int,
    max_shift: int = 4,
) -> Tuple[Union[np.ndarray, Tensor], List[NoduleAnnotation]]:
    """Random axial flips and integer shifts up to `max_shift`, deterministic per seed."""
    draw = draw_augmentation(rng_seed, max_shift)
    if isinstance(data, Tensor):
        out, moved = apply_augmentation(data.data, annotations, draw)
        return Tensor(out), moved
    return apply_augmentation(data, annotations, draw)
