"""Whole-volume inference: tiling, decoding and cross-tile suppression."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .boxes import Detection, decode_box, nms
from .config import HeadConfig
from .errors import DataError
from .inputs import make_input_25d, make_input_3d
from .model import CLASS_NAMES, GASSD
from .phantom import Volume
from .tensor import no_grad


logger = logging.getLogger(__name__)

PLANE_OVERLAP = 0.5
DEPTH_OVERLAP = 0.25


def tile_origins(extent: int, tile: int, overlap: float) -> List[int]:
    """Tile starts covering [0, extent); the last tile is flush with the end."""
    if extent <= tile:
        return [0]
    step = max(int(round(tile * (1.0 - overlap))), 1)
    origins = list(range(0, extent - tile + 1, step))
    if origins[-1] != extent - tile:
        origins.append(extent - tile)
    return origins


def plan_tiles(volume_shape: Tuple[int, int, int], tile: Tuple[int, int, int]) -> List[Tuple[int, int, int]]:
    """Tile origins (z, y, x). Axes shorter than a tile are padded, up to half a tile."""
    for axis, extent, t in zip("DHW", volume_shape, tile):
        if extent * 2 < t:
            raise DataError(
                f"volume extent {extent} on axis {axis} is smaller than one tile ({t}) even after padding"
            )
    zs = tile_origins(volume_shape[0], tile[0], DEPTH_OVERLAP)
    ys = tile_origins(volume_shape[1], tile[1], PLANE_OVERLAP)
    xs = tile_origins(volume_shape[2], tile[2], PLANE_OVERLAP)
    return [(z, y, x) for z in zs for y in ys for x in xs]


def _decode(model: GASSD, cls_logits: np.ndarray, reg: np.ndarray, head: HeadConfig,
            origin: Tuple[int, int, int], volume: Volume) -> List[Detection]:
    anchors = model.anchors()
    probs = np.exp(ops.log_softmax_np(cls_logits.astype(np.float64), axis=1))
    foreground = probs[:, 1:]
    label = foreground.argmax(axis=1)
    score = foreground[np.arange(label.size), label]
    keep = np.flatnonzero(score >= head.decode_floor)
    keep = keep[np.argsort(-score[keep], kind="stable")[: head.pre_nms_top_k]]
    if keep.size == 0:
        return []
    boxes = decode_box(anchors.boxes[keep], reg[keep], head.variances)
    z0, y0, x0 = origin
    d, h, w = volume.shape
    out: List[Detection] = []
    for i, b in zip(keep, boxes):
        # anchor centres sit at (index + 0.5); volume coordinates are voxel indices
        x, y, z = b[0] - 0.5 + x0, b[1] - 0.5 + y0, b[2] - 0.5 + z0
        if not (0 <= x < w and 0 <= y < h and 0 <= z < d):
            continue
        out.append(Detection(
            x=float(x), y=float(y), z=float(z), w=float(b[3]), h=float(b[4]),
            category=CLASS_NAMES[label[i] + 1], prob=float(score[i]), scan_id=volume.scan_id,
        ))
    return nms(out, head.nms_iou, head.max_detections)


def _tile_input(model: GASSD, volume: Volume, origin: Tuple[int, int, int]):
    cfg = model.cfg
    _, th, tw = cfg.tile
    if cfg.input_mode == "multi_channel_2_5d":
        return make_input_25d(volume, origin[0], cfg.n_slices, origin[1:], (th, tw), dtype=model.dtype)
    return make_input_3d(volume, origin, cfg.tile, dtype=model.dtype)


def detect_volume(
    model: GASSD,
    volume: Volume,
    cfg: Optional[HeadConfig] = None,
    max_workers: int = 1,
) -> List[Detection]:
    """Detections over a whole volume, after cross-tile NMS."""
    head = cfg or model.cfg.head
    if model.cfg.input_mode == "multi_channel_2_5d":
        # one 2.5D input per slice
        tile = (1,) + tuple(model.cfg.tile[1:])
    else:
        tile = tuple(model.cfg.tile)
    origins = plan_tiles(volume.shape, tile)

    def run(origin: Tuple[int, int, int]) -> List[Detection]:
        with no_grad():
            preds = model.forward(_tile_input(model, volume, origin), mode="eval")
        return _decode(model, preds.cls_logits.data[0], preds.reg.data[0], head, origin, volume)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        per_tile = list(pool.map(run, origins))
    merged = [d for dets in per_tile for d in dets]
    result = nms(merged, head.nms_iou, head.max_detections)
    logger.debug("%s: %d tiles, %d candidates, %d detections",
                 volume.scan_id, len(origins), len(merged), len(result))
    return result


def detect_all(model: GASSD, volumes: Sequence[Volume], max_workers: int = 1) -> List[Detection]:
    """detect_volume over several scans, in scan order."""
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        results = list(pool.map(lambda v: detect_volume(model, v), volumes))
    return [d for dets in results for d in dets]
