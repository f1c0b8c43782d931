"""SGD training on positive-biased crops, checkpointing, run logs and evaluation."""

import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pendulum
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn

from . import ops
from .boxes import match_anchors
from .config import TrainConfig
from .detector import detect_all
from .errors import DataError, TrainingError
from .evaluation import (
    CpmReport,
    FrocPoint,
    build_report,
    format_report,
    write_detections,
    write_froc_csv,
    write_report,
)
from .inputs import apply_augmentation, draw_augmentation, make_input_25d, make_input_3d
from .loss import LossBreakdown, multibox_loss
from .model import GASSD
from .params import ParameterSet
from .phantom import CATEGORIES, Dataset, NoduleAnnotation, Volume, load_dataset
from .settings import console
from .tensor import Tensor, backward


logger = logging.getLogger(__name__)


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    With `clip_norm` set, the raw gradients are rescaled so their global L2
    norm is at most `clip_norm` before the update.
    """

    def __init__(self, params: ParameterSet, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_norm: Optional[float] = None) -> None:
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity: Dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in params.tensors.items()
        }

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.tensors.values():
            if t.grad is not None:
                total += float(np.sum(np.square(t.grad, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, norm: Optional[float] = None) -> float:
        """Apply one update and return the pre-clip gradient norm."""
        if norm is None:
            norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, t in self.params.tensors.items():
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += scale * t.grad + self.weight_decay * t.data
            t.data -= (self.lr * v).astype(t.dtype, copy=False)
        return norm


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: multiply by lr_gamma at each milestone fraction of the epochs."""
    passed = sum(epoch >= int(round(m * cfg.epochs)) for m in cfg.lr_milestones)
    return cfg.lr * cfg.lr_gamma ** passed


def split_scans(scan_ids: Sequence[str], train_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """Seeded scan-level split. A fraction of 1 trains and tests on every scan."""
    ids = sorted(scan_ids)
    if not ids:
        raise DataError("cannot split an empty dataset")
    if train_fraction >= 1.0 or len(ids) == 1:
        return ids, list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


def split_hash(train: Sequence[str], test: Sequence[str]) -> str:
    payload = json.dumps({"train": sorted(train), "test": sorted(test)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# Run log

@dataclass
class RunRecord:
    step: int
    epoch: int
    cls_loss: float
    reg_loss: float
    total: float
    lr: float
    n_pos: int
    grad_norm: float = 0.0
    ts: str = ""


class RunLog:
    """JSON-lines log of per-step losses; truncated when a run starts."""

    def __init__(self, path: str) -> None:
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        open(path, "w").close()
        self.last_step = 0

    def append(self, record: RunRecord) -> None:
        if record.step <= self.last_step:
            raise TrainingError("run log steps must increase", record.step)
        if not all(math.isfinite(v) for v in (record.cls_loss, record.reg_loss, record.total)):
            raise TrainingError("refusing to log a non-finite loss", record.step)
        record.ts = record.ts or pendulum.now("UTC").to_iso8601_string()
        with open(self.path, "a") as f:
            f.write(json.dumps(asdict(record)) + "\n")
        self.last_step = record.step

    @staticmethod
    def read(path: str) -> List[RunRecord]:
        if not os.path.exists(path):
            raise DataError(f"run log not found: {path}")
        with open(path, "r") as f:
            return [RunRecord(**json.loads(line)) for line in f if line.strip()]


# Crop sampling

@dataclass(frozen=True)
class Crop:
    scan_index: int
    origin: Tuple[int, int, int]
    positive: bool
    augment_seed: Optional[int] = None


def crop_extents(model: GASSD) -> Tuple[int, int, int]:
    """Crop size in volume voxels: a tile, or one slice plane in 2.5D mode."""
    return model.input_extents


def _positive_origin(rng: np.random.Generator, center: float, tile: int, extent: int) -> int:
    upper = max(extent - tile, 0)
    if tile == 1:
        return int(np.clip(round(center), 0, extent - 1))
    lo = max(int(math.ceil(center - 0.75 * tile)), 0)
    hi = min(int(math.floor(center - 0.25 * tile)), upper)
    if lo > hi:
        return int(np.clip(round(center - tile / 2), 0, upper))
    return int(rng.integers(lo, hi + 1))


def sample_crops(dataset: Dataset, model: GASSD, rng: np.random.Generator,
                 background_ratio: float = 1.0, augment: bool = True) -> List[Crop]:
    """One crop around every nodule plus `background_ratio` random crops per nodule, shuffled."""
    tile = crop_extents(model)
    crops: List[Crop] = []
    for vi, v in enumerate(dataset.volumes):
        for a in dataset.annotations.get(v.scan_id, []):
            origin = tuple(
                _positive_origin(rng, c, t, e) for c, t, e in zip((a.z, a.y, a.x), tile, v.shape)
            )
            crops.append(Crop(vi, origin, True))
    n_background = int(round(background_ratio * len(crops))) if crops else max(int(round(background_ratio)), 1)
    for _ in range(n_background):
        vi = int(rng.integers(len(dataset.volumes)))
        shape = dataset.volumes[vi].shape
        origin = tuple(int(rng.integers(0, max(e - t, 0) + 1)) for t, e in zip(tile, shape))
        crops.append(Crop(vi, origin, False))
    order = rng.permutation(len(crops))
    seeds = rng.integers(0, 2 ** 31 - 1, size=len(crops))
    return [
        dataclasses.replace(crops[i], augment_seed=int(s) if augment else None)
        for i, s in zip(order, seeds)
    ]


@dataclass
class Sample:
    data: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray


def build_sample(model: GASSD, volume: Volume, annotations: Sequence[NoduleAnnotation], crop: Crop) -> Sample:
    cfg = model.cfg
    d, h, w = crop_extents(model)
    z0, y0, x0 = crop.origin
    if cfg.input_mode == "multi_channel_2_5d":
        data = make_input_25d(volume, z0, cfg.n_slices, (y0, x0), (h, w), dtype=model.dtype).data[0]
    else:
        data = make_input_3d(volume, crop.origin, (d, h, w), dtype=model.dtype).data[0]
    local = [dataclasses.replace(a, x=a.x - x0, y=a.y - y0, z=a.z - z0) for a in annotations]
    if crop.augment_seed is not None:
        data, local = apply_augmentation(data, local, draw_augmentation(crop.augment_seed))

    sz, sy, sx = volume.spacing_mm
    boxes, classes = [], []
    for a in local:
        bw, bh = a.diameter_mm / sx, a.diameter_mm / sy
        if not (0 <= a.x < w and 0 <= a.y < h):
            continue
        if cfg.input_mode == "multi_channel_2_5d":
            if abs(a.z) > max(bw, bh) / 2:
                continue
        elif not 0 <= a.z < d:
            continue
        # anchor centres use the (index + 0.5) convention
        boxes.append((a.x + 0.5, a.y + 0.5, a.z + 0.5, bw, bh))
        classes.append(CATEGORIES.index(a.category) + 1)
    return Sample(
        data=data,
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 5),
        classes=np.asarray(classes, dtype=np.int64),
    )


def batch_loss(model: GASSD, samples: Sequence[Sample], cfg: TrainConfig,
               mode: str = "train", seed: int = 0) -> Tuple[Tensor, LossBreakdown]:
    """Mean multibox loss over a batch; anchors of every active level are matched jointly."""
    head = model.cfg.head
    x = Tensor(np.stack([s.data for s in samples]).astype(model.dtype, copy=False))
    preds = model.forward(x, mode=mode, seed=seed)
    anchors = model.anchors()
    k = len(anchors)
    graphs = []
    cls_sum = reg_sum = 0.0
    n_pos = n_neg = 0
    for n, s in enumerate(samples):
        match = match_anchors(anchors, s.boxes, head.pos_thr, head.neg_thr, head.variances)
        cls_n = ops.reshape(ops.index_select(preds.cls_logits, [n], axis=0), (k, model.cfg.num_classes))
        reg_n = ops.reshape(ops.index_select(preds.reg, [n], axis=0), (k, 4))
        lb = multibox_loss(cls_n, reg_n, match, s.classes, head.mining_ratio, cfg.reg_weight)
        graphs.append(lb.graph)
        cls_sum += lb.cls_loss
        reg_sum += lb.reg_loss
        n_pos += lb.n_pos
        n_neg += lb.n_neg_mined
    total = graphs[0]
    for g in graphs[1:]:
        total = ops.add(total, g)
    total = ops.mul(total, 1.0 / len(samples))
    m = len(samples)
    summary = LossBreakdown(
        cls_loss=cls_sum / m, reg_loss=reg_sum / m, total=cls_sum / m + reg_sum / m,
        n_pos=n_pos, n_neg_mined=n_neg, graph=total,
    )
    return total, summary


@dataclass
class TrainResult:
    model: GASSD
    history: List[RunRecord] = field(default_factory=list)
    train_scans: List[str] = field(default_factory=list)
    test_scans: List[str] = field(default_factory=list)
    split_hash: str = ""

    def epoch_losses(self) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for r in self.history:
            by_epoch.setdefault(r.epoch, []).append(r.total)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train(
    cfg: TrainConfig,
    dataset: Optional[Dataset] = None,
    max_workers: int = 1,
    show_progress: bool = True,
) -> TrainResult:
    if dataset is None:
        dataset = load_dataset(cfg.data_dir)
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    train_ids, test_ids = split_scans(dataset.scan_ids, cfg.train_fraction, cfg.seed)
    digest = split_hash(train_ids, test_ids)
    logger.info("split %s: %d train / %d test scans", digest, len(train_ids), len(test_ids))
    train_set = dataset.subset(train_ids)

    model = GASSD(cfg.network, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    optimizer = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay, clip_norm=cfg.grad_clip)
    rng = np.random.default_rng(cfg.seed)
    run_log = RunLog(cfg.log_path)
    result = TrainResult(model=model, train_scans=train_ids, test_scans=test_ids, split_hash=digest)
    step = 0

    columns = (TextColumn("{task.description}"), BarColumn(), TextColumn("{task.fields[loss]}"), TimeElapsedColumn())
    with Progress(*columns, console=console, disable=not show_progress, transient=True) as progress, \
            ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        task = progress.add_task("training", total=cfg.epochs, loss="")
        for epoch in range(cfg.epochs):
            optimizer.lr = lr_at(cfg, epoch)
            crops = sample_crops(train_set, model, rng, cfg.background_ratio, cfg.augment)
            totals = []
            for start in range(0, len(crops), cfg.batch_size):
                batch = crops[start:start + cfg.batch_size]
                step += 1
                samples = list(pool.map(
                    lambda c: build_sample(
                        model, train_set.volumes[c.scan_index],
                        train_set.annotations.get(train_set.volumes[c.scan_index].scan_id, []), c,
                    ),
                    batch,
                ))
                model.params.zero_grad()
                graph, summary = batch_loss(model, samples, cfg, mode="train", seed=cfg.seed * 1_000_003 + step)
                if not math.isfinite(summary.total):
                    logger.error("non-finite loss at step %d (epoch %d)", step, epoch + 1)
                    raise TrainingError(f"loss became {summary.total}", step)
                backward(graph)
                grad_norm = optimizer.grad_norm()
                if not math.isfinite(grad_norm):
                    logger.error("non-finite gradient norm at step %d (epoch %d)", step, epoch + 1)
                    raise TrainingError(f"gradient norm became {grad_norm}", step)
                optimizer.step(grad_norm)
                record = RunRecord(
                    step=step, epoch=epoch + 1, cls_loss=summary.cls_loss, reg_loss=summary.reg_loss,
                    total=summary.total, lr=optimizer.lr, n_pos=summary.n_pos, grad_norm=grad_norm,
                )
                run_log.append(record)
                result.history.append(record)
                totals.append(summary.total)
                if step % cfg.log_every == 0:
                    logger.debug("step %d: cls %.4f reg %.4f grad norm %.3g",
                                 step, summary.cls_loss, summary.reg_loss, grad_norm)
            model.save(cfg.checkpoint_dir, epoch=epoch + 1, split_hash=digest,
                       train_scans=train_ids, test_scans=test_ids)
            mean_loss = float(np.mean(totals)) if totals else 0.0
            logger.info("epoch %d/%d: loss %.4f (lr %g, %d steps)", epoch + 1, cfg.epochs, mean_loss, optimizer.lr, len(totals))
            progress.update(task, advance=1, loss=f"{mean_loss:.4f}")
    return result


def evaluate(
    checkpoint: Union[str, GASSD],
    dataset: Dataset,
    out_dir: Optional[str] = None,
    threshold: Optional[float] = None,
    network=None,
    max_workers: int = 1,
) -> Tuple[CpmReport, List[FrocPoint]]:
    """detect_volume over every scan, then the FROC/CPM pipeline."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    model = checkpoint if isinstance(checkpoint, GASSD) else GASSD.load(checkpoint, expect=network)
    detections = detect_all(model, dataset.volumes, max_workers)
    report, curve = build_report(
        detections,
        dataset.all_annotations(),
        n_scans=len(dataset),
        threshold=model.cfg.head.report_threshold if threshold is None else threshold,
        spacings={v.scan_id: v.spacing_mm for v in dataset.volumes},
        scan_ids=dataset.scan_ids,
    )
    if out_dir:
        write_detections(os.path.join(out_dir, "detections.csv"), detections)
        write_froc_csv(os.path.join(out_dir, "froc.csv"), curve)
        write_report(os.path.join(out_dir, "report.json"), report)
        logger.info("evaluation written to %s\n%s", out_dir, format_report(report))
    return report, curve
