"""FROC analysis, CPM, FP/TP ratio and per-category sensitivity.

A detection hits an annotation when its centre lies in the closed ball of the
nodule's radius (in mm). Detections are credited greedily in descending
probability: each annotation is credited once, a detection that only hits
already-credited annotations is ignored, and one that hits nothing is a false
positive.
"""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from tabulate import tabulate

from .boxes import Detection
from .errors import DataError
from .phantom import CATEGORIES, NoduleAnnotation, size_bin


FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
CATEGORY_BUCKETS = ("calcified", "pleural", "3-6", "6-10", "10-30", "mass", "pggn", "mggn")
DEFAULT_SPACING = (1.25, 0.7, 0.7)

Spacing = Tuple[float, float, float]
Spacings = Union[Spacing, Mapping[str, Spacing]]


@dataclass
class FrocPoint:
    threshold: float
    fp_per_scan: float
    sensitivity: float


@dataclass
class CpmReport:
    cpm: float
    sensitivities_at: Dict[str, float]
    fp_tp_ratio: float
    per_category: Dict[str, float] = field(default_factory=dict)
    n_scans: int = 0
    n_nodules: int = 0
    reporting_threshold: float = 0.5

    def to_json(self) -> Dict:
        data = asdict(self)
        if math.isinf(self.fp_tp_ratio):
            data["fp_tp_ratio"] = "inf"
        return data


def rate_key(rate: float) -> str:
    return f"{rate:g}"


def category_bucket(a: NoduleAnnotation) -> str:
    if a.category not in CATEGORIES:
        raise DataError(f"unknown nodule category {a.category!r}")
    if a.category.startswith("calc"):
        return "calcified"
    if a.category.startswith("pleural"):
        return "pleural"
    if a.category.startswith("solid"):
        return size_bin(a.diameter_mm)
    return a.category


def _spacing_for(spacings: Spacings, scan_id: str) -> Spacing:
    if isinstance(spacings, Mapping):
        try:
            return tuple(spacings[scan_id])
        except KeyError:
            raise DataError(f"no voxel spacing known for scan {scan_id!r}") from None
    return tuple(spacings)


def hit_test(d: Detection, a: NoduleAnnotation, spacing: Spacing = DEFAULT_SPACING) -> bool:
    if d.scan_id and a.scan_id and d.scan_id != a.scan_id:
        raise DataError(f"detection from scan {d.scan_id!r} tested against annotation of {a.scan_id!r}")
    sz, sy, sx = spacing
    dist = math.sqrt(((d.x - a.x) * sx) ** 2 + ((d.y - a.y) * sy) ** 2 + ((d.z - a.z) * sz) ** 2)
    return dist <= a.diameter_mm / 2


def _ranked(detections: Iterable[Detection]) -> List[Detection]:
    return sorted(detections, key=lambda d: (-d.prob, d.scan_id, d.x, d.y, d.z, d.category))


def _check_scans(detections: Sequence[Detection], scan_ids: Optional[Iterable[str]]) -> None:
    if scan_ids is None:
        return
    known = set(scan_ids)
    for d in detections:
        if d.scan_id not in known:
            raise DataError(f"detection references unknown scan {d.scan_id!r}")


class _Crediting:
    """Greedy crediting state, fed detections in descending probability."""

    def __init__(self, annotations: Sequence[NoduleAnnotation], spacings: Spacings) -> None:
        self.annotations = list(annotations)
        self.spacings = spacings
        self.by_scan: Dict[str, List[int]] = {}
        for i, a in enumerate(self.annotations):
            self.by_scan.setdefault(a.scan_id, []).append(i)
        self.credited: Set[int] = set()
        self.tp = 0
        self.fp = 0

    def add(self, d: Detection) -> None:
        candidates = self.by_scan.get(d.scan_id, [])
        if not candidates:
            self.fp += 1
            return
        spacing = _spacing_for(self.spacings, d.scan_id)
        hits = [i for i in candidates if hit_test(d, self.annotations[i], spacing)]
        if not hits:
            self.fp += 1
            return
        open_hits = [i for i in hits if i not in self.credited]
        if not open_hits:
            return
        sz, sy, sx = spacing

        def distance(i: int) -> float:
            a = self.annotations[i]
            return ((d.x - a.x) * sx) ** 2 + ((d.y - a.y) * sy) ** 2 + ((d.z - a.z) * sz) ** 2

        self.credited.add(min(open_hits, key=lambda i: (distance(i), i)))
        self.tp += 1


def credit(
    detections: Sequence[Detection],
    annotations: Sequence[NoduleAnnotation],
    threshold: float,
    spacings: Spacings = DEFAULT_SPACING,
) -> _Crediting:
    state = _Crediting(annotations, spacings)
    for d in _ranked(detections):
        if d.prob >= threshold:
            state.add(d)
    return state


def froc(
    detections: Sequence[Detection],
    annotations: Sequence[NoduleAnnotation],
    n_scans: int,
    spacings: Spacings = DEFAULT_SPACING,
    scan_ids: Optional[Iterable[str]] = None,
) -> List[FrocPoint]:
    """One point per distinct detection probability, in descending threshold."""
    if n_scans < 1:
        raise DataError(f"n_scans must be >= 1, got {n_scans}")
    _check_scans(detections, scan_ids)
    total = len(annotations)
    ranked = _ranked(detections)
    if not ranked:
        return [FrocPoint(threshold=1.0, fp_per_scan=0.0, sensitivity=0.0)]
    state = _Crediting(annotations, spacings)
    points: List[FrocPoint] = []
    for i, d in enumerate(ranked):
        state.add(d)
        if i + 1 == len(ranked) or ranked[i + 1].prob != d.prob:
            points.append(FrocPoint(
                threshold=d.prob,
                fp_per_scan=state.fp / n_scans,
                sensitivity=state.tp / total if total else 0.0,
            ))
    return points


def sensitivity_at(curve: Sequence[FrocPoint], rate: float) -> float:
    eligible = [p.sensitivity for p in curve if p.fp_per_scan <= rate]
    return max(eligible) if eligible else 0.0


def cpm(curve: Sequence[FrocPoint]) -> Tuple[float, Dict[str, float]]:
    """Mean sensitivity at 1/8 ... 8 false positives per scan (step-function lookup)."""
    if not curve:
        raise DataError("cpm needs a non-empty FROC curve")
    at = {rate_key(r): sensitivity_at(curve, r) for r in FP_RATES}
    return float(np.mean(list(at.values()))), at


def fp_tp_ratio(
    detections: Sequence[Detection],
    annotations: Sequence[NoduleAnnotation],
    threshold: float,
    spacings: Spacings = DEFAULT_SPACING,
) -> float:
    state = credit(detections, annotations, threshold, spacings)
    if state.tp == 0:
        return math.inf if state.fp else 0.0
    return state.fp / state.tp


def per_category_report(
    detections: Sequence[Detection],
    annotations: Sequence[NoduleAnnotation],
    threshold: float,
    spacings: Spacings = DEFAULT_SPACING,
) -> Dict[str, float]:
    """Sensitivity per bucket present in `annotations`, at `threshold`."""
    buckets = [category_bucket(a) for a in annotations]
    state = credit(detections, annotations, threshold, spacings)
    report: Dict[str, float] = {}
    for bucket in CATEGORY_BUCKETS:
        members = [i for i, b in enumerate(buckets) if b == bucket]
        if members:
            report[bucket] = sum(i in state.credited for i in members) / len(members)
    return report


def build_report(
    detections: Sequence[Detection],
    annotations: Sequence[NoduleAnnotation],
    n_scans: int,
    threshold: float = 0.5,
    spacings: Spacings = DEFAULT_SPACING,
    scan_ids: Optional[Iterable[str]] = None,
) -> Tuple[CpmReport, List[FrocPoint]]:
    curve = froc(detections, annotations, n_scans, spacings, scan_ids)
    score, at = cpm(curve)
    report = CpmReport(
        cpm=score,
        sensitivities_at=at,
        fp_tp_ratio=fp_tp_ratio(detections, annotations, threshold, spacings),
        per_category=per_category_report(detections, annotations, threshold, spacings),
        n_scans=n_scans,
        n_nodules=len(annotations),
        reporting_threshold=threshold,
    )
    return report, curve


# Files

DETECTION_FIELDS = ["scan_id", "x", "y", "z", "w", "h", "prob", "category"]


def write_detections(path: str, detections: Sequence[Detection]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=DETECTION_FIELDS)
        writer.writeheader()
        for d in detections:
            writer.writerow({k: getattr(d, k) for k in DETECTION_FIELDS})


def read_detections(path: str) -> List[Detection]:
    if not os.path.exists(path):
        raise DataError(f"detection file not found: {path}")
    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(DETECTION_FIELDS) - set(reader.fieldnames):
            raise DataError(f"{path}: header must be {','.join(DETECTION_FIELDS)}")
        detections = []
        for row in reader:
            if row["category"] not in CATEGORIES:
                raise DataError(f"{path}: unknown category {row['category']!r}")
            detections.append(Detection(
                x=float(row["x"]), y=float(row["y"]), z=float(row["z"]),
                w=float(row["w"]), h=float(row["h"]), category=row["category"],
                prob=float(row["prob"]), scan_id=row["scan_id"],
            ))
    return detections


def write_froc_csv(path: str, curve: Sequence[FrocPoint]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fp_per_scan", "sensitivity"])
        for p in curve:
            writer.writerow([p.threshold, p.fp_per_scan, p.sensitivity])


def write_report(path: str, report: CpmReport) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)


def format_report(report: CpmReport) -> str:
    """Plain-text summary for log output."""
    rows = [[f"sens@{k}", v] for k, v in report.sensitivities_at.items()]
    rows += [[bucket, v] for bucket, v in report.per_category.items()]
    rows += [["cpm", report.cpm], ["fp/tp", report.fp_tp_ratio]]
    return tabulate(rows, headers=["metric", "value"], floatfmt=".4f")
