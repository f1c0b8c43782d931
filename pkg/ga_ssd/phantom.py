"""Synthetic CT-like volumes with labelled nodules, and their on-disk format.

A volume is lung parenchyma texture inside an ellipsoidal lung mask with a
soft-tissue wall outside it. Nodules are smooth-edged spheres (in mm) whose
intensity depends on their category.
"""

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from tenacity import RetryError, retry, retry_if_exception_type, stop_after_attempt

from .errors import ConfigurationError, DataError, GenerationError, PayloadLengthError, VolumeFormatError


logger = logging.getLogger(__name__)

HU_MIN, HU_MAX = -1000.0, 400.0
PARENCHYMA_HU = -850.0
WALL_HU = 0.0

CATEGORIES = (
    "calc_small", "calc_large",
    "pleural_small", "pleural_large",
    "solid_small", "solid_large",
    "pggn", "mggn",
)
# Ground-glass renders at -600 HU: brighter than the -850 HU parenchyma yet far
# below solid tissue, so intensity orders calcified > solid > pggn > background.
CATEGORY_HU = {
    "calc": 300.0,
    "pleural": 20.0,
    "solid": 20.0,
    "pggn": -600.0,
}
MGGN_CORE_HU, MGGN_HALO_HU = 20.0, -600.0
SIZE_BINS = ("3-6", "6-10", "10-30", "mass")


def _default_diameters() -> Dict[str, Tuple[float, float]]:
    return {
        "calc_small": (3.0, 6.0), "calc_large": (6.0, 12.0),
        "pleural_small": (3.0, 6.0), "pleural_large": (6.0, 12.0),
        "solid_small": (3.0, 6.0), "solid_large": (6.0, 12.0),
        "pggn": (5.0, 12.0), "mggn": (5.0, 12.0),
    }


def size_bin(diameter_mm: float) -> str:
    if diameter_mm < 6.0:
        return "3-6"
    if diameter_mm < 10.0:
        return "6-10"
    if diameter_mm <= 30.0:
        return "10-30"
    return "mass"


@dataclass
class Volume:
    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.25, 0.7, 0.7)
    scan_id: str = ""

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.voxels.ndim != 3:
            raise DataError(f"volume {self.scan_id!r} must be 3-D, got shape {self.voxels.shape}")
        if not 0.8 <= self.spacing_mm[0] <= 2.5:
            raise DataError(f"volume {self.scan_id!r}: slice spacing {self.spacing_mm[0]} outside [0.8, 2.5] mm")
        if not np.all(np.isfinite(self.voxels)):
            raise DataError(f"volume {self.scan_id!r} contains non-finite voxels")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class NoduleAnnotation:
    x: float
    y: float
    z: float
    diameter_mm: float
    category: str
    scan_id: str = ""

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise DataError(f"unknown nodule category {self.category!r}")
        if self.diameter_mm <= 0:
            raise DataError(f"nodule diameter must be positive, got {self.diameter_mm}")

    @property
    def size_bin(self) -> str:
        return size_bin(self.diameter_mm)

    def box(self, spacing_mm: Sequence[float]) -> np.ndarray:
        """(x, y, z, w, h) box in voxels, square footprint of the diameter."""
        wx = self.diameter_mm / spacing_mm[2]
        hy = self.diameter_mm / spacing_mm[1]
        return np.array([self.x, self.y, self.z, wx, hy])


@dataclass
class SynthSpec:
    n_volumes: int = 8
    volume_extents: Tuple[int, int, int] = (32, 64, 64)
    nodules_per_volume: Tuple[int, int] = (2, 4)
    category_weights: Dict[str, float] = field(default_factory=lambda: {c: 1.0 for c in CATEGORIES})
    diameter_mm: Dict[str, Tuple[float, float]] = field(default_factory=_default_diameters)
    noise_sigma: float = 25.0
    spacing_xy: float = 0.7
    spacing_z_range: Tuple[float, float] = (1.25, 1.25)
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self) -> None:
        self.volume_extents = tuple(int(e) for e in self.volume_extents)
        self.nodules_per_volume = tuple(int(n) for n in self.nodules_per_volume)
        self.spacing_z_range = tuple(float(s) for s in self.spacing_z_range)
        self.diameter_mm = {**_default_diameters(), **{k: tuple(v) for k, v in self.diameter_mm.items()}}
        unknown = sorted(set(self.category_weights) - set(CATEGORIES))
        if unknown:
            raise ConfigurationError(f"unknown categories in category_weights: {unknown}")
        weights = [self.category_weights.get(c, 0.0) for c in CATEGORIES]
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigurationError("category weights must be non-negative with a positive sum")
        lo, hi = self.nodules_per_volume
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"invalid nodules_per_volume range {self.nodules_per_volume}")
        zlo, zhi = self.spacing_z_range
        if not 0.8 <= zlo <= zhi <= 2.5:
            raise ConfigurationError(f"spacing_z_range {self.spacing_z_range} must lie within [0.8, 2.5]")
        if self.n_volumes < 1 or any(e < 1 for e in self.volume_extents):
            raise ConfigurationError("n_volumes and volume_extents must be positive")

    @property
    def probabilities(self) -> np.ndarray:
        weights = np.array([self.category_weights.get(c, 0.0) for c in CATEGORIES], dtype=np.float64)
        return weights / weights.sum()

    def scan_id(self, index: int) -> str:
        return f"synth_{self.seed:04d}_{index:04d}"


class _Rejected(Exception):
    pass


def _lung_geometry(extents: Tuple[int, int, int]):
    d, h, w = extents
    center = np.array([(d - 1) / 2, (h - 1) / 2, (w - 1) / 2])
    radii = np.array([0.6 * d, 0.42 * h, 0.42 * w])
    return center, radii


def _background(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    extents = spec.volume_extents
    center, radii = _lung_geometry(extents)
    zz, yy, xx = np.indices(extents, dtype=np.float64)
    inside = (((zz - center[0]) / radii[0]) ** 2
              + ((yy - center[1]) / radii[1]) ** 2
              + ((xx - center[2]) / radii[2]) ** 2) <= 1.0
    texture = gaussian_filter(rng.normal(size=extents), sigma=1.5)
    texture *= spec.noise_sigma / max(texture.std(), 1e-12)
    vol = np.where(inside, PARENCHYMA_HU, WALL_HU) + texture
    return vol


def _draw_center(rng: np.random.Generator, spec: SynthSpec, category: str,
                 diameter: float, spacing: Tuple[float, float, float]) -> np.ndarray:
    d, h, w = spec.volume_extents
    center, radii = _lung_geometry(spec.volume_extents)
    r_vox = np.array([diameter / 2 / s for s in spacing])
    if category.startswith("pleural"):
        theta = rng.uniform(0.0, 2 * np.pi)
        z = rng.uniform(r_vox[0], d - 1 - r_vox[0]) if d - 1 > 2 * r_vox[0] else (d - 1) / 2
        # scale the ellipse so the sphere touches the mask from inside
        dz = ((z - center[0]) / radii[0]) ** 2
        ring = np.sqrt(max(1.0 - dz, 0.0))
        y = center[1] + (radii[1] * ring - r_vox[1]) * np.sin(theta)
        x = center[2] + (radii[2] * ring - r_vox[2]) * np.cos(theta)
        pos = np.array([z, y, x])
    else:
        pos = np.array([rng.uniform(r, e - 1 - r) if e - 1 > 2 * r else (e - 1) / 2
                        for r, e in zip(r_vox, (d, h, w))])
        norm = np.sqrt((((pos - center) / np.maximum(radii - r_vox, 1e-6)) ** 2).sum())
        if norm > 1.0:
            raise _Rejected("outside lung")
    if np.any(pos < 0) or np.any(pos > np.array([d, h, w]) - 1):
        raise _Rejected("outside volume")
    return pos


def _render(vol: np.ndarray, pos: np.ndarray, diameter: float, category: str,
            spacing: Tuple[float, float, float]) -> None:
    zz, yy, xx = np.indices(vol.shape, dtype=np.float64)
    dist = np.sqrt(((zz - pos[0]) * spacing[0]) ** 2
                   + ((yy - pos[1]) * spacing[1]) ** 2
                   + ((xx - pos[2]) * spacing[2]) ** 2)
    edge = 0.3

    def blend(radius: float, value: float) -> None:
        weight = 1.0 / (1.0 + np.exp(np.clip((dist - radius) / edge, -50, 50)))
        vol[...] = vol * (1.0 - weight) + value * weight

    if category == "mggn":
        blend(diameter / 2, MGGN_HALO_HU)
        blend(diameter / 4, MGGN_CORE_HU)
    else:
        blend(diameter / 2, CATEGORY_HU[category.split("_")[0]])


def synth_volume(spec: SynthSpec, index: int) -> Tuple[Volume, List[NoduleAnnotation]]:
    """Volume `index` of `spec`; identical for identical (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    scan_id = spec.scan_id(index)
    zlo, zhi = spec.spacing_z_range
    spacing = (float(rng.uniform(zlo, zhi)) if zhi > zlo else zlo, spec.spacing_xy, spec.spacing_xy)
    vol = _background(rng, spec)

    lo, hi = spec.nodules_per_volume
    count = int(rng.integers(lo, hi + 1))
    placed: List[Tuple[np.ndarray, float]] = []
    annotations: List[NoduleAnnotation] = []
    mm = np.array(spacing)

    for _ in range(count):
        category = CATEGORIES[int(rng.choice(len(CATEGORIES), p=spec.probabilities))]
        dlo, dhi = spec.diameter_mm[category]
        diameter = float(rng.uniform(dlo, dhi))

        @retry(stop=stop_after_attempt(spec.max_attempts), retry=retry_if_exception_type(_Rejected))
        def place() -> np.ndarray:
            pos = _draw_center(rng, spec, category, diameter, spacing)
            for other, other_d in placed:
                if np.linalg.norm((pos - other) * mm) <= (diameter + other_d) / 2 + 1.0:
                    raise _Rejected("overlap")
            return pos

        try:
            pos = place()
        except RetryError as e:
            raise GenerationError(
                f"{scan_id}: could not place a {diameter:.1f} mm {category} nodule "
                f"after {spec.max_attempts} attempts"
            ) from e
        _render(vol, pos, diameter, category, spacing)
        placed.append((pos, diameter))
        annotations.append(NoduleAnnotation(
            x=float(pos[2]), y=float(pos[1]), z=float(pos[0]),
            diameter_mm=diameter, category=category, scan_id=scan_id,
        ))

    voxels = np.clip(vol, HU_MIN, HU_MAX).astype(np.float32)
    return Volume(voxels=voxels, spacing_mm=spacing, scan_id=scan_id), annotations


# Volume files

def _stem(path: str) -> str:
    for suffix in (".json", ".raw"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def save_volume(v: Volume, directory: str) -> str:
    """Write `<scan_id>.json` + `<scan_id>.raw`; returns the sidecar path."""
    os.makedirs(directory, exist_ok=True)
    stem = os.path.join(directory, v.scan_id)
    with open(stem + ".raw", "wb") as f:
        f.write(np.ascontiguousarray(v.voxels, dtype="<f4").tobytes())
    with open(stem + ".json", "w") as f:
        json.dump({"shape": list(v.shape), "spacing_mm": list(v.spacing_mm), "dtype": "f32le"}, f)
    return stem + ".json"


def load_volume(path: str) -> Volume:
    stem = _stem(path)
    try:
        with open(stem + ".json", "r") as f:
            header = json.load(f)
    except OSError as e:
        raise DataError(f"volume header not found: {stem}.json") from e
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"invalid JSON ({e})", field="header") from e
    if not isinstance(header, dict):
        raise VolumeFormatError("expected a JSON object", field="header")
    shape = header.get("shape")
    if not isinstance(shape, list) or len(shape) != 3 or not all(isinstance(s, int) and s > 0 for s in shape):
        raise VolumeFormatError(f"expected three positive integers, got {shape!r}", field="shape")
    spacing = header.get("spacing_mm")
    if not isinstance(spacing, list) or len(spacing) != 3 or not all(isinstance(s, (int, float)) for s in spacing):
        raise VolumeFormatError(f"expected three numbers, got {spacing!r}", field="spacing_mm")
    if header.get("dtype") != "f32le":
        raise VolumeFormatError(f"unsupported dtype {header.get('dtype')!r}", field="dtype")
    try:
        with open(stem + ".raw", "rb") as f:
            payload = f.read()
    except OSError as e:
        raise DataError(f"volume payload not found: {stem}.raw") from e
    expected = int(np.prod(shape))
    if len(payload) % 4 or len(payload) // 4 != expected:
        raise PayloadLengthError(expected, len(payload) // 4)
    voxels = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(voxels=voxels, spacing_mm=tuple(spacing), scan_id=os.path.basename(stem))


# Annotation CSV

ANNOTATION_FIELDS = ["scan_id", "x", "y", "z", "diameter_mm", "category"]


def write_annotations(path: str, annotations: Sequence[NoduleAnnotation]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ANNOTATION_FIELDS)
        writer.writeheader()
        for a in annotations:
            writer.writerow({k: v for k, v in asdict(a).items() if k in ANNOTATION_FIELDS})


def read_annotations(path: str) -> List[NoduleAnnotation]:
    if not os.path.exists(path):
        raise DataError(f"annotation file not found: {path}")
    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(ANNOTATION_FIELDS) - set(reader.fieldnames):
            raise DataError(f"{path}: header must be {','.join(ANNOTATION_FIELDS)}")
        return [
            NoduleAnnotation(
                x=float(row["x"]), y=float(row["y"]), z=float(row["z"]),
                diameter_mm=float(row["diameter_mm"]), category=row["category"], scan_id=row["scan_id"],
            )
            for row in reader
        ]


# Datasets

DATASET_INDEX = "dataset.json"
ANNOTATIONS_CSV = "annotations.csv"


def write_dataset(spec: SynthSpec, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    scan_ids: List[str] = []
    annotations: List[NoduleAnnotation] = []
    for index in range(spec.n_volumes):
        volume, nodules = synth_volume(spec, index)
        save_volume(volume, out_dir)
        scan_ids.append(volume.scan_id)
        annotations.extend(nodules)
        logger.info("%s: %d nodules", volume.scan_id, len(nodules))
    write_annotations(os.path.join(out_dir, ANNOTATIONS_CSV), annotations)
    with open(os.path.join(out_dir, DATASET_INDEX), "w") as f:
        json.dump({"scans": scan_ids, "spec": json.loads(json.dumps(asdict(spec)))}, f, indent=2)
    return scan_ids


@dataclass
class Dataset:
    volumes: List[Volume]
    annotations: Dict[str, List[NoduleAnnotation]]

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def scan_ids(self) -> List[str]:
        return [v.scan_id for v in self.volumes]

    def subset(self, scan_ids: Sequence[str]) -> "Dataset":
        keep = set(scan_ids)
        return Dataset(
            volumes=[v for v in self.volumes if v.scan_id in keep],
            annotations={k: v for k, v in self.annotations.items() if k in keep},
        )

    def all_annotations(self) -> List[NoduleAnnotation]:
        return [a for v in self.volumes for a in self.annotations.get(v.scan_id, [])]


def read_scan_index(directory: str) -> List[str]:
    """Scan ids listed in a dataset directory's index."""
    index_path = os.path.join(directory, DATASET_INDEX)
    if not os.path.exists(index_path):
        raise DataError(f"no {DATASET_INDEX} in {directory}")
    with open(index_path, "r") as f:
        index = json.load(f)
    return list(index.get("scans", []))


def load_dataset(directory: str, scan_ids: Optional[Sequence[str]] = None) -> Dataset:
    ids = read_scan_index(directory)
    if scan_ids is not None:
        ids = list(scan_ids)
    volumes = [load_volume(os.path.join(directory, sid)) for sid in ids]
    by_scan: Dict[str, List[NoduleAnnotation]] = {sid: [] for sid in ids}
    for a in read_annotations(os.path.join(directory, ANNOTATIONS_CSV)):
        if a.scan_id in by_scan:
            by_scan[a.scan_id].append(a)
    return Dataset(volumes=volumes, annotations=by_scan)
