import numpy as np
import pytest

from ga_ssd.attention import GAConfig
from ga_ssd.boxes import Detection
from ga_ssd.config import NetworkConfig, TrainConfig
from ga_ssd.phantom import Dataset, NoduleAnnotation, SynthSpec, synth_volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_network(**overrides) -> NetworkConfig:
    values = dict(
        input_mode="volume_3d",
        active_levels=["P2", "P3"],
        stem_channels=4,
        cardinality=2,
        pyramid_channels=8,
        max_channels=16,
        tile=(4, 32, 32),
        n_slices=3,
        ga=GAConfig(groups=2),
    )
    values.update(overrides)
    return NetworkConfig(**values)


@pytest.fixture
def network_cfg():
    return tiny_network()


@pytest.fixture
def train_cfg(tmp_path):
    return TrainConfig(
        lr=0.001,
        batch_size=2,
        epochs=1,
        seed=7,
        train_fraction=1.0,
        checkpoint_dir=str(tmp_path / "ckpt"),
        augment=True,
        dtype="float64",
        network=tiny_network(),
    )


SMALL_SPEC = dict(
    n_volumes=2,
    volume_extents=(8, 64, 64),
    nodules_per_volume=(1, 2),
    category_weights={"solid_small": 1.0, "calc_small": 1.0},
    seed=3,
)


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(**SMALL_SPEC)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    volumes, annotations = [], {}
    for i in range(small_spec.n_volumes):
        volume, nodules = synth_volume(small_spec, i)
        volumes.append(volume)
        annotations[volume.scan_id] = nodules
    return Dataset(volumes=volumes, annotations=annotations)


# Hand-checked evaluation fixture: two scans at 1 mm isotropic spacing, three
# nodules, five detections of which the 0.9 and the 0.6 ones hit.
FIXTURE_SPACING = (1.0, 1.0, 1.0)


def fixture_annotations():
    return [
        NoduleAnnotation(x=10, y=10, z=10, diameter_mm=6.0, category="solid_large", scan_id="A"),
        NoduleAnnotation(x=20, y=20, z=5, diameter_mm=8.0, category="pggn", scan_id="B"),
        NoduleAnnotation(x=40, y=40, z=5, diameter_mm=4.0, category="calc_small", scan_id="B"),
    ]


def fixture_detections():
    def det(x, y, z, prob, scan_id, category="solid_large"):
        return Detection(x=x, y=y, z=z, w=6.0, h=6.0, category=category, prob=prob, scan_id=scan_id)

    return [
        det(10, 10, 10, 0.9, "A"),
        det(30, 30, 10, 0.8, "A"),
        det(5, 40, 5, 0.7, "B"),
        det(21, 20, 5, 0.6, "B", category="pggn"),
        det(50, 10, 5, 0.5, "B"),
    ]


# (threshold, fp_per_scan, sensitivity) by exhaustive threshold sweep
FIXTURE_CURVE = [
    (0.9, 0.0, 1 / 3),
    (0.8, 0.5, 1 / 3),
    (0.7, 1.0, 1 / 3),
    (0.6, 1.0, 2 / 3),
    (0.5, 1.5, 2 / 3),
]
FIXTURE_CPM = 11 / 21


@pytest.fixture
def hand_fixture():
    return fixture_detections(), fixture_annotations()
