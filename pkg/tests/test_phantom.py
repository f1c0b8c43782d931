import json
import os
from collections import Counter

import numpy as np
import pytest

from ga_ssd.errors import ConfigurationError, DataError, GenerationError, PayloadLengthError, VolumeFormatError
from ga_ssd.phantom import (
    CATEGORIES,
    CATEGORY_HU,
    MGGN_CORE_HU,
    MGGN_HALO_HU,
    PARENCHYMA_HU,
    NoduleAnnotation,
    SynthSpec,
    Volume,
    load_dataset,
    load_volume,
    read_annotations,
    save_volume,
    size_bin,
    synth_volume,
    write_annotations,
    write_dataset,
)


def test_forced_category_mix():
    spec = SynthSpec(n_volumes=1, nodules_per_volume=(1, 1), category_weights={"solid_small": 1.0}, seed=5)
    volume, nodules = synth_volume(spec, 0)
    assert len(nodules) == 1
    assert nodules[0].category == "solid_small"
    assert 3.0 <= nodules[0].diameter_mm <= 6.0
    assert nodules[0].scan_id == volume.scan_id == "synth_0005_0000"


def test_same_seed_and_index_reproduce(small_spec):
    a, na = synth_volume(small_spec, 1)
    b, nb = synth_volume(small_spec, 1)
    np.testing.assert_array_equal(a.voxels, b.voxels)
    assert na == nb
    c, _ = synth_volume(small_spec, 0)
    assert not np.array_equal(a.voxels, c.voxels)


def test_volume_values_and_spacing(small_spec):
    volume, nodules = synth_volume(small_spec, 0)
    assert volume.shape == small_spec.volume_extents
    assert volume.voxels.dtype == np.float32
    assert volume.voxels.min() >= -1000.0 and volume.voxels.max() <= 400.0
    assert volume.spacing_mm == (1.25, 0.7, 0.7)
    d, h, w = volume.shape
    for a in nodules:
        assert 0 <= a.z <= d - 1 and 0 <= a.y <= h - 1 and 0 <= a.x <= w - 1


def test_slice_spacing_drawn_from_range():
    spec = SynthSpec(n_volumes=3, spacing_z_range=(1.0, 2.0), nodules_per_volume=(0, 0), seed=1)
    spacings = {synth_volume(spec, i)[0].spacing_mm[0] for i in range(3)}
    assert all(1.0 <= s <= 2.0 for s in spacings)
    assert len(spacings) == 3


def _inner_mean(volume, a):
    zz, yy, xx = np.indices(volume.shape, dtype=np.float64)
    sz, sy, sx = volume.spacing_mm
    dist = np.sqrt(((zz - a.z) * sz) ** 2 + ((yy - a.y) * sy) ** 2 + ((xx - a.x) * sx) ** 2)
    return float(volume.voxels[dist <= a.diameter_mm / 4].mean())


def test_rendered_intensity_follows_category():
    means = {}
    for category in ("calc_large", "solid_large", "pggn", "mggn"):
        spec = SynthSpec(n_volumes=1, nodules_per_volume=(1, 1), category_weights={category: 1.0},
                         noise_sigma=0.0, seed=11)
        volume, (nodule,) = synth_volume(spec, 0)
        means[category] = _inner_mean(volume, nodule)
    assert means["calc_large"] > means["solid_large"] > means["pggn"] > PARENCHYMA_HU
    assert means["mggn"] > means["pggn"]


@pytest.mark.slow
def test_category_frequencies_follow_weights():
    weights = {"calc_small": 1.0, "solid_small": 2.0, "pggn": 1.0}
    spec = SynthSpec(n_volumes=100, nodules_per_volume=(8, 8), category_weights=weights,
                     diameter_mm={"pggn": (5.0, 6.0)}, seed=2)
    counts = Counter(a.category for i in range(100) for a in synth_volume(spec, i)[1])
    total = sum(counts.values())
    for category, weight in weights.items():
        assert counts[category] / total == pytest.approx(weight / 4.0, abs=0.05)


def test_impossible_placement_raises():
    spec = SynthSpec(n_volumes=1, volume_extents=(8, 16, 16), nodules_per_volume=(6, 6),
                     category_weights={"solid_large": 1.0}, diameter_mm={"solid_large": (9.0, 10.0)},
                     max_attempts=5)
    with pytest.raises(GenerationError):
        synth_volume(spec, 0)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SynthSpec(category_weights={"granuloma": 1.0})
    with pytest.raises(ConfigurationError):
        SynthSpec(category_weights={"pggn": 0.0})
    with pytest.raises(ConfigurationError):
        SynthSpec(spacing_z_range=(0.5, 1.0))
    with pytest.raises(ConfigurationError):
        SynthSpec(nodules_per_volume=(3, 1))


def test_size_bins():
    assert [size_bin(d) for d in (3.0, 5.9, 6.0, 9.9, 10.0, 30.0, 31.0)] == \
        ["3-6", "3-6", "6-10", "6-10", "10-30", "10-30", "mass"]
    assert NoduleAnnotation(1, 2, 3, 7.5, "pggn").size_bin == "6-10"


def test_annotation_validation():
    with pytest.raises(DataError):
        NoduleAnnotation(0, 0, 0, 5.0, "granuloma")
    with pytest.raises(DataError):
        NoduleAnnotation(0, 0, 0, 0.0, "pggn")


def test_volume_validation():
    with pytest.raises(DataError):
        Volume(np.zeros((2, 2, 2)), spacing_mm=(3.0, 0.7, 0.7))
    with pytest.raises(DataError):
        Volume(np.zeros((2, 2)))


def test_volume_file_round_trip(tmp_path, small_spec):
    volume, _ = synth_volume(small_spec, 0)
    path = save_volume(volume, str(tmp_path))
    assert path.endswith(".json")
    loaded = load_volume(path)
    np.testing.assert_array_equal(loaded.voxels, volume.voxels)
    assert loaded.spacing_mm == volume.spacing_mm
    assert loaded.scan_id == volume.scan_id
    assert load_volume(path[:-len(".json")]).scan_id == volume.scan_id


def _write_raw(tmp_path, name, shape, n_scalars, dtype="f32le"):
    stem = os.path.join(tmp_path, name)
    with open(stem + ".json", "w") as f:
        json.dump({"shape": shape, "spacing_mm": [1.25, 0.7, 0.7], "dtype": dtype}, f)
    with open(stem + ".raw", "wb") as f:
        f.write(np.zeros(n_scalars, dtype="<f4").tobytes())
    return stem


def test_payload_length_is_checked(tmp_path):
    assert load_volume(_write_raw(tmp_path, "ok", [4, 8, 8], 256)).shape == (4, 8, 8)
    with pytest.raises(PayloadLengthError) as info:
        load_volume(_write_raw(tmp_path, "short", [4, 8, 8], 255))
    assert (info.value.expected, info.value.actual) == (256, 255)


def test_truncated_file_is_a_length_error(tmp_path, small_spec):
    volume, _ = synth_volume(small_spec, 0)
    stem = save_volume(volume, str(tmp_path))[:-len(".json")]
    with open(stem + ".raw", "r+b") as f:
        f.truncate(100)
    with pytest.raises(PayloadLengthError):
        load_volume(stem)


def test_malformed_headers(tmp_path):
    with pytest.raises(VolumeFormatError) as info:
        load_volume(_write_raw(tmp_path, "bad_shape", [4, 8], 32))
    assert info.value.field == "shape"
    with pytest.raises(VolumeFormatError) as info:
        load_volume(_write_raw(tmp_path, "bad_dtype", [1, 1, 1], 1, dtype="i16le"))
    assert info.value.field == "dtype"
    with pytest.raises(DataError):
        load_volume(os.path.join(tmp_path, "absent"))


def test_annotation_csv(tmp_path):
    nodules = [NoduleAnnotation(1.5, 2.0, 3.0, 4.5, "mggn", "s1"), NoduleAnnotation(7, 8, 9, 12.0, "calc_large", "s2")]
    path = os.path.join(tmp_path, "ann.csv")
    write_annotations(path, nodules)
    assert read_annotations(path) == nodules
    with open(path, "w") as f:
        f.write("scan_id,x,y\n")
    with pytest.raises(DataError):
        read_annotations(path)


def test_dataset_directory(tmp_path, small_spec):
    out = str(tmp_path / "data")
    scan_ids = write_dataset(small_spec, out)
    assert scan_ids == [small_spec.scan_id(i) for i in range(small_spec.n_volumes)]
    dataset = load_dataset(out)
    assert dataset.scan_ids == scan_ids
    expected = [a for i in range(small_spec.n_volumes) for a in synth_volume(small_spec, i)[1]]
    assert dataset.all_annotations() == expected
    part = dataset.subset(scan_ids[1:])
    assert part.scan_ids == scan_ids[1:]
    with pytest.raises(DataError):
        load_dataset(str(tmp_path / "nowhere"))


def test_categories_cover_eight_kinds():
    assert len(CATEGORIES) == 8


def test_ground_glass_sits_between_parenchyma_and_solid():
    assert CATEGORY_HU["calc"] > CATEGORY_HU["solid"] > CATEGORY_HU["pggn"] > PARENCHYMA_HU
    assert MGGN_CORE_HU > MGGN_HALO_HU > PARENCHYMA_HU
