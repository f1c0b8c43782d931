import numpy as np
import pytest

from ga_ssd.errors import DataError
from ga_ssd.inputs import (
    PAD_VALUE,
    AugmentDraw,
    apply_augmentation,
    augment,
    crop_padded,
    denormalize,
    draw_augmentation,
    make_input_25d,
    make_input_3d,
    normalize,
)
from ga_ssd.phantom import NoduleAnnotation, Volume
from ga_ssd.tensor import Tensor


@pytest.fixture
def volume(rng):
    return Volume(voxels=rng.uniform(-1000, 400, size=(5, 8, 8)), scan_id="v")


def test_window_arithmetic():
    np.testing.assert_allclose(normalize([-1000.0, 400.0, -300.0]), [0.0, 1.0, 0.5])
    np.testing.assert_allclose(normalize([-2000.0, 1000.0]), [0.0, 1.0])
    assert PAD_VALUE == pytest.approx(1000 / 1400)
    values = np.linspace(-1000, 400, 15)
    np.testing.assert_allclose(denormalize(normalize(values)), values)


def test_single_slice_input(volume):
    x = make_input_25d(volume, 2, 1)
    assert x.shape == (1, 1, 1, 8, 8)
    np.testing.assert_allclose(x.data[0, 0, 0], normalize(volume.voxels[2]))


def test_edge_slice_is_replicated(volume):
    x = make_input_25d(volume, 0, 3).data[0, :, 0]
    np.testing.assert_array_equal(x[0], x[1])
    np.testing.assert_allclose(x[2], normalize(volume.voxels[1]))


def test_25d_rejects_bad_arguments(volume):
    with pytest.raises(DataError):
        make_input_25d(volume, 0, 4)
    with pytest.raises(DataError):
        make_input_25d(volume, 5, 3)


def test_full_crop_is_whole_volume(volume):
    x = make_input_3d(volume, (0, 0, 0), volume.shape)
    assert x.shape == (1, 1, 5, 8, 8)
    np.testing.assert_allclose(x.data[0, 0], normalize(volume.voxels))


def test_out_of_bounds_crop_is_padded(volume):
    x = make_input_3d(volume, (-1, 4, 4), (3, 8, 8)).data[0, 0]
    np.testing.assert_allclose(x[0], PAD_VALUE)
    np.testing.assert_allclose(x[1:, 4:, 4:], PAD_VALUE)
    np.testing.assert_allclose(x[1:, :4, :4], normalize(volume.voxels[:2, 4:, 4:]))
    with pytest.raises(DataError):
        make_input_3d(volume, (-1, 0, 0), (3, 8, 8), pad=False)
    with pytest.raises(DataError):
        make_input_3d(volume, (0, 0, 0), (0, 8, 8))


def test_25d_and_3d_agree_on_the_same_window(volume):
    flat = make_input_25d(volume, 2, 5, origin_yx=(2, 1), extents_yx=(4, 6)).data[0, :, 0]
    cube = make_input_3d(volume, (0, 2, 1), (5, 4, 6)).data[0, 0]
    np.testing.assert_array_equal(flat, cube)


def test_crop_outside_everything_is_fill():
    out = crop_padded(np.ones((2, 2)), (5, 5), (2, 3), fill=-7.0)
    np.testing.assert_array_equal(out, np.full((2, 3), -7.0))


def _nodule(x, y):
    return NoduleAnnotation(x=x, y=y, z=1.0, diameter_mm=5.0, category="solid_small")


def test_identity_draw_changes_nothing(rng):
    data = rng.normal(size=(2, 4, 64))
    out, moved = apply_augmentation(data, [_nodule(10, 2)], AugmentDraw())
    np.testing.assert_array_equal(out, data)
    assert moved == [_nodule(10, 2)]


def test_x_flip_arithmetic(rng):
    data = rng.normal(size=(1, 4, 64))
    flipped, moved = apply_augmentation(data, [_nodule(10, 2)], AugmentDraw(flip_x=True))
    assert moved[0].x == 53
    np.testing.assert_array_equal(flipped[..., 53], data[..., 10])
    back, restored = apply_augmentation(flipped, moved, AugmentDraw(flip_x=True))
    np.testing.assert_array_equal(back, data)
    assert restored == [_nodule(10, 2)]


def test_shift_moves_data_and_nodules(rng):
    data = rng.normal(size=(1, 8, 8))
    out, moved = apply_augmentation(data, [_nodule(3, 4)], AugmentDraw(shift_x=2, shift_y=-1))
    assert (moved[0].x, moved[0].y) == (5, 3)
    np.testing.assert_array_equal(out[0, 3, 5], data[0, 4, 3])
    np.testing.assert_allclose(out[..., :2], PAD_VALUE)
    np.testing.assert_allclose(out[:, -1, :], PAD_VALUE)


def test_augment_is_seeded(rng):
    data = Tensor(rng.normal(size=(1, 1, 2, 16, 16)))
    a, na = augment(data, [_nodule(4, 5)], rng_seed=3)
    b, nb = augment(data, [_nodule(4, 5)], rng_seed=3)
    assert isinstance(a, Tensor)
    np.testing.assert_array_equal(a.data, b.data)
    assert na == nb
    draw = draw_augmentation(3)
    assert abs(draw.shift_x) <= 4 and abs(draw.shift_y) <= 4
