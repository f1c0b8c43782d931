import json
import os

import numpy as np
import pytest

from conftest import tiny_network
from ga_ssd import ops
from ga_ssd.config import to_dict
from ga_ssd.errors import ConfigurationError, DimensionError, ManifestError
from ga_ssd.model import CLASS_NAMES, GASSD, level_extents, prior_bias
from ga_ssd.params import MANIFEST
from ga_ssd.tensor import Tensor, no_grad


def test_class_names_put_background_first():
    assert CLASS_NAMES[0] == "background"
    assert len(CLASS_NAMES) == 9


def test_level_extents():
    assert level_extents((32, 64, 64), "P1") == (16, 32, 32)
    assert level_extents((4, 32, 32), "P3") == (1, 4, 4)
    assert level_extents((1, 64, 64), "P4") == (1, 4, 4)


def test_forward_shapes_match_anchors(network_cfg, rng):
    model = GASSD(network_cfg, seed=0)
    x = Tensor(rng.uniform(size=(2, 1, 4, 32, 32)))
    preds = model.forward(x, mode="train", seed=1)
    k = len(model.anchors())
    assert preds.cls_logits.shape == (2, k, 9)
    assert preds.reg.shape == (2, k, 4)
    assert preds.level_extents == {"P2": (1, 8, 8), "P3": (1, 4, 4)}
    assert k == (64 + 16) * 6


def test_adding_a_lower_level_adds_anchors():
    counts = []
    for levels in (["P4"], ["P3", "P4"], ["P2", "P3", "P4"], ["P1", "P2", "P3", "P4"]):
        model = GASSD(tiny_network(active_levels=levels, ga_at_load=False, ga_at_fpn=False))
        counts.append(len(model.anchors()))
    assert counts == sorted(counts)
    assert len(set(counts)) == 4
    assert counts[3] - counts[2] > counts[2] - counts[1]


def test_two_and_a_half_d_input(rng):
    cfg = tiny_network(input_mode="multi_channel_2_5d", n_slices=3)
    model = GASSD(cfg)
    assert model.input_extents == (1, 32, 32)
    preds = model.forward(Tensor(rng.uniform(size=(1, 3, 1, 32, 32))), mode="eval")
    assert preds.cls_logits.shape[1] == len(model.anchors())
    with pytest.raises(DimensionError):
        model.forward(Tensor(rng.uniform(size=(1, 1, 4, 32, 32))))


def test_plain_ssd_variant_runs(rng):
    model = GASSD(tiny_network(use_fpn=False, ga_at_load=False, ga_at_fpn=False))
    assert not any(name.startswith("load.ga") or ".ga." in name for name in model.params.tensors)
    preds = model.forward(Tensor(rng.uniform(size=(1, 1, 4, 32, 32))), mode="eval")
    assert np.all(np.isfinite(preds.cls_logits.data))


def test_num_classes_must_cover_categories():
    with pytest.raises(ConfigurationError):
        GASSD(tiny_network(num_classes=3))


def test_same_seed_same_weights():
    a, b = GASSD(tiny_network(), seed=4), GASSD(tiny_network(), seed=4)
    for name, t in a.params.tensors.items():
        np.testing.assert_array_equal(t.data, b.params.tensors[name].data)


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = tiny_network()
    model = GASSD(cfg, seed=2)
    x = Tensor(rng.uniform(size=(1, 1, 4, 32, 32)))
    model.forward(x, mode="train")  # moves the running statistics off their defaults
    model.save(str(tmp_path), epoch=3)
    with open(os.path.join(tmp_path, MANIFEST)) as f:
        manifest = json.load(f)
    assert manifest["epoch"] == 3
    assert manifest["network"] == to_dict(cfg)

    loaded = GASSD.load(str(tmp_path), expect=cfg)
    with no_grad():
        before = model.forward(x, mode="eval")
        after = loaded.forward(x, mode="eval")
    np.testing.assert_array_equal(before.cls_logits.data, after.cls_logits.data)
    np.testing.assert_array_equal(before.reg.data, after.reg.data)


def test_checkpoint_mismatch_is_reported(tmp_path):
    GASSD(tiny_network(), seed=0).save(str(tmp_path))
    with pytest.raises(ManifestError):
        GASSD.load(str(tmp_path), expect=tiny_network(active_levels=["P3"]))
    with pytest.raises(ManifestError):
        GASSD.load(str(tmp_path / "missing"))


def test_float32_model(rng):
    model = GASSD(tiny_network(), dtype=np.float32)
    preds = model.forward(Tensor(rng.uniform(size=(1, 1, 4, 32, 32)).astype(np.float32)), mode="eval")
    assert preds.cls_logits.dtype == np.float32


def test_heads_start_small_with_a_background_prior(rng):
    model = GASSD(tiny_network(), seed=0)
    head = model.cfg.head
    a = head.anchors_per_cell("P2")
    cls = model.heads["P2"].cls
    bias = cls.bias.data.reshape(a, len(CLASS_NAMES))
    np.testing.assert_allclose(bias[:, 0], 0.0)
    np.testing.assert_allclose(bias[:, 1:], np.log(head.prior_prob / (1.0 - head.prior_prob)))
    np.testing.assert_array_equal(prior_bias(3, 2, 0.5), np.zeros(6))
    assert cls.weight.data.std() == pytest.approx(head.init_std, rel=0.1)
    assert model.heads["P2"].reg.weight.data.std() == pytest.approx(head.init_std, rel=0.1)
    np.testing.assert_array_equal(model.heads["P2"].reg.bias.data, 0.0)

    preds = model.forward(Tensor(rng.uniform(size=(2, 1, 4, 32, 32))), mode="train", seed=1)
    background = np.exp(ops.log_softmax_np(preds.cls_logits.data, axis=-1))[..., 0]
    assert background.mean() > 0.7
