import logging

import numpy as np
import pytest

from ga_ssd import ops
from ga_ssd.attention import (
    DEFAULT_GROUPS,
    GAConfig,
    attention_embed,
    build_ga_params,
    effective_groups,
    ga_forward,
    group_stage,
    nonlocal_attention,
)
from ga_ssd.errors import ConfigurationError, DimensionError
from ga_ssd.gradcheck import check_gradients
from ga_ssd.params import ParameterSet
from ga_ssd.tensor import Tensor


def naive_attention(theta, phi, g):
    q = theta.reshape(theta.shape[1], -1)
    k = phi.reshape(phi.shape[1], -1)
    v = g.reshape(g.shape[1], -1)
    out = np.zeros_like(q)
    for i in range(q.shape[1]):
        f = np.array([np.exp(q[:, i] @ k[:, j]) for j in range(k.shape[1])])
        out[:, i] = (f[None, :] * v).sum(axis=1) / f.sum()
    return out.reshape(theta.shape)


def test_effective_groups_clamps_to_divisor(caplog):
    with caplog.at_level(logging.WARNING):
        assert effective_groups(4, 3) == 2
    assert "using 2" in caplog.text
    assert effective_groups(9, 9) == 9
    assert effective_groups(2, 9) == 2
    with pytest.raises(ConfigurationError):
        effective_groups(0, 2)


def test_default_group_clamps_are_quiet(caplog):
    with caplog.at_level(logging.WARNING, logger="ga_ssd.attention"):
        assert effective_groups(32, DEFAULT_GROUPS) == 8
        assert effective_groups(1, 4) == 1
    assert not caplog.records
    with caplog.at_level(logging.DEBUG, logger="ga_ssd.attention"):
        effective_groups(32, DEFAULT_GROUPS, where="fpn.P2.ga")
    assert "fpn.P2.ga: 32 channels not divisible by 9 groups, using 8" in caplog.text


def test_single_group_is_plain_conv(rng):
    ps = ParameterSet(seed=1)
    params = build_ga_params(ps, "ga", 4, GAConfig(groups=1))
    x = Tensor(rng.normal(size=(1, 4, 2, 3, 3)))
    out = group_stage(x, GAConfig(groups=1), params)
    np.testing.assert_array_equal(out.data, ops.conv3d_raw(x, params.group.weight, params.group.bias).data)


def test_depthwise_identity_groups(rng):
    ps = ParameterSet(seed=1)
    cfg = GAConfig(groups=3)
    params = build_ga_params(ps, "ga", 3, cfg)
    params.group.weight.data[...] = 0.0
    params.group.weight.data[:, 0, 1, 1, 1] = 1.0
    x = Tensor(rng.normal(size=(1, 3, 2, 3, 3)))
    np.testing.assert_array_equal(group_stage(x, cfg, params).data, x.data)


def test_group_stage_block_diagonal(rng):
    ps = ParameterSet(seed=2)
    cfg = GAConfig(groups=3)
    params = build_ga_params(ps, "ga", 6, cfg)
    w = params.group.weight.data
    full = np.zeros((6, 6, 3, 3, 3))
    for g in range(3):
        full[2 * g:2 * g + 2, 2 * g:2 * g + 2] = w[2 * g:2 * g + 2]
    x = Tensor(rng.normal(size=(1, 6, 2, 4, 4)))
    dense = ops.conv3d_raw(x, Tensor(full), params.group.bias)
    np.testing.assert_allclose(group_stage(x, cfg, params).data, dense.data, atol=1e-10)


def test_group_stage_checks_channels(rng):
    params = build_ga_params(ParameterSet(), "ga", 4, GAConfig(groups=2))
    with pytest.raises(DimensionError):
        group_stage(Tensor(rng.normal(size=(1, 6, 1, 2, 2))), GAConfig(groups=2), params)


def test_embeddings_identity_and_subsample(rng):
    ps = ParameterSet()
    cfg = GAConfig(groups=1, embed_channels=2, spatial_subsample=1)
    params = build_ga_params(ps, "ga", 2, cfg)
    eye = np.eye(2).reshape(2, 2, 1, 1, 1)
    for w in (params.theta_w, params.phi_w, params.g_w):
        w.data[...] = eye
    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
    for t in attention_embed(x, params):
        np.testing.assert_array_equal(t.data, x.data)

    params.subsample = 2
    theta, phi, g_feat = attention_embed(x, params)
    assert theta.shape == (1, 2, 4, 4, 4)
    assert phi.shape[2:] == (2, 2, 2)
    assert np.prod(g_feat.shape[2:]) == 8


def test_embeddings_match_conv1x1(rng):
    params = build_ga_params(ParameterSet(seed=4), "ga", 4, GAConfig(groups=2))
    x = Tensor(rng.normal(size=(1, 4, 2, 2, 2)))
    theta, phi, g_feat = attention_embed(x, params)
    np.testing.assert_allclose(theta.data, ops.conv1x1(x, params.theta_w, params.theta_b).data)
    np.testing.assert_allclose(phi.data, ops.conv1x1(x, params.phi_w, params.phi_b).data)
    np.testing.assert_allclose(g_feat.data, ops.conv1x1(x, params.g_w, params.g_b).data)


def test_uniform_attention_averages_values(rng):
    theta = Tensor(np.zeros((1, 2, 1, 3, 3)))
    g_feat = Tensor(rng.normal(size=(1, 2, 1, 3, 3)))
    y, weights = nonlocal_attention(theta, theta, g_feat, return_weights=True)
    np.testing.assert_allclose(weights.matrix, 1.0 / 9)
    mean = g_feat.data.reshape(2, -1).mean(axis=1)
    np.testing.assert_allclose(y.data.reshape(2, -1), np.repeat(mean[:, None], 9, axis=1))


def test_single_position_returns_values(rng):
    theta, phi, g_feat = (Tensor(rng.normal(size=(1, 3, 1, 1, 1))) for _ in range(3))
    y, weights = nonlocal_attention(theta, phi, g_feat, return_weights=True)
    np.testing.assert_allclose(weights.matrix, 1.0)
    np.testing.assert_allclose(y.data, g_feat.data)


def test_attention_matches_pairwise_reference(rng):
    theta, phi, g_feat = (rng.normal(size=(1, 2, 1, 3, 3)) for _ in range(3))
    y, weights = nonlocal_attention(Tensor(theta), Tensor(phi), Tensor(g_feat), return_weights=True)
    np.testing.assert_allclose(y.data, naive_attention(theta, phi, g_feat), atol=1e-10)
    np.testing.assert_allclose(weights.row_sums(), 1.0, atol=1e-12)


def test_chunking_does_not_change_the_result(rng):
    theta, phi, g_feat = (Tensor(rng.normal(size=(2, 3, 2, 3, 3))) for _ in range(3))
    whole, _ = nonlocal_attention(theta, phi, g_feat, chunk_size=4096)
    chunked, _ = nonlocal_attention(theta, phi, g_feat, chunk_size=5)
    np.testing.assert_allclose(chunked.data, whole.data, atol=1e-12)


def test_attention_rejects_mismatched_embeddings(rng):
    a = Tensor(rng.normal(size=(1, 2, 1, 2, 2)))
    b = Tensor(rng.normal(size=(1, 3, 1, 2, 2)))
    with pytest.raises(DimensionError):
        nonlocal_attention(a, b, b)


def test_ga_forward_is_identity_at_initialisation(rng):
    cfg = GAConfig(groups=2)
    params = build_ga_params(ParameterSet(seed=3), "ga", 4, cfg)
    x = Tensor(rng.normal(size=(1, 4, 2, 4, 4)))
    np.testing.assert_array_equal(ga_forward(x, cfg, params).data, x.data)


def test_ga_forward_uniform_case_gives_spatial_mean(rng):
    cfg = GAConfig(groups=1, embed_channels=2, residual=False)
    params = build_ga_params(ParameterSet(), "ga", 2, cfg)
    eye = np.eye(2).reshape(2, 2, 1, 1, 1)
    params.theta_w.data[...] = 0.0
    params.phi_w.data[...] = 0.0
    params.g_w.data[...] = eye
    params.out_w.data[...] = eye
    x = Tensor(rng.normal(size=(1, 2, 2, 3, 3)))
    grouped = group_stage(x, cfg, params).data
    out = ga_forward(x, cfg, params).data
    expected = grouped.reshape(2, -1).mean(axis=1)
    np.testing.assert_allclose(out.reshape(2, -1), np.repeat(expected[:, None], 18, axis=1), atol=1e-12)


def test_ga_forward_shape_and_gradient(rng):
    cfg = GAConfig(groups=2)
    params = build_ga_params(ParameterSet(seed=9), "ga", 4, cfg)
    params.out_w.data[...] = rng.normal(scale=0.5, size=params.out_w.shape)
    x = Tensor(rng.normal(size=(1, 4, 2, 3, 3)), requires_grad=True)
    weights = Tensor(rng.normal(size=x.shape))
    out, attn = ga_forward(x, cfg, params, return_weights=True)
    assert out.shape == x.shape
    np.testing.assert_allclose(attn.row_sums(), 1.0, atol=1e-12)
    err = check_gradients(lambda: ops.sum(ops.mul(ga_forward(x, cfg, params), weights)),
                          [x, params.theta_w, params.g_w], rng)
    assert err <= 1e-4


@pytest.mark.parametrize("field,value", [("groups", 0), ("embed_channels", 0), ("spatial_subsample", 0), ("chunk_size", 0)])
def test_ga_config_validation(field, value):
    with pytest.raises(ConfigurationError):
        GAConfig(**{field: value})


@pytest.mark.parametrize("seed", range(20))
def test_ga_forward_preserves_random_shapes(seed):
    rng = np.random.default_rng(seed)
    channels = int(rng.integers(1, 9))
    cfg = GAConfig(
        groups=int(rng.integers(1, 5)),
        spatial_subsample=int(rng.integers(1, 3)),
        residual=bool(rng.integers(2)),
    )
    params = build_ga_params(ParameterSet(seed=seed), "ga", channels, cfg)
    params.out_w.data[...] = rng.normal(size=params.out_w.shape)
    shape = (int(rng.integers(1, 3)), channels, int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    x = Tensor(rng.normal(size=shape))
    out = ga_forward(x, cfg, params)
    assert out.shape == shape
    assert np.all(np.isfinite(out.data))


def _permute_positions(a, order):
    flat = a.reshape(a.shape[0], a.shape[1], -1)
    return flat[:, :, order].reshape(a.shape)


def test_permuting_positions_permutes_the_output(rng):
    theta, phi, g_feat = (rng.normal(size=(2, 3, 2, 3, 4)) for _ in range(3))
    order = rng.permutation(24)
    y, _ = nonlocal_attention(Tensor(theta), Tensor(phi), Tensor(g_feat))
    permuted, _ = nonlocal_attention(*(Tensor(_permute_positions(a, order)) for a in (theta, phi, g_feat)))
    np.testing.assert_allclose(permuted.data, _permute_positions(y.data, order), atol=1e-12)
    # reordering only the keys leaves every query's output unchanged
    keys_only, _ = nonlocal_attention(
        Tensor(theta), Tensor(_permute_positions(phi, order)), Tensor(_permute_positions(g_feat, order))
    )
    np.testing.assert_allclose(keys_only.data, y.data, atol=1e-12)


@pytest.mark.parametrize("group", range(3))
def test_group_stage_is_local_to_each_group(group, rng):
    cfg = GAConfig(groups=3)
    params = build_ga_params(ParameterSet(seed=5), "ga", 6, cfg)
    x = rng.normal(size=(1, 6, 2, 4, 4))
    bumped = x.copy()
    bumped[:, 2 * group:2 * group + 2] += rng.normal(size=(1, 2, 2, 4, 4))
    before = group_stage(Tensor(x), cfg, params).data
    after = group_stage(Tensor(bumped), cfg, params).data
    inside = slice(2 * group, 2 * group + 2)
    assert np.abs(after[:, inside] - before[:, inside]).max() > 1e-3
    others = [c for c in range(6) if c not in (2 * group, 2 * group + 1)]
    np.testing.assert_allclose(after[:, others], before[:, others], atol=1e-12)


def test_large_scores_stay_finite(rng):
    theta, phi = (Tensor(1e3 * rng.normal(size=(1, 4, 1, 3, 3))) for _ in range(2))
    g_feat = Tensor(rng.normal(size=(1, 4, 1, 3, 3)))
    with np.errstate(over="raise", invalid="raise"):
        y, weights = nonlocal_attention(theta, phi, g_feat, return_weights=True)
    assert np.all(np.isfinite(y.data))
    np.testing.assert_allclose(weights.row_sums(), 1.0, atol=1e-12)
