import json
import math

import numpy as np
import pytest

from hybriddp.data import Example, FeatureSchema, FieldSpec
from hybriddp.errors import ConfigurationError, NumericError, ShapeError
from hybriddp.model import (RECIPES, ModelConfig, ModelParams, bce_dlogit, bce_loss, backward_batch,
                            clipped_grad_sum, embed_dim, forward_batch, forward_full,
                            forward_truncated, grad_norms, init_params, layout_for,
                            load_checkpoint, per_example_grad, predict, save_checkpoint,
                            weighted_grad_sum)

from conftest import random_dataset, tiny_config, tiny_schema
from oracles import bce_oracle, finite_difference_grad, forward_oracle


@pytest.mark.parametrize("v,d", [(1, 2), (16, 4), (10000, 20), (81, 6), (100, 6), (2, 2)])
def test_embed_dim(v, d):
    assert embed_dim(v) == d


def test_recipe_sizes():
    cfg = ModelConfig.from_recipe(tiny_schema(), "criteo_attribution", scale=0.25)
    assert cfg.embedding_dims == (8, 8, 8)
    assert cfg.common_hidden == (32, 16)
    assert RECIPES["criteo_pctr"]["common_hidden"] == (598,) * 4


def test_layout_partitions_cover_parameters():
    cfg = tiny_config()
    lay = layout_for(cfg)
    assert lay.size <= 500
    parts = np.concatenate([lay.partition_indices(p) for p in ("ns", "s", "c")])
    assert sorted(parts.tolist()) == list(range(lay.size))
    trunc = set(lay.scope_indices("truncated").tolist())
    assert trunc.isdisjoint(lay.partition_indices("s").tolist())
    assert len(trunc) + len(lay.partition_indices("s")) == lay.size


def test_init_is_deterministic_with_zero_biases():
    a, b = init_params(tiny_config(seed=4)), init_params(tiny_config(seed=4))
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, init_params(tiny_config(seed=5)).values)
    for blk in a.layout.blocks:
        if ".b" in blk.name:
            assert np.all(a[blk.name] == 0)


def test_init_weight_std_follows_fan_in():
    cfg = ModelConfig((10,), (False,), num_sensitive=(False,) * 90, embedding_dims=10,
                      ns_hidden=(200,), common_hidden=())
    w = init_params(cfg)["ns.W0"]
    assert w.shape == (100, 200)
    assert w.std() == pytest.approx(1 / math.sqrt(100), rel=0.2)


def test_params_are_read_only(params):
    with pytest.raises(ValueError):
        params.values[0] = 1.0


def test_only_final_bias_gives_that_logit():
    cfg = tiny_config()
    lay = layout_for(cfg)
    v = np.zeros(lay.size)
    last = [b.name for b in lay.blocks][-1]
    v[lay.slice(last)] = 0.37
    p = ModelParams(cfg, v)
    ds = random_dataset(tiny_schema(), 5)
    logits, _ = forward_batch(p, ds.nonsensitive_features(), ds.sensitive_features())
    np.testing.assert_array_equal(logits, 0.37)


def test_identical_examples_identical_logits(params):
    ds = random_dataset(tiny_schema(), 1)
    idx = np.zeros(4, dtype=int)
    logits, _ = forward_batch(params, ds.nonsensitive_features().take(idx),
                              ds.sensitive_features().take(idx))
    assert len(set(logits.tolist())) == 1


def test_forward_matches_matrix_oracle(params):
    ds = random_dataset(tiny_schema(), 30, seed=1)
    full = predict(params, ds.nonsensitive_features(), ds.sensitive_features())
    trunc = predict(params, ds.nonsensitive_features(), None, truncated=True)
    for i in range(len(ds)):
        ex = ds[i]
        assert full[i] == pytest.approx(forward_oracle(params, ex), rel=1e-12, abs=1e-15)
        assert trunc[i] == pytest.approx(forward_oracle(params, ex, truncated=True), rel=1e-12, abs=1e-15)
        # one-row and many-row BLAS calls may round differently in the last bit
        assert forward_full(params, ex) == pytest.approx(full[i], rel=1e-13, abs=1e-15)
        assert forward_truncated(params, ex) == pytest.approx(trunc[i], rel=1e-13, abs=1e-15)


def test_no_sensitive_inputs_truncated_equals_full():
    schema = FeatureSchema((FieldSpec("a", vocab_size=5, encoding="index"), FieldSpec("x", "float")))
    cfg = ModelConfig.from_schema(schema, embedding_dims=3, common_hidden=(4,), seed=2)
    assert cfg.d_s == 0
    p = init_params(cfg)
    for ex in [Example(None, (1,), (0.5,), 0), Example(None, (4,), (-2.0,), 1)]:
        assert forward_truncated(p, ex) == forward_full(p, ex)


def test_zeroed_sensitive_columns_make_truncation_exact(params):
    cfg = params.config
    v = params.values.copy()
    w = v[params.layout.slice("c.W0")].reshape(params["c.W0"].shape)
    w[cfg.d_ns:, :] = 0.0
    v[params.layout.slice("c.W0")] = w.ravel()
    p = ModelParams(cfg, v)
    ds = random_dataset(tiny_schema(), 20, seed=3)
    for i in range(len(ds)):
        assert forward_truncated(p, ds[i]) == forward_full(p, ds[i])


def test_non_finite_activation_names_layer(params):
    v = params.values.copy()
    v[params.layout.slice("c.W0")] = np.inf
    p = ModelParams(params.config, v)
    ds = random_dataset(tiny_schema(), 2)
    with pytest.raises(NumericError) as info:
        forward_batch(p, ds.nonsensitive_features(), ds.sensitive_features())
    assert info.value.layer == 2


def test_shape_errors(params):
    with pytest.raises(ShapeError):
        forward_full(params, Example(None, (1, 2), (0.0, 0.0), 0))
    with pytest.raises(ShapeError):
        ModelParams(params.config, np.zeros(3))


# --------------------------------------------------------------------------
# loss

def test_bce_points():
    assert bce_loss(0.0, 0.5) == pytest.approx(math.log(2), rel=1e-15)
    assert bce_loss(800.0, 1.0) == 0.0
    assert bce_loss(50.0, 0.0) == pytest.approx(50.0, rel=1e-15)
    assert math.isfinite(bce_loss(1e4, 0.0))
    for z in [-3.0, -0.2, 0.0, 1.7, 6.0]:
        for y in [0.0, 1.0, 0.3]:
            assert bce_loss(z, y) == pytest.approx(bce_oracle(z, y), rel=1e-12)


def test_bce_dlogit_is_derivative():
    for z in [-4.0, -0.5, 0.3, 2.5]:
        for y in [0.0, 1.0, 0.25]:
            h = 1e-6
            fd = (bce_loss(z + h, y) - bce_loss(z - h, y)) / (2 * h)
            assert bce_dlogit(z, y) == pytest.approx(fd, rel=1e-6)


# --------------------------------------------------------------------------
# gradients

def _loss_fn(params, ex, target, scope):
    idx = params.layout.scope_indices(scope)

    def loss(scoped):
        v = params.values.copy()
        v[idx] = scoped
        return bce_loss(forward_oracle(ModelParams(params.config, v), ex,
                                       truncated=scope == "truncated"), target)
    return loss, params.values[idx]


def max_relative_error(a, b, floor=1e-7):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.mark.parametrize("scope", ["full", "truncated"])
def test_gradient_matches_finite_differences(params, scope):
    ds = random_dataset(tiny_schema(), 3, seed=7)
    for i in range(3):
        ex = ds[i]
        g = per_example_grad(params, ex, float(ex.label), scope)
        loss, x0 = _loss_fn(params, ex, float(ex.label), scope)
        fd = finite_difference_grad(loss, x0, range(len(x0)))
        assert max_relative_error(g.values, fd) < 1e-4


def test_bias_gradient_vanishes_at_matching_target(params):
    ex = random_dataset(tiny_schema(), 1)[0]
    z = forward_full(params, ex)
    target = 1 / (1 + math.exp(-z))
    g = per_example_grad(params, ex, target, "full")
    last = params.layout.blocks[-1]
    assert g.values[last.offset] == pytest.approx(0.0, abs=1e-15)


def test_truncated_scope_omits_sensitive_coordinates(params):
    ex = random_dataset(tiny_schema(), 1)[0]
    full = per_example_grad(params, ex, 1.0, "full")
    trunc = per_example_grad(params, ex, 1.0, "truncated")
    lay = params.layout
    assert len(trunc.values) == lay.size - len(lay.partition_indices("s"))
    # the sensitive slots of the first common layer see zero input in the truncated model
    cfg = params.config
    w = lay.by_name["c.W0"]
    pos = {int(i): k for k, i in enumerate(lay.scope_indices("truncated"))}
    for r in range(cfg.d_ns, cfg.d_ns + cfg.d_s):
        for c in range(w.shape[1]):
            assert trunc.values[pos[w.offset + r * w.shape[1] + c]] == 0.0
    assert np.any(full.values[lay.partition_indices("s")] != 0)


def _batch(params, n=17, seed=0):
    ds = random_dataset(tiny_schema(), n, seed=seed)
    logits, cache = forward_batch(params, ds.nonsensitive_features(), ds.sensitive_features())
    return ds, logits, cache, bce_dlogit(logits, ds.labels)


def test_batched_gradients_match_single_example(params):
    ds, logits, cache, d = _batch(params)
    G = backward_batch(params, cache, d, "full")
    for i in range(len(ds)):
        np.testing.assert_allclose(G[i], per_example_grad(params, ds[i], float(ds.labels[i])).values,
                                   rtol=1e-12, atol=1e-15)


def test_fused_norms_and_sums_match_materialized(params):
    ds, logits, cache, d = _batch(params, n=40, seed=2)
    G = backward_batch(params, cache, d, "full")
    np.testing.assert_allclose(grad_norms(params, cache, d), np.linalg.norm(G, axis=1), rtol=1e-12)
    w = np.random.default_rng(0).uniform(size=40)
    np.testing.assert_allclose(weighted_grad_sum(params, cache, d, w, "full"), w @ G,
                               rtol=1e-10, atol=1e-14)
    C = float(np.median(np.linalg.norm(G, axis=1)))
    total, norms = clipped_grad_sum(params, cache, d, C, "full")
    factors = np.minimum(1.0, C / np.linalg.norm(G, axis=1))
    np.testing.assert_allclose(total, factors @ G, rtol=1e-10, atol=1e-14)


def test_truncated_batch_gradient_matches_full_restriction_with_zeroed_sensitive_path(params):
    ds = random_dataset(tiny_schema(), 9, seed=4)
    logits, cache = forward_batch(params, ds.nonsensitive_features(), None, truncated=True)
    G = backward_batch(params, cache, bce_dlogit(logits, ds.labels), "truncated")
    for i in range(9):
        np.testing.assert_allclose(G[i], per_example_grad(params, ds[i], float(ds.labels[i]),
                                                          "truncated").values, rtol=1e-12)


# --------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path, params):
    p = tmp_path / "ck.json"
    save_checkpoint(params, p, extra={"note": 1})
    back = load_checkpoint(p)
    np.testing.assert_array_equal(back.values, params.values)
    assert back.config == params.config
    assert json.loads(p.read_text())["extra"] == {"note": 1}


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig((5, 5), (False,))
    with pytest.raises(ConfigurationError):
        ModelConfig((5,), (True,))
    with pytest.raises(ConfigurationError):
        ModelConfig((5,), (False,), common_hidden=(0,))
