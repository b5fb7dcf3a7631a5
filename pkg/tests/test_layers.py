import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simoe import autodiff as ad
from simoe.autodiff import Tensor
from simoe.layers import (AttachmentError, AttachmentPolicy, GateInit, SIMoELinear, SIMoEVector, attach,
                          effective_gate, gated_layers, merged_weights, prune)
from simoe.model import LayerId, TinyTransformer, TinyTransformerConfig, init_params

LID = LayerId("test.layer", 0, "query")


def layer_with_masks(theta_pre, delta, log_phi):
    return SIMoELinear(theta_pre, log_phi.shape[0], LID, log_phi=log_phi, theta_delta=delta)


def random_layer(rng, Y=4, X=3, M=2):
    lp = rng.normal(0.0, 2.0, size=(M, X))
    return layer_with_masks(rng.normal(size=(Y, X)), rng.normal(size=(Y, X)), lp)


def simplex(rng, m):
    a = rng.random(m) + 1e-3
    return a / a.sum()


# log_phi far from the clamp edges gives medians that are exactly 0 or 1
ON, OFF = 5.0, -5.0


def test_effective_gate_examples(rng):
    layer = layer_with_masks(np.zeros((2, 2)), np.zeros((2, 2)), np.array([[ON, OFF], [OFF, ON]]))
    np.testing.assert_array_equal(layer.median_values(), [[1, 0], [0, 1]])
    np.testing.assert_array_equal(effective_gate([1.0, 0.0], layer).values, [1.0, 0.0])
    np.testing.assert_allclose(effective_gate([0.5, 0.5], layer).values, [0.5, 0.5])
    same = layer_with_masks(np.zeros((2, 3)), np.zeros((2, 3)), np.tile(rng.normal(size=3), (3, 1)))
    a = simplex(rng, 3)
    np.testing.assert_allclose(effective_gate(a, same).values, same.median_values()[0], atol=1e-15)


def test_effective_gate_contract_errors():
    layer = layer_with_masks(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        effective_gate([1.0, 0.0, 0.0], layer)
    with pytest.raises(ValueError):
        effective_gate([0.7, 0.7], layer)


def test_forward_examples(rng):
    pre = rng.normal(size=(4, 3))
    x = rng.normal(size=3)
    zero = layer_with_masks(pre, np.zeros((4, 3)), rng.normal(size=(2, 3)))
    for _ in range(5):
        np.testing.assert_allclose(zero(x, simplex(rng, 2)).values, pre @ x, atol=1e-15)
    delta = rng.normal(size=(4, 3))
    full = layer_with_masks(pre, delta, np.array([[ON] * 3, [OFF] * 3]))
    np.testing.assert_allclose(full(x, [1.0, 0.0]).values, (pre + delta) @ x, atol=1e-12)


def test_forward_shape_error():
    layer = layer_with_masks(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((2, 3)))
    with pytest.raises(ad.DimensionError):
        layer(np.ones(5), [0.5, 0.5])


def test_factored_equals_merged_weights_random():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        layer = random_layer(rng)
        a = simplex(rng, 2)
        x = rng.normal(size=3)
        y = layer(x, a).values
        W = merged_weights(layer, a)
        assert np.max(np.abs(y - W @ x)) < 1e-12


def test_merged_weights_endpoints(rng):
    pre, delta = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    np.testing.assert_array_equal(merged_weights(layer_with_masks(pre, np.zeros((4, 3)), rng.normal(size=(2, 3))),
                                                 [0.3, 0.7]), pre)
    full = layer_with_masks(pre, delta, np.array([[ON] * 3, [OFF] * 3]))
    np.testing.assert_allclose(merged_weights(full, [1.0, 0.0]), pre + delta)


def test_batched_per_instance_gates_match_individual(rng):
    layer = random_layer(rng, 5, 4, 3)
    x = rng.normal(size=(6, 7, 4))
    alphas = np.stack([simplex(rng, 3) for _ in range(6)])
    batched = layer(x, alphas[:, None, :]).values
    for b in range(6):
        single = layer(x[b], alphas[b]).values
        np.testing.assert_allclose(batched[b], single, atol=1e-13)
        np.testing.assert_allclose(batched[b], x[b] @ merged_weights(layer, alphas[b]).T, atol=1e-12)


def test_vector_layer_matches_merged(rng):
    lid = LayerId("n", 0, "norm")
    v = SIMoEVector(rng.normal(size=5), 2, lid, log_phi=rng.normal(0, 2, size=(2, 5)),
                    theta_delta=rng.normal(size=5))
    a = simplex(rng, 2)
    x = rng.normal(size=(3, 5))
    expected = ad.rmsnorm(x, merged_weights(v, a)).values
    np.testing.assert_allclose(v(x, a).values, expected, atol=1e-13)


def test_prune_examples(rng):
    pre = rng.normal(size=(3, 3))
    dead = layer_with_masks(pre, rng.normal(size=(3, 3)), np.full((2, 3), OFF))
    p = prune(dead)
    assert p.kept.size == 0 and p.theta_delta.shape == (3, 0)
    x = rng.normal(size=3)
    np.testing.assert_allclose(p(x, [0.5, 0.5]).values, pre @ x)
    two = layer_with_masks(pre, rng.normal(size=(3, 3)), np.array([[ON, OFF, OFF], [OFF, OFF, ON]]))
    assert prune(two).kept.tolist() == [0, 2]
    assert prune(two).binary_masks.tolist() == [[True, False], [False, True]]


def test_prune_equivalence_random():
    rng = np.random.default_rng(7)
    layer = random_layer(rng, 6, 8, 3)
    layer.log_phi.values[:, [1, 5]] = OFF
    p = prune(layer)
    assert 0 < p.kept.size < 8
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=8)
        a = simplex(rng, 3)
        worst = max(worst, np.max(np.abs(p(x, a).values - layer(x, a).values)))
    assert worst < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_algebraic_identity_property(seed):
    rng = np.random.default_rng(seed)
    Y, X, M = rng.integers(1, 6, size=3)
    layer = random_layer(rng, Y, X, M)
    a = simplex(rng, M)
    x = rng.normal(size=X)
    assert np.max(np.abs(layer(x, a).values - merged_weights(layer, a) @ x)) < 1e-12


# ---------------------------------------------------------------- attachment on the tiny decoder


@pytest.fixture(scope="module")
def seed_model():
    cfg = TinyTransformerConfig()
    return TinyTransformer.from_params(cfg, init_params(cfg, 3))


def test_attach_all_linear_counts(seed_model):
    up = attach(seed_model, AttachmentPolicy("all_linear"), 4)
    assert len(gated_layers(up)) == 20
    kinds = [l.layer_id.kind for l in gated_layers(up)]
    assert kinds.count("norm") == 5 and kinds.count("lm_head") == 1


def test_attach_ffn_only(seed_model):
    up = attach(seed_model, AttachmentPolicy("ffn_only"), 4)
    names = [l.layer_id.name for l in gated_layers(up)]
    assert len(names) == 6
    assert all(l.layer_id.kind in ("ffn_gate", "ffn_up", "ffn_down") for l in gated_layers(up))


def test_attach_explicit_and_unknown(seed_model):
    up = attach(seed_model, AttachmentPolicy(["blocks.0.query", "lm_head"]), 2)
    assert [l.layer_id.name for l in gated_layers(up)] == ["blocks.0.query", "lm_head"]
    with pytest.raises(AttachmentError):
        attach(seed_model, AttachmentPolicy(["blocks.9.query"]), 2)
    no_head = AttachmentPolicy("all_linear", include_lm_head=False)
    assert len(gated_layers(attach(seed_model, no_head, 2))) == 19


def test_attach_zero_init_identity(seed_model, rng):
    up = attach(seed_model, AttachmentPolicy("all_linear"), 4, GateInit(0.95, 0.01), rng)
    ids = rng.integers(0, 64, size=(5, 12))
    alphas = np.stack([simplex(rng, 4) for _ in range(5)])[:, None, :]
    diff = np.max(np.abs(up(ids, alphas).values - seed_model(ids).values))
    assert diff < 1e-9
    for l in gated_layers(up):
        assert not l.theta_pre.requires_grad
        assert np.all(l.theta_delta.values == 0)
