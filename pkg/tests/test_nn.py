import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedhar.nn import (Architecture, OptimizerConfig, OptimizerState, adamw_step, cross_entropy,
                       forward, init_model, kl_divergence, loss_and_grad, param_count, softmax, unpack)


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b))))


def random_batch(arch, n, rng, separated=False):
    feats = rng.standard_normal((n, arch.num_modalities_max, arch.input_width_per_modality))
    if separated:
        mask = np.zeros((n, arch.num_modalities_max), dtype=bool)
        mask[np.arange(n), rng.integers(0, arch.num_modalities_max, n)] = True
    else:
        mask = rng.random((n, arch.num_modalities_max)) < 0.6
        mask[np.arange(n), rng.integers(0, arch.num_modalities_max, n)] = True
    feats = feats * mask[:, :, None]
    labels = rng.integers(0, arch.num_classes, n)
    return feats, mask, labels


FD = Architecture("flat-dense", 4, 3, (8,), 6)
TP = Architecture("token-pooling", 4, 3, (8,), 6)


# --- param_count ---------------------------------------------------------------

def test_param_count_hand_counted():
    assert param_count(FD) == (12 * 8 + 8) + (8 * 6 + 6) == 158


def test_param_count_single_linear_layer():
    assert param_count(Architecture("flat-dense", 5, 1, (), 6)) == 5 * 6 + 6


def test_token_pooling_count_ignores_slot_count():
    counts = {param_count(Architecture("token-pooling", 4, k, (8, 5), 6)) for k in (1, 2, 3)}
    assert len(counts) == 1


def test_unpack_covers_vector_exactly():
    p = np.arange(param_count(FD), dtype=float)
    layers = unpack(p, FD)
    flat = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])
    np.testing.assert_array_equal(flat, p)
    with pytest.raises(ValueError):
        unpack(p[:-1], FD)


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture("conv", 4)
    with pytest.raises(ValueError):
        Architecture("flat-dense", 0)
    with pytest.raises(ValueError):
        Architecture("flat-dense", 4, 3, (0,))


# --- init_model ----------------------------------------------------------------

def test_init_deterministic_and_zero_bias():
    a, b = init_model(FD, 9), init_model(FD, 9)
    assert a.tobytes() == b.tobytes()
    for W, bias in unpack(a, FD):
        assert np.all(bias == 0)
        limit = math.sqrt(6 / sum(W.shape))
        assert np.all(np.abs(W) <= limit)


def test_init_seed_changes_weights():
    assert np.any(init_model(FD, 1) != init_model(FD, 2))


# --- forward -------------------------------------------------------------------

def test_forward_shape_and_bad_input(rng):
    p = init_model(FD, 0)
    feats, mask, _ = random_batch(FD, 7, rng)
    assert forward(p, FD, feats, mask).shape == (7, 6)
    with pytest.raises(ValueError):
        forward(p, FD, feats[:, :2], mask[:, :2])
    with pytest.raises(ValueError):
        forward(p, FD, feats, mask[:, :2])
    with pytest.raises(ValueError):
        forward(p, FD, feats, np.zeros_like(mask))


def test_zero_weights_give_zero_logits(rng):
    for arch in (FD, TP):
        feats, mask, _ = random_batch(arch, 5, rng)
        assert np.all(forward(np.zeros(param_count(arch)), arch, feats, mask) == 0)


def test_token_pooling_single_slot_matches_embedding(rng):
    p = init_model(TP, 3)
    x = rng.standard_normal(4)
    one = np.zeros((1, 3, 4))
    one[0, 1] = x
    m1 = np.array([[False, True, False]])
    two = np.zeros((1, 3, 4))
    two[0, 0] = two[0, 2] = x
    m2 = np.array([[True, False, True]])
    np.testing.assert_allclose(forward(p, TP, one, m1), forward(p, TP, two, m2), rtol=0, atol=1e-15)

    (W1, b1), (W2, b2) = unpack(p, TP)
    emb = np.tanh(x @ W1 + b1)
    np.testing.assert_allclose(forward(p, TP, one, m1)[0], emb @ W2 + b2, atol=1e-14)


def test_flat_dense_ignores_absent_slot_values(rng):
    p = init_model(FD, 4)
    feats, mask, _ = random_batch(FD, 6, rng, separated=True)
    noisy = feats + (~mask)[:, :, None] * 100.0
    np.testing.assert_array_equal(forward(p, FD, feats, mask), forward(p, FD, noisy, mask))


# --- softmax / CE / KL ---------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(6)), np.full(6, 1 / 6), atol=1e-15)
    z = np.array([0.3, -2.0, 5.0])
    np.testing.assert_allclose(softmax(z + 1000.0), softmax(z), atol=1e-15)
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_normalised(z):
    p = softmax(np.array(z))
    assert abs(p.sum() - 1) <= 1e-9
    assert np.all(p > 0)


def test_cross_entropy_examples():
    assert cross_entropy(np.eye(6)[[2]], [2]) <= 1e-11
    assert cross_entropy(np.full((1, 6), 1 / 6), [0]) == pytest.approx(1.791759469228055, abs=1e-12)
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert cross_entropy(p, [1, 1]) == pytest.approx((-math.log(0.8) - math.log(0.4)) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        cross_entropy(p, [0, 2])


def test_kl_examples():
    p = np.array([0.5, 0.5])
    assert kl_divergence(p, p) == 0
    assert kl_divergence(p, np.array([0.25, 0.75])) == pytest.approx(0.14384103622589042, abs=1e-14)
    # zero mass in p contributes nothing, zero mass in q is floored
    assert np.isfinite(kl_divergence(np.array([1.0, 0.0]), np.array([0.0, 1.0])))


prob_vectors = st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=8).map(
    lambda v: np.array(v) / np.sum(v))


@given(prob_vectors, st.data())
def test_kl_nonnegative(p, data):
    q = data.draw(st.lists(st.floats(1e-6, 1.0), min_size=len(p), max_size=len(p)))
    q = np.array(q) / np.sum(q)
    assert kl_divergence(p, q) >= -1e-15
    assert abs(kl_divergence(p, p)) <= 1e-12


# --- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("arch", [
    Architecture("flat-dense", 3, 3, (5,), 4),
    Architecture("flat-dense", 2, 2, (), 3),
    Architecture("token-pooling", 3, 3, (4,), 4),
    Architecture("token-pooling", 3, 2, (4, 3), 4),
], ids=lambda a: f"{a.kind}-{a.hidden_widths}")
@pytest.mark.parametrize("kl", [None, 0.33, 0.75])
def test_gradient_matches_finite_differences(arch, kl, rng):
    assert param_count(arch) <= 100
    p = init_model(arch, 11) + 0.1 * rng.standard_normal(param_count(arch))
    feats, mask, labels = random_batch(arch, 6, rng)
    peer = softmax(rng.standard_normal((6, arch.num_classes))) if kl is not None else None

    def f(x):
        return loss_and_grad(x, arch, feats, mask, labels, peer, kl)[0]

    _, g = loss_and_grad(p, arch, feats, mask, labels, peer, kl)
    assert rel_err(g, central_diff(f, p)) < 1e-4


def test_fifty_parameter_model_gradient(rng):
    arch = Architecture("flat-dense", 2, 2, (4,), 6)
    assert param_count(arch) == 50
    p = init_model(arch, 5)
    feats, mask, labels = random_batch(arch, 8, rng)
    _, g = loss_and_grad(p, arch, feats, mask, labels)
    assert rel_err(g, central_diff(lambda x: loss_and_grad(x, arch, feats, mask, labels)[0], p)) < 1e-4


def test_zero_kl_weight_is_bit_identical(rng):
    p = init_model(TP, 2)
    feats, mask, labels = random_batch(TP, 5, rng)
    peer = softmax(rng.standard_normal((5, 6)))
    l0, g0 = loss_and_grad(p, TP, feats, mask, labels)
    l1, g1 = loss_and_grad(p, TP, feats, mask, labels, peer, 0.0)
    assert l0 == l1
    assert g0.tobytes() == g1.tobytes()


def test_self_peer_adds_nothing(rng):
    p = init_model(FD, 2)
    feats, mask, labels = random_batch(FD, 5, rng)
    own = softmax(forward(p, FD, feats, mask))
    l0, g0 = loss_and_grad(p, FD, feats, mask, labels)
    l1, g1 = loss_and_grad(p, FD, feats, mask, labels, own, 0.75)
    assert abs(l1 - l0) <= 1e-12
    np.testing.assert_allclose(g1, g0, rtol=0, atol=1e-6)


def test_mutual_loss_needs_peer(rng):
    feats, mask, labels = random_batch(FD, 3, rng)
    with pytest.raises(ValueError):
        loss_and_grad(init_model(FD, 0), FD, feats, mask, labels, None, 0.33)


# --- AdamW ---------------------------------------------------------------------

def test_adamw_first_step_hand_value():
    cfg = OptimizerConfig(learning_rate=0.01, weight_decay=0.01, epsilon=1e-8)
    new, st_ = adamw_step(np.zeros(1), np.ones(1), OptimizerState.zeros(1), cfg)
    # m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert new[0] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-15)
    assert st_.step_count == 1
    np.testing.assert_allclose(st_.first_moment, [0.1])
    np.testing.assert_allclose(st_.second_moment, [0.001])


def test_adamw_second_step_hand_value():
    cfg = OptimizerConfig(learning_rate=0.1, weight_decay=0.5, epsilon=1e-8)
    p, s = adamw_step(np.array([1.0]), np.array([2.0]), OptimizerState.zeros(1), cfg)
    p2, s2 = adamw_step(p, np.array([-1.0]), s, cfg)
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    mh, vh = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    expected = p[0] - 0.1 * (mh / (math.sqrt(vh) + 1e-8) + 0.5 * p[0])
    assert p2[0] == pytest.approx(expected, abs=1e-14)


def test_adamw_zero_gradient_at_origin():
    new, _ = adamw_step(np.zeros(4), np.zeros(4), OptimizerState.zeros(4), OptimizerConfig())
    assert np.all(new == 0)


def test_adamw_elementwise():
    cfg = OptimizerConfig(weight_decay=0.0)
    new, _ = adamw_step(np.array([0.3, 0.3]), np.array([-0.7, -0.7]), OptimizerState.zeros(2), cfg)
    assert new[0] == new[1]


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(weight_decay=-0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**63), st.integers(1, 6))
def test_training_steps_deterministic(seed, steps):
    rng = np.random.default_rng(seed % 1000)
    feats, mask, labels = random_batch(TP, 4, rng)

    def run():
        p, s = init_model(TP, seed), OptimizerState.zeros(param_count(TP))
        for _ in range(steps):
            _, g = loss_and_grad(p, TP, feats, mask, labels)
            p, s = adamw_step(p, g, s, OptimizerConfig())
        return p

    assert run().tobytes() == run().tobytes()
