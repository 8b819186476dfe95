import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import numeric_grad, rel_error, routing_oracle
from pdrcaps.capsules import (CapsuleRouting, CFCLayer, Decoder, MarginLossConfig, capsule_lengths, cfc_layer,
                              dynamic_routing, dynamic_routing_backward, dynamic_routing_forward, margin_loss,
                              mask_capsules, predict, predict_backward, reconstruction_loss, seqsum, squash,
                              squash_backward, squash_forward)
from pdrcaps.errors import ContractError, DimensionError, InvalidStateError
from pdrcaps.tensor import sigmoid_forward

SEEDS = range(10)


# --------------------------------------------------------------------------- squash


def test_squash_zero_and_unit():
    assert not squash(np.zeros((1, 4))).any()
    s = np.array([[0.6, 0.8]])
    assert np.linalg.norm(squash(s)) == 0.5


def test_squash_large_norm():
    s = np.array([[100.0, 0.0]])
    np.testing.assert_allclose(np.linalg.norm(squash(s)), 10000.0 / 10001.0, rtol=1e-14)
    assert abs(np.linalg.norm(squash(s)) - 1.0) < 1e-3


def test_squash_keeps_direction():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(50, 8))
    v = squash(s)
    cos = (s * v).sum(axis=1) / (np.linalg.norm(s, axis=1) * np.linalg.norm(v, axis=1))
    np.testing.assert_allclose(cos, 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_squash_gradient(seed):
    rng = np.random.default_rng(seed)
    s, r = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    g = squash_backward(r, squash_forward(s)[1])
    assert rel_error(g, numeric_grad(lambda: float((squash(s) * r).sum()), s)) < 1e-4


def test_squash_gradient_at_zero_is_finite():
    g = squash_backward(np.ones((1, 3)), squash_forward(np.zeros((1, 3)))[1])
    assert np.all(np.isfinite(g))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=16))
def test_squash_norm_below_one(values):
    v = squash(np.array([values]))
    assert np.linalg.norm(v) < 1.0


def test_seqsum_is_left_to_right():
    x = np.array([1e16, 1.0, -1e16, 1.0])
    assert seqsum(x, 0) == ((1e16 + 1.0) - 1e16) + 1.0


# --------------------------------------------------------------------------- CFC


@pytest.mark.parametrize("hw,count", [(14, 196), (10, 100), (6, 36)])
def test_cfc_capsule_count(hw, count):
    layer = CFCLayer(4, kernel=1, caps_dim=8, rng=np.random.default_rng(0))
    out, _ = layer.forward(np.zeros((1, 4, hw, hw)))
    assert out.shape == (1, count, 8)
    assert layer.n_capsules(hw, hw) == count


def test_cfc_single_pixel_identity():
    w = np.zeros((3, 1, 1, 1))
    w[:, 0, 0, 0] = [1.0, 2.0, -1.0]
    b = np.array([0.1, 0.0, 0.5])
    x = np.array([[[[0.7]]]])
    out = cfc_layer(x, 1, 3, w, b)
    np.testing.assert_allclose(out[0, 0], squash(w[:, 0, 0, 0] * 0.7 + b), rtol=1e-15)


def test_cfc_window_covers_all_channels():
    rng = np.random.default_rng(1)
    layer = CFCLayer(3, kernel=3, caps_dim=4, rng=rng)
    x = rng.normal(size=(1, 3, 5, 5))
    base, _ = layer.forward(x)
    x2 = x.copy()
    x2[0, 2, 0, 0] += 1.0  # only the top-left window sees this pixel
    moved, _ = layer.forward(x2)
    changed = np.abs(moved - base).max(axis=2)[0] > 0
    assert changed.tolist() == [True] + [False] * 8


def test_cfc_kernel_too_large():
    with pytest.raises(DimensionError):
        CFCLayer(1, kernel=5, rng=np.random.default_rng(0)).forward(np.zeros((1, 1, 4, 4)))


def test_cfc_type_major_order():
    rng = np.random.default_rng(2)
    layer = CFCLayer(2, kernel=1, caps_dim=3, caps_types=2, rng=rng)
    x = rng.normal(size=(1, 2, 2, 2))
    out, _ = layer.forward(x)
    y, _ = layer.conv.forward(x)
    # capsule 5 is type 1 at row 0, col 1
    np.testing.assert_allclose(out[0, 5], squash(y[0, 3:6, 0, 1]), rtol=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_cfc_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = CFCLayer(2, kernel=2, caps_dim=3, caps_types=2, stride=1, rng=rng)
    x = rng.normal(size=(2, 2, 3, 3))
    r = rng.normal(size=(2, 8, 3))
    out, cache = layer.forward(x)
    gx = layer.backward(r, cache)

    def loss():
        return float((layer.forward(x)[0] * r).sum())

    assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
    assert rel_error(layer.conv.weight.grad, numeric_grad(loss, layer.conv.weight.data)) < 1e-4


# --------------------------------------------------------------------------- predict


def test_predict_zero_and_identity():
    u = np.random.default_rng(0).normal(size=(2, 1, 4))
    assert not predict(u, np.zeros((1, 3, 5, 4))).any()
    np.testing.assert_array_equal(predict(u, np.eye(4)[None, None])[:, :, 0, :], u)


def test_predict_matches_loop():
    rng = np.random.default_rng(3)
    u, w = rng.normal(size=(1, 2, 3)), rng.normal(size=(2, 2, 4, 3))
    out = predict(u, w)
    for i in range(2):
        for j in range(2):
            for d in range(4):
                ref = sum(w[i, j, d, k] * u[0, i, k] for k in range(3))
                assert abs(out[0, i, j, d] - ref) < 1e-12


def test_predict_dimension_errors():
    with pytest.raises(DimensionError) as exc:
        predict(np.zeros((1, 2, 3)), np.zeros((2, 2, 4, 5)))
    assert exc.value.axis == "d_in"
    with pytest.raises(DimensionError):
        predict(np.zeros((1, 3, 3)), np.zeros((2, 2, 4, 3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_predict_gradient(seed):
    rng = np.random.default_rng(seed)
    u, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 2, 5, 4))
    r = rng.normal(size=(2, 3, 2, 5))
    gu, gw = predict_backward(r, u, w)
    loss = lambda: float((predict(u, w) * r).sum())  # noqa: E731
    assert rel_error(gu, numeric_grad(loss, u)) < 1e-4
    assert rel_error(gw, numeric_grad(loss, w)) < 1e-4


# --------------------------------------------------------------------------- routing


def test_routing_single_output():
    uhat = np.random.default_rng(0).normal(size=(2, 5, 1, 4))
    for r in (1, 2, 4):
        _, state = dynamic_routing(uhat, r)
        assert np.all(state.coeffs == 1.0)


def test_routing_symmetric_predictions_stay_uniform():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(1, 4, 1, 3))
    uhat = np.repeat(base, 3, axis=2)
    _, state = dynamic_routing(uhat, 5)
    for c in state.coeff_history:
        np.testing.assert_allclose(c, 1.0 / 3.0, rtol=0, atol=1e-15)


def test_routing_one_iteration_is_uniform_average():
    rng = np.random.default_rng(2)
    uhat = rng.normal(size=(3, 6, 4, 5))
    v, _ = dynamic_routing(uhat, 1)
    # zero logits give c_ij = 1 / n_out for every input capsule
    np.testing.assert_allclose(v, squash(uhat.sum(axis=1) / 4), rtol=0, atol=1e-9)


def test_routing_matches_step_oracle():
    rng = np.random.default_rng(4)
    uhat = rng.normal(size=(1, 3, 2, 4))
    v, state = dynamic_routing(uhat, 3)
    ref_v, ref_c = routing_oracle(uhat[0].tolist(), 3)
    assert v[0].tolist() == ref_v
    assert [c[0].tolist() for c in state.coeff_history] == ref_c


def test_routing_contracts():
    with pytest.raises(ContractError):
        dynamic_routing(np.zeros((1, 2, 2, 2)), 0)
    with pytest.raises(InvalidStateError):
        dynamic_routing_backward(np.zeros((1, 2, 2)), None)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("iterations", [1, 3])
def test_routing_gradient(seed, iterations):
    rng = np.random.default_rng(seed)
    uhat = rng.normal(size=(2, 4, 3, 3))
    r = rng.normal(size=(2, 3, 3))
    v, _, cache = dynamic_routing_forward(uhat, iterations)
    g = dynamic_routing_backward(r, cache)
    loss = lambda: float((dynamic_routing(uhat, iterations)[0] * r).sum())  # noqa: E731
    assert rel_error(g, numeric_grad(loss, uhat)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_capsule_routing_layer_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = CapsuleRouting(5, 3, 4, 6, 3, rng=rng)
    u = rng.normal(size=(2, 5, 4)) * 0.5
    r = rng.normal(size=(2, 3, 6))
    _, cache = layer.forward(u)
    gu = layer.backward(r, cache)
    loss = lambda: float((layer.forward(u)[0] * r).sum())  # noqa: E731
    assert rel_error(gu, numeric_grad(loss, u)) < 1e-4
    assert rel_error(layer.weight.grad, numeric_grad(loss, layer.weight.data)) < 1e-4
    assert layer.last_state.iteration == 3


# --------------------------------------------------------------------------- losses


def _caps_with_lengths(lengths, d=4):
    lengths = np.asarray(lengths, dtype=float)
    caps = np.zeros(lengths.shape + (d,))
    caps[..., 0] = lengths
    return caps


def test_margin_loss_hinges_inactive():
    cfg = MarginLossConfig()
    caps = _caps_with_lengths([[0.9, 0.1, 0.1]])
    assert margin_loss(caps, [0], cfg)[0] == 0.0


def test_margin_loss_all_zero():
    loss, _ = margin_loss(np.zeros((1, 3, 4)), [1])
    assert loss == pytest.approx(0.81, abs=1e-15)


@pytest.mark.parametrize("seed", SEEDS)
def test_margin_loss_formula(seed):
    rng = np.random.default_rng(seed)
    lengths = rng.uniform(0, 1, size=(4, 5))
    labels = rng.integers(0, 5, size=4)
    cfg = MarginLossConfig(0.95, 0.05, 0.5)
    total = 0.0
    for n in range(4):
        for k in range(5):
            if k == labels[n]:
                total += max(0.0, 0.95 - lengths[n, k]) ** 2
            else:
                total += 0.5 * max(0.0, lengths[n, k] - 0.05) ** 2
    loss, _ = margin_loss(_caps_with_lengths(lengths), labels, cfg)
    assert loss == pytest.approx(total / 4, rel=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_margin_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    caps = rng.normal(size=(3, 4, 5)) * 0.3
    labels = rng.integers(0, 4, size=3)
    _, g = margin_loss(caps, labels)
    assert rel_error(g, numeric_grad(lambda: margin_loss(caps, labels)[0], caps)) < 1e-4


def test_margin_config_validation():
    with pytest.raises(ContractError):
        MarginLossConfig(0.1, 0.9)
    with pytest.raises(ContractError):
        margin_loss(np.zeros((1, 3, 2)), [3])


def test_reconstruction_loss_hand_sum():
    x = np.array([[[[0.0, 1.0], [0.5, 0.5]]], [[[1.0, 1.0], [0.0, 0.0]]]])
    recon = np.array([[0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 1.0]])
    # sample sums: 0.25 + 0.25 = 0.5 and 1 + 1 = 2
    loss, _ = reconstruction_loss(x, recon, 0.0005)
    assert loss == pytest.approx(0.0005 * (0.5 + 2.0) / 2, rel=1e-15)


# --------------------------------------------------------------------------- decoder


def test_decoder_zero_capsules_give_sigmoid_of_bias_stack():
    rng = np.random.default_rng(0)
    dec = Decoder(3, 4, 6, hidden=(5, 7), rng=rng)
    out, _ = dec.forward(np.zeros((1, 3, 4)), labels=[0])
    h = np.maximum(dec.net.layers[0].bias.data, 0.0)
    h = np.maximum(dec.net.layers[2].weight.data @ h + dec.net.layers[2].bias.data, 0.0)
    ref = sigmoid_forward(dec.net.layers[4].weight.data @ h + dec.net.layers[4].bias.data)[0]
    np.testing.assert_allclose(out[0], ref, rtol=1e-14)


def test_masking_zeroes_other_capsules():
    rng = np.random.default_rng(1)
    caps = rng.normal(size=(2, 3, 4))
    masked, _ = mask_capsules(caps, [2, 0])
    assert not masked[0, :2].any() and not masked[1, 1:].any()
    np.testing.assert_array_equal(masked[0, 2], caps[0, 2])
    eval_masked, _ = mask_capsules(caps)
    longest = capsule_lengths(caps).argmax(axis=1)
    for n in range(2):
        np.testing.assert_array_equal(eval_masked[n, longest[n]], caps[n, longest[n]])


@pytest.mark.parametrize("seed", SEEDS)
def test_decoder_gradient(seed):
    rng = np.random.default_rng(seed)
    dec = Decoder(3, 4, 6, hidden=(5,), rng=rng)
    caps = rng.normal(size=(2, 3, 4))
    labels = [1, 2]
    r = rng.normal(size=(2, 6))
    out, cache = dec.forward(caps, labels)
    g = dec.backward(r, cache)
    loss = lambda: float((dec.forward(caps, labels)[0] * r).sum())  # noqa: E731
    assert rel_error(g, numeric_grad(loss, caps)) < 1e-4
    w = dec.net.layers[0].weight
    assert rel_error(w.grad, numeric_grad(loss, w.data)) < 1e-4
