from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from octane.autoencoder import (
    LayerParams,
    NetworkParams,
    RegWeights,
    SmoothedRelu,
    act_out,
    act_out_prime,
    evaluate,
    flip,
    layer_rhs,
    loss_fidelity,
    regularizer,
    terminal_adjoint,
)
from octane.dynamics import StepFailure, TruncationBudget
from octane.tt import tt_from_dense, tt_to_dense

from oracles import dense_backprop, dense_objective, smoothed_relu, smoothed_relu_prime

LAMS = (1e-3, 2e-3, 0.1, 0.2)
REG = RegWeights(*LAMS)


def tight(tau, bound=1e-11):
    return TruncationBudget(tau, bound / tau, bound / tau**2)


def instance(seed=3, n_fr=5, n_fc=4, n=3, layers=4, scale=0.3):
    rng = np.random.default_rng(seed)
    Ks = [scale * rng.standard_normal((n_fr, n_fr)) for _ in range(layers)]
    bs = [0.1, -0.2, 0.05, 0.3][:layers] if layers == 4 else list(0.1 * rng.standard_normal(layers))
    x_in = rng.random((n_fr, n_fc, n))
    x_ref = rng.random((n_fr, n_fc, n))
    half = layers // 2
    params = NetworkParams([LayerParams(k, b) for k, b in zip(Ks[:half], bs[:half])],
                           [LayerParams(k, b) for k, b in zip(Ks[half:], bs[half:])])
    return params, Ks, bs, x_in, x_ref


# --- activations -----------------------------------------------------------

@given(st.floats(-5, 5), st.floats(1e-3, 2))
def test_smoothed_relu_matches_piecewise_oracle(x, delta):
    act = SmoothedRelu(delta)
    arr = np.array([x])
    assert act.value(arr)[0] == pytest.approx(smoothed_relu(arr, delta)[0], abs=1e-15)
    assert act.derivative(arr)[0] == pytest.approx(smoothed_relu_prime(arr, delta)[0], abs=1e-15)


def test_smoothed_relu_is_c1_at_knots():
    act = SmoothedRelu(0.1)
    for k in (0.0, 0.1):
        lo, hi = act.value(np.array([k - 1e-9, k + 1e-9]))
        assert abs(hi - lo) < 1e-8
        dlo, dhi = act.derivative(np.array([k - 1e-9, k + 1e-9]))
        assert abs(dhi - dlo) < 1e-7
    xs = np.linspace(-1, 1, 2001)
    num = np.gradient(act.value(xs), xs)
    assert np.allclose(num[1:-1], act.derivative(xs)[1:-1], atol=1e-2)


def test_tt_activation_wrappers():
    x = np.random.default_rng(0).standard_normal((3, 4, 2))
    t = tt_from_dense(x)
    assert np.allclose(tt_to_dense(act_out(t, 0.1)), smoothed_relu(x, 0.1), atol=1e-12)
    assert np.allclose(tt_to_dense(act_out_prime(t, 0.1)), smoothed_relu_prime(x, 0.1), atol=1e-12)
    p = LayerParams(np.eye(3), 0.5)
    assert np.allclose(tt_to_dense(layer_rhs(p, t)), np.tanh(x + 0.5), atol=1e-12)


# --- forward pass and objective --------------------------------------------

def test_forward_matches_dense_network_when_untruncated():
    params, Ks, bs, x_in, x_ref = instance()
    ev = evaluate(params, x_in, x_ref, tight(0.25), REG, SmoothedRelu(0.1), 1 / 20, need_grad=False)
    val, ys = dense_objective(Ks, bs, x_in, x_ref, 0.25, LAMS, 0.1, 1 / 20)
    assert np.allclose(tt_to_dense(ev.decoder.states[-1]), ys[-1], atol=1e-10)
    assert ev.value == pytest.approx(val, rel=1e-10)
    # value frozen from the dense oracle
    assert ev.value == pytest.approx(0.12184010648172573, rel=1e-10)


def test_gradients_match_hand_written_backprop():
    params, Ks, bs, x_in, x_ref = instance()
    ev = evaluate(params, x_in, x_ref, tight(0.25), REG, SmoothedRelu(0.1), 1 / 20)
    gK, gb, _ = dense_backprop(Ks, bs, x_in, x_ref, 0.25, LAMS, 0.1, 1 / 20)
    got = ev.grads.encoder + ev.grads.decoder
    for (k, b), ek, eb in zip(got, gK, gb):
        assert np.allclose(k, ek, atol=1e-10)
        assert b == pytest.approx(eb, abs=1e-10)
    # frozen from the oracle
    assert [b for _, b in got] == pytest.approx(
        [0.015322326923058802, -0.0021493570016852988, 0.01232157472558107, 0.02704823593330639], abs=1e-10)
    assert got[0][0][0, 0] == pytest.approx(0.0017633876876201465, abs=1e-10)


def test_oracle_backprop_agrees_with_finite_differences():
    _, Ks, bs, x_in, x_ref = instance()
    f = lambda Ks_, bs_: dense_objective(Ks_, bs_, x_in, x_ref, 0.25, LAMS, 0.1, 1 / 20)[0]
    gK, gb, _ = dense_backprop(Ks, bs, x_in, x_ref, 0.25, LAMS, 0.1, 1 / 20)
    h = 1e-6
    E = np.zeros_like(Ks[1])
    E[2, 3] = h
    up = [k + (E if i == 1 else 0) for i, k in enumerate(Ks)]
    dn = [k - (E if i == 1 else 0) for i, k in enumerate(Ks)]
    assert (f(up, bs) - f(dn, bs)) / (2 * h) == pytest.approx(gK[1][2, 3], rel=1e-5, abs=1e-9)
    bp = list(bs)
    bp[2] += h
    bm = list(bs)
    bm[2] -= h
    assert (f(Ks, bp) - f(Ks, bm)) / (2 * h) == pytest.approx(gb[2], rel=1e-5)


def test_adjoint_rescaling_leaves_gradients_unchanged():
    params, _, _, x_in, x_ref = instance()
    args = (params, x_in, x_ref, tight(0.25), REG, SmoothedRelu(0.1), 1 / 20)
    a = evaluate(*args)
    for norm in ("state", 7.5):
        b = evaluate(*args, adjoint_norm=norm)
        for (k1, b1), (k2, b2) in zip(a.grads.encoder + a.grads.decoder, b.grads.encoder + b.grads.decoder):
            assert np.allclose(k1, k2, atol=1e-10) and b1 == pytest.approx(b2, abs=1e-10)


def test_next_state_linearization_differs_from_exact_adjoint():
    params, Ks, bs, x_in, x_ref = instance()
    args = (params, x_in, x_ref, tight(0.25), REG, SmoothedRelu(0.1), 1 / 20)
    exact = evaluate(*args).grads.encoder[0][0]
    lagged = evaluate(*args, linearize="next").grads.encoder[0][0]
    assert not np.allclose(exact, lagged, atol=1e-8)
    assert np.allclose(exact, lagged, rtol=0.5, atol=1e-3)  # still consistent to first order
    with pytest.raises(ValueError):
        evaluate(*args, linearize="later")


@given(st.integers(0, 1000))
def test_terminal_adjoint_is_negative_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 3, 2))
    g = rng.standard_normal((3, 3, 2))
    act = SmoothedRelu(0.5)
    p = tt_to_dense(terminal_adjoint(x, g, 2, act, 0.3))
    d = rng.standard_normal(g.shape)
    h = 1e-6
    num = (loss_fidelity(x, g + h * d, 2, act, 0.3) - loss_fidelity(x, g - h * d, 2, act, 0.3)) / (2 * h)
    assert -np.sum(p * d) == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_regularizer_closed_form():
    params = NetworkParams([LayerParams(np.ones((2, 2)), 1.0)] * 2, [LayerParams(2 * np.ones((2, 2)), 3.0)] * 2)
    val = regularizer(params, RegWeights(1, 1, 1, 1))
    assert val == pytest.approx(1 / 4 * 8 + 1 / 4 * 32 + 1 / 4 * 2 + 1 / 4 * 18)


# --- identity network and rank contracts -----------------------------------

@pytest.mark.parametrize("layers", [2, 6, 12])
def test_zero_parameters_reproduce_input(layers):
    x = np.random.default_rng(layers).random((8, 8, 4))
    params = NetworkParams.zeros(layers, 8)
    ev = evaluate(params, x, x, tight(1.0 / layers), need_grad=False)
    assert np.max(np.abs(tt_to_dense(ev.decoder.states[-1]) - x)) <= 1e-12


def test_decoder_caps_are_flipped_encoder_ranks():
    params, _, _, x_in, x_ref = instance(scale=1.0)
    budget = TruncationBudget(0.25, 0.5 / 0.25, 0.5 / 0.25**2)
    ev = evaluate(params, x_in, x_ref, budget, REG, strict=False)
    assert ev.prescribed_decoder == flip(ev.profile.forward_encoder)
    for got, cap in zip(ev.profile.forward_decoder, ev.prescribed_decoder):
        assert all(g <= c for g, c in zip(got, cap))
    assert len(ev.profile.backward_encoder) == params.n_enc + 1
    assert len(ev.profile.backward_decoder) == len(params.decoder) + 1


def test_prescribed_profile_caps_both_halves():
    params, _, _, x_in, x_ref = instance()
    caps = [(2, 2)] * (params.n_enc + 1)
    ev = evaluate(params, x_in, x_ref, TruncationBudget(0.25, 4.0, 16.0), encoder_caps=caps, need_grad=False,
                  strict=False)
    assert all(r1 <= 2 and r2 <= 2 for r1, r2 in ev.profile.forward_encoder[1:] + ev.profile.forward_decoder)
    assert ev.prescribed_decoder == flip(caps)


def test_strict_mode_raises_when_caps_bind():
    params, _, _, x_in, x_ref = instance(scale=2.0)
    caps = [(1, 1)] * (params.n_enc + 1)
    with pytest.raises(StepFailure):
        evaluate(params, x_in, x_ref, tight(0.25), encoder_caps=caps, need_grad=False)


def test_parameter_validation():
    with pytest.raises(ValueError):
        LayerParams(np.ones((2, 3)), 0.0)
    with pytest.raises(ValueError):
        LayerParams(np.ones((2, 2)), float("nan"))
    with pytest.raises(ValueError):
        NetworkParams([LayerParams(np.ones((2, 2)), 0)], [])
    with pytest.raises(ValueError):
        RegWeights(-1, 0, 0, 0)
    with pytest.raises(ValueError):
        SmoothedRelu(0.0)
