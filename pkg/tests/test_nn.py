from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metcross.errors import DivergenceError, ShapeError
from metcross.nn import (Adam, Dense, Dropout, EncoderDecoder, FeatureNetwork, LSTM, child_rng, load_checkpoint,
                         mae_loss, read_checkpoint_meta, save_checkpoint)

from grad_cases import CASES, split_head
from gradcheck import worst


@pytest.mark.parametrize("kind", list(CASES))
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    for _ in range(5):
        errors = CASES[kind](rng)
        assert worst(errors) < 1e-3, errors


def test_fusion_head_gradients_cover_each_subnetwork():
    errors = split_head(CASES["F_tr/F_I/F_b"](np.random.default_rng(1)))
    assert set(errors) == {"F_b", "F_tr", "F_I", "target_embedding"}
    assert max(errors.values()) < 1e-3


def test_mlp_forward_by_hand():
    net = FeatureNetwork("MLP", 2, 1, 2)
    net.hidden.params["W"][...] = [[1.0, -1.0], [2.0, 0.5]]
    net.hidden.params["b"][...] = [0.0, -3.0]
    net.out.params["W"][...] = [[2.0], [1.0]]
    net.out.params["b"][...] = [0.5]
    # hidden pre-activation [1+4, -1+1-3] = [5, -3] -> relu [5, 0] -> 2*5 + 0.5
    assert net(np.array([[1.0, 2.0]]))[0, 0] == 10.5


def _lstm_reference(x, Wx, Wh, b):
    H = Wh.shape[0]
    sig = lambda z: 1 / (1 + np.exp(-z))
    out = []
    for seq in x:
        h, c = np.zeros(H), np.zeros(H)
        for xt in seq:
            z = xt @ Wx + h @ Wh + b
            i, f, g, o = sig(z[:H]), sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), sig(z[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def test_lstm_forward_matches_loop_reference():
    rng = np.random.default_rng(2)
    cell = LSTM(3, 4, rng)
    x = rng.normal(size=(5, 6, 3))
    ref = _lstm_reference(x, cell.params["Wx"], cell.params["Wh"], cell.params["b"])
    np.testing.assert_allclose(cell(x), ref, atol=1e-12)


def test_networks_share_weights_across_leading_axes():
    net = FeatureNetwork("MLP", 3, 2, 5, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 6, 3))
    out = net(x)
    assert out.shape == (4, 6, 2)
    np.testing.assert_allclose(out[2, 3], net(x[2, 3][None])[0])


def test_shape_errors():
    with pytest.raises(ShapeError):
        FeatureNetwork("MLP", 3, 1)(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        EncoderDecoder(1, 1, 3, 2)(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        mae_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        FeatureNetwork("GRU", 3, 1)


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        Dense(2, 2, np.random.default_rng(0)).backward(np.zeros((1, 2)))


def test_encoder_decoder_block_count():
    net = EncoderDecoder(2, 3, 5, 4, 6)
    assert net.n_blocks == 5 and net(np.zeros((7, 5))).shape == (7, 4)


def test_dropout_scales_and_is_identity_at_eval():
    d = Dropout(0.5, np.random.default_rng(0))
    x = np.ones((2000,))
    assert np.array_equal(d(x), x)
    y = d(x, train=True)
    assert set(np.unique(y)) <= {0.0, 2.0} and abs(y.mean() - 1) < 0.1


def test_adam_leaves_parameters_alone_with_zero_gradient():
    net = FeatureNetwork("MLP", 3, 2, 4, np.random.default_rng(0))
    before = net.state_dict()
    opt = Adam([net], lr=0.1)
    for _ in range(5):
        net.zero_grad()
        opt.step()
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_adam_first_step_moves_by_lr():
    net = Dense(1, 1, np.random.default_rng(0))
    w0 = net.params["W"].copy()
    net.grads["W"][...] = 3.7
    Adam([net], lr=0.01).step()
    np.testing.assert_allclose(w0 - net.params["W"], 0.01, rtol=1e-6)


def test_adam_raises_on_non_finite_parameters():
    net = Dense(1, 1, np.random.default_rng(0))
    net.grads["W"][...] = np.nan
    with pytest.raises(DivergenceError):
        Adam([net]).step()


def test_training_learns_a_linear_map():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(256, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 0.3
    net = FeatureNetwork("MLP", 3, 1, 16, rng)
    opt = Adam([net], lr=0.01)
    first = None
    for _ in range(200):
        net.zero_grad()
        loss, g = mae_loss(net(x)[:, 0], y)
        first = loss if first is None else first
        net.backward(g[:, None])
        opt.step()
    assert loss < 0.25 * first


def test_child_rng_is_stable_and_named():
    a = child_rng(3, "F_b").random(4)
    np.testing.assert_array_equal(a, child_rng(3, "F_b").random(4))
    assert not np.array_equal(a, child_rng(3, "F_tr").random(4))
    assert not np.array_equal(a, child_rng(4, "F_b").random(4))


def test_checkpoint_round_trip_and_shape_check(tmp_path):
    net = EncoderDecoder(1, 2, 4, 3, 5, np.random.default_rng(1))
    save_checkpoint(tmp_path / "c.npz", {"net": net}, {"seed": 1})
    other = EncoderDecoder(1, 2, 4, 3, 5, np.random.default_rng(9))
    meta = load_checkpoint(tmp_path / "c.npz", {"net": other})
    assert meta["seed"] == 1 and read_checkpoint_meta(tmp_path / "c.npz")["seed"] == 1
    x = np.random.default_rng(0).normal(size=(2, 4))
    np.testing.assert_array_equal(net(x), other(x))
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "c.npz", {"net": EncoderDecoder(1, 2, 4, 3, 6)})
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "c.npz", {"other": net})


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 16))
def test_mae_gradient_is_sign_over_n(n, m, seed):
    rng = np.random.default_rng(seed)
    p, a = rng.normal(size=(n, m)), rng.normal(size=(n, m))
    loss, g = mae_loss(p, a)
    assert loss == pytest.approx(np.abs(p - a).mean())
    np.testing.assert_array_equal(g, np.sign(p - a) / (n * m))
