import math

import numpy as np
import pytest

from hybridocc import kernels
from hybridocc import layers as L
from hybridocc import tensor as tn
from hybridocc.tensor import ShapeError, Tensor

from oracles import brute_force_mhsa


def test_mhsa_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = L.EncoderBlockParams.init(rng, 4, 2, 2, 8)
        X = rng.normal(size=(3, 4))
        got = L.multi_head_self_attention(Tensor(X), p).data
        want = brute_force_mhsa(X, p.Wq.data, p.Wk.data, p.Wv.data, p.Wo.data, 2, 2)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_mhsa_single_step_attends_to_itself():
    rng = np.random.default_rng(1)
    p = L.EncoderBlockParams.init(rng, 4, 2, 2, 8)
    X = rng.normal(size=(1, 4))
    out, A = L.multi_head_self_attention(Tensor(X), p, return_weights=True)
    np.testing.assert_array_equal(A, np.ones((2, 1, 1)))
    np.testing.assert_allclose(out.data, X @ p.Wv.data @ p.Wo.data, atol=1e-14)


def test_mhsa_uniform_when_keys_identical():
    rng = np.random.default_rng(2)
    p = L.EncoderBlockParams.init(rng, 4, 2, 2, 8)
    X = np.tile(rng.normal(size=4), (5, 1))
    _, A = L.multi_head_self_attention(Tensor(X), p, return_weights=True)
    np.testing.assert_allclose(A, 0.2, atol=1e-15)


def test_mhsa_is_permutation_equivariant():
    rng = np.random.default_rng(3)
    p = L.EncoderBlockParams.init(rng, 6, 3, 2, 8)
    X = rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    a = L.multi_head_self_attention(Tensor(X), p).data
    b = L.multi_head_self_attention(Tensor(X[perm]), p).data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_mhsa_batched_matches_unbatched():
    rng = np.random.default_rng(4)
    p = L.EncoderBlockParams.init(rng, 4, 2, 2, 8)
    X = rng.normal(size=(3, 5, 4))
    batched = L.multi_head_self_attention(Tensor(X), p).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], L.multi_head_self_attention(Tensor(X[i]), p).data, atol=1e-14)


def test_mhsa_width_mismatch():
    p = L.EncoderBlockParams.init(np.random.default_rng(0), 4, 2, 2, 8)
    with pytest.raises(ShapeError):
        L.multi_head_self_attention(Tensor(np.zeros((3, 5))), p)


def test_positional_encoding_first_row_and_identity():
    pe = L.positional_encoding(24, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    np.testing.assert_allclose(pe[:, 0::2] ** 2 + pe[:, 1::2] ** 2, 1.0, atol=1e-14)


def test_positional_encoding_is_bit_identical_and_not_aliased():
    a = L.positional_encoding(24, 16)
    a[0, 0] = 99.0
    b = L.positional_encoding(24, 16)
    assert b[0, 0] == 0.0
    assert L.positional_encoding(24, 16).tobytes() == b.tobytes()


def test_positional_encoding_odd_width():
    pe = L.positional_encoding(5, 5)
    assert pe.shape == (5, 5)
    np.testing.assert_allclose(pe[3, 4], math.sin(3 / 10000 ** (4 / 5)), atol=1e-15)


def test_lstm_cell_zero_params():
    p = L.LSTMParams(Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))
    h, c = L.lstm_cell_step(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), p)
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_lstm_cell_saturated_gates_keep_cell():
    H = 2
    b = np.zeros(4 * H)
    b[:H] = -60.0  # input gate closed
    b[H:2 * H] = 60.0  # forget gate open
    p = L.LSTMParams(Tensor(np.zeros((3, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(b))
    c_prev = np.array([[0.7, -1.3]])
    _, c = L.lstm_cell_step(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, H))), Tensor(c_prev), p)
    np.testing.assert_allclose(c.data, c_prev, atol=1e-15)


def test_lstm_init_forget_bias():
    p = L.LSTMParams.init(np.random.default_rng(0), 3, 4)
    np.testing.assert_array_equal(p.gate("f")[2], 1.0)


def test_lstm_three_step_rollout_gradients():
    rng = np.random.default_rng(5)
    p = L.LSTMParams.init(rng, 3, 2)
    X = Tensor(rng.normal(size=(3, 3)))
    w = Tensor(rng.normal(size=(3, 2)))
    f = lambda: tn.tsum(tn.mul(L.lstm_sequence_stepwise(X, p), w))  # noqa: E731
    assert tn.grad_check(f, [X, p.W, p.U, p.b]) < 1e-5


def test_bilstm_single_step():
    rng = np.random.default_rng(6)
    fwd, bwd = L.LSTMParams.init(rng, 3, 2), L.LSTMParams.init(rng, 3, 2)
    x = rng.normal(size=(1, 3))
    out = L.bilstm_forward(Tensor(x), fwd, bwd).data
    z = Tensor(np.zeros((1, 2)))
    hf, _ = L.lstm_cell_step(Tensor(x), z, z, fwd)
    hb, _ = L.lstm_cell_step(Tensor(x), z, z, bwd)
    np.testing.assert_allclose(out, np.concatenate([hf.data, hb.data], axis=1), atol=1e-15)


def test_bilstm_reversal_symmetry():
    rng = np.random.default_rng(7)
    fwd, bwd = L.LSTMParams.init(rng, 3, 4), L.LSTMParams.init(rng, 3, 4)
    X = rng.normal(size=(6, 3))
    a = L.bilstm_forward(Tensor(X), fwd, bwd).data
    b = L.bilstm_forward(Tensor(X[::-1].copy()), bwd, fwd).data
    np.testing.assert_allclose(b[::-1], np.concatenate([a[:, 4:], a[:, :4]], axis=1), atol=1e-14)


def test_bilstm_fused_equals_stepwise_including_gradients():
    rng = np.random.default_rng(8)
    fwd, bwd = L.LSTMParams.init(rng, 3, 4), L.LSTMParams.init(rng, 3, 4)
    X = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 5, 8)))
    grads = []
    for stepwise in (False, True):
        params = [X, fwd.W, fwd.U, fwd.b, bwd.W, bwd.U, bwd.b]
        for q in params:
            q.requires_grad, q.grad = True, None
        out = L.bilstm_forward(X, fwd, bwd, stepwise=stepwise)
        tn.backward(tn.tsum(tn.mul(out, w)))
        grads.append([out.data] + [q.grad.copy() for q in params])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-13)


def test_bilstm_gradcheck_small():
    rng = np.random.default_rng(9)
    fwd, bwd = L.LSTMParams.init(rng, 3, 2), L.LSTMParams.init(rng, 3, 2)
    X = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(4, 4)))
    f = lambda: tn.tsum(tn.mul(L.bilstm_forward(X, fwd, bwd), w))  # noqa: E731
    assert tn.grad_check(f, [X, fwd.W, fwd.U, fwd.b, bwd.W, bwd.U, bwd.b]) < 1e-4


def test_bilstm_empty_sequence():
    rng = np.random.default_rng(0)
    p = L.LSTMParams.init(rng, 3, 2)
    with pytest.raises(ValueError):
        L.bilstm_forward(Tensor(np.zeros((0, 3))), p, p)


@pytest.mark.skipif("compiled" not in kernels.available_backends(), reason="extension not built")
@pytest.mark.parametrize("reverse", [False, True])
def test_compiled_kernel_matches_python(reverse):
    rng = np.random.default_rng(10)
    (pf, pb), (cf, cb) = kernels.available_backends()["python"], kernels.available_backends()["compiled"]
    for B, T, H in [(1, 1, 1), (3, 7, 5), (2, 24, 16)]:
        xw = rng.normal(size=(B, T, 4 * H))
        U = rng.normal(size=(H, 4 * H)) * 0.5
        dh = rng.normal(size=(B, T, H))
        a, b = pf(xw, U, reverse), cf(xw, U, reverse)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-13)
        for x, y in zip(pb(dh, U, *a, reverse), cb(dh, U, *b, reverse)):
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


def test_encoder_block_shape_and_row_statistics():
    rng = np.random.default_rng(11)
    p = L.EncoderBlockParams.init(rng, 8, 2, 4, 16)
    out = L.encoder_block(Tensor(rng.normal(size=(2, 6, 8))), p).data
    assert out.shape == (2, 6, 8)
    assert np.abs(out.mean(-1)).max() < 1e-9


def test_encoder_block_gradcheck():
    rng = np.random.default_rng(12)
    p = L.EncoderBlockParams.init(rng, 4, 2, 2, 6)
    X = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    f = lambda: tn.tsum(tn.mul(L.encoder_block(X, p), w))  # noqa: E731
    assert tn.grad_check(f, [X] + list(p.params().values())) < 1e-4


def test_temporal_attention_single_step():
    rng = np.random.default_rng(13)
    p = L.TemporalAttentionParams.init(rng, 3)
    H = rng.normal(size=(1, 3))
    out, alpha = L.temporal_attention(Tensor(H), p, return_weights=True)
    np.testing.assert_array_equal(alpha, [1.0])
    np.testing.assert_allclose(out.data, np.concatenate([H, H], axis=1), atol=1e-15)


def test_temporal_attention_identical_rows_uniform():
    rng = np.random.default_rng(14)
    p = L.TemporalAttentionParams.init(rng, 3)
    _, alpha = L.temporal_attention(Tensor(np.tile(rng.normal(size=3), (4, 1))), p, return_weights=True)
    np.testing.assert_allclose(alpha, 0.25, atol=1e-15)


def test_temporal_attention_gradcheck():
    rng = np.random.default_rng(15)
    p = L.TemporalAttentionParams.init(rng, 3)
    H = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(4, 6)))
    f = lambda: tn.tsum(tn.mul(L.temporal_attention(H, p), w))  # noqa: E731
    assert tn.grad_check(f, [H, p.Wa, p.ba, p.v]) < 1e-5


def test_mhsa_gradcheck():
    rng = np.random.default_rng(16)
    p = L.EncoderBlockParams.init(rng, 4, 2, 2, 6)
    X = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    f = lambda: tn.tsum(tn.mul(L.multi_head_self_attention(X, p), w))  # noqa: E731
    assert tn.grad_check(f, [X, p.Wq, p.Wk, p.Wv, p.Wo]) < 1e-5
