"""Finite-difference checks for every op, layer and model variant.

Sizes are kept tiny (T <= 4, F <= 3, H <= 4, two heads of width 2) so the
whole suite runs in seconds.
"""
import numpy as np

from . import kernels
from . import layers as L
from . import models as M
from . import tensor as tn
from . import training as tr
from .tensor import Tensor, grad_check

ELEMENTWISE_TOL = 1e-6
DEFAULT_TOL = 1e-4
# Whole-model losses have entries with |g| near 1e-9, where a 1e-5 step is
# roundoff-bound, while 1e-4 can straddle a ReLU kink.  No single step suits
# every instance, so a model passes if any of these steps agrees; a wrong
# gradient disagrees at all of them.
MODEL_STEPS = (1e-5, 3e-5, 1e-4)


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _loss_weights(rng, shape):
    # a random linear functional keeps every output entry in play
    return Tensor(rng.normal(size=shape))


def _check(f_out, inputs, rng):
    w = _loss_weights(rng, f_out().shape)
    return grad_check(lambda: tn.tsum(tn.mul(f_out(), w)), inputs)


def _elementwise_cases(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(3, 4)))
    bias = Tensor(rng.normal(size=(4,)))
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    r = Tensor(_away_from_zero(rng, (3, 4)))
    c = Tensor(rng.uniform(-0.9, 0.9, size=(3, 4)) + 0.0)
    yield "add", lambda: tn.add(a, b), [a, b]
    yield "add_broadcast", lambda: tn.add(a, bias), [a, bias]
    yield "sub", lambda: tn.sub(a, b), [a, b]
    yield "mul", lambda: tn.mul(a, b), [a, b]
    yield "scale", lambda: tn.scale(a, -2.5), [a]
    yield "sigmoid", lambda: tn.sigmoid(a), [a]
    yield "tanh", lambda: tn.tanh(a), [a]
    yield "relu", lambda: tn.relu(r), [r]
    yield "exp", lambda: tn.exp(a), [a]
    yield "log", lambda: tn.log(pos), [pos]
    yield "clip", lambda: tn.clip(c, -0.5, 0.5), [c]


def _structural_cases(rng):
    A = Tensor(rng.normal(size=(3, 4)))
    B = Tensor(rng.normal(size=(4, 2)))
    Ab = Tensor(rng.normal(size=(2, 3, 4)))
    x = Tensor(rng.normal(size=(2, 5)))
    g = Tensor(rng.uniform(0.5, 1.5, size=(5,)))
    be = Tensor(rng.normal(size=(5,)))
    p = Tensor(rng.normal(size=(4, 2)))
    q = Tensor(rng.normal(size=(4, 3)))
    yield "matmul", lambda: tn.matmul(A, B), [A, B]
    yield "matmul_batched", lambda: tn.matmul(Ab, B), [Ab, B]
    yield "softmax", lambda: tn.softmax_last(x), [x]
    yield "layer_norm", lambda: tn.layer_norm(x, g, be), [x, g, be]
    yield "concat", lambda: tn.concat_last([p, q]), [p, q]
    yield "stack", lambda: tn.stack([p, p * 2.0]), [p]
    yield "getitem", lambda: p[1:3, :], [p]
    yield "transpose", lambda: tn.transpose(Ab, (1, 0, 2)), [Ab]
    yield "sum_axis", lambda: tn.tsum(Ab, 1), [Ab]


def _layer_cases(rng, T=4, F=3, H=4, width=4, heads=2, d_k=2, d_ff=6):
    X = Tensor(rng.normal(size=(T, F)))
    Xb = Tensor(rng.normal(size=(2, T, F)))
    fwd = L.LSTMParams.init(rng, F, H)
    bwd = L.LSTMParams.init(rng, F, H)
    h0 = Tensor(rng.normal(size=(H,)) * 0.5)
    c0 = Tensor(rng.normal(size=(H,)) * 0.5)
    x1 = Tensor(rng.normal(size=(F,)).reshape(1, F))
    Xw = Tensor(rng.normal(size=(T, width)))
    enc = L.EncoderBlockParams.init(rng, width, heads, d_k, d_ff)
    att = L.TemporalAttentionParams.init(rng, 3)
    Hs = Tensor(rng.normal(size=(T, 3)))
    lin = L.Linear.init(rng, F, 2)
    probs = Tensor(rng.uniform(0.05, 0.95, size=(T,)))
    labels = (rng.random(T) < 0.5).astype(float)

    def cell():
        h, c = L.lstm_cell_step(x1, h0.reshape(1, H), c0.reshape(1, H), fwd)
        return tn.concat_last([h, c])

    yield "linear", lambda: lin(X), [X, lin.W, lin.b]
    yield "lstm_cell", cell, [x1, h0, c0, fwd.W, fwd.U, fwd.b]
    for name, (kf, kb) in kernels.available_backends().items():
        xw = Tensor(rng.normal(size=(2, T, 4 * H)))
        U = Tensor(rng.normal(size=(H, 4 * H)) * 0.5)

        def scan(kf=kf, kb=kb, xw=xw, U=U):
            return _scan_with(kf, kb, xw, U)

        yield f"lstm_scan[{name}]", scan, [xw, U]
    yield "bilstm", lambda: L.bilstm_forward(Xb, fwd, bwd), [Xb, fwd.W, fwd.U, fwd.b, bwd.W, bwd.U, bwd.b]
    yield "bilstm_stepwise", lambda: L.bilstm_forward(X, fwd, bwd, stepwise=True), [X, fwd.W, fwd.U, fwd.b, bwd.W, bwd.U, bwd.b]
    yield "multi_head_attention", lambda: L.multi_head_self_attention(Xw, enc), [Xw, enc.Wq, enc.Wk, enc.Wv, enc.Wo]
    yield "encoder_block", lambda: L.encoder_block(Xw, enc), [Xw] + list(enc.params().values())
    yield "temporal_attention", lambda: L.temporal_attention(Hs, att), [Hs, att.Wa, att.ba, att.v]
    yield "bce", lambda: tr.bce_per_sample(probs, labels), [probs]


def _scan_with(kf, kb, xw, U):
    hs, cs, gates = kf(xw.data, U.data, False)

    def bw(g):
        return kb(g, U.data, hs, cs, gates, False)

    return Tensor._from_op(hs, (xw, U), bw, "lstm_scan")


def _model_cases(rng, T=4, F=3):
    X = Tensor(rng.normal(size=(2, T, F)))
    y = (rng.random((2, T)) < 0.6).astype(float)
    for v in M.VARIANTS:
        cfg = M.ModelConfig(variant=v, n_features=F, seq_len=T, hidden=3, d_model=4,
                            heads=2, d_k=2, d_ff=5, seed=int(rng.integers(1 << 30)))
        model = M.build(cfg)
        yield f"model[{v}]", (lambda m=model: tr.bce(m.forward(X), y)), list(model.params.values())


def run_suite(seed=0, h=1e-5, model_steps=MODEL_STEPS):
    """Return a list of (component, max relative error, tolerance)."""
    rng = np.random.default_rng(seed)
    out = []
    for name, f, xs in _elementwise_cases(rng):
        out.append((name, _check(f, xs, rng), ELEMENTWISE_TOL))
    for name, f, xs in list(_structural_cases(rng)) + list(_layer_cases(rng)):
        err = grad_check(f, xs, h) if f().size == 1 else _check(f, xs, rng)
        out.append((name, err, DEFAULT_TOL))
    for name, f, xs in _model_cases(rng):
        err = min(grad_check(f, xs, step) for step in model_steps)
        out.append((name, err, DEFAULT_TOL))
    return out
