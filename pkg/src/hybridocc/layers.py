"""Network building blocks: linear maps, (Bi-)LSTM, sinusoidal positions,
multi-head self-attention, the post-norm encoder block and additive
temporal attention.

All layers accept inputs with arbitrary leading batch axes, ``(..., T, F)``.
Parameters are plain Tensors grouped in small dataclasses; ``params()``
returns them as an ordered name -> Tensor dict.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from . import tensor as tn
from .tensor import ShapeError, Tensor


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class _Params:
    def params(self, prefix=""):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                out[prefix + f.name] = v
            elif isinstance(v, _Params):
                out.update(v.params(f"{prefix}{f.name}."))
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    out.update(item.params(f"{prefix}{f.name}.{i}."))
        return out


@dataclass
class Linear(_Params):
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, n_in, n_out):
        return cls(uniform_init(rng, (n_in, n_out), n_in), uniform_init(rng, (n_out,), n_in))

    def __post_init__(self):
        if self.W.shape[-1] != self.b.shape[0]:
            raise ShapeError(f"Linear: W {self.W.shape} does not match b {self.b.shape}")

    def __call__(self, x):
        return tn.add(tn.matmul(x, self.W), self.b)


# LSTM

@dataclass
class LSTMParams(_Params):
    """One direction of an LSTM.  Gates are packed [i, f, g, o] along the
    last axis of ``W`` (F x 4H), ``U`` (H x 4H) and ``b`` (4H)."""

    W: Tensor
    U: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, n_in, hidden, forget_bias=1.0):
        W = uniform_init(rng, (n_in, 4 * hidden), n_in)
        U = uniform_init(rng, (hidden, 4 * hidden), hidden)
        b = uniform_init(rng, (4 * hidden,), hidden)
        b.data[hidden:2 * hidden] = forget_bias
        return cls(W, U, b)

    @property
    def hidden(self):
        return self.U.shape[0]

    def gate(self, name):
        """Per-gate (W, U, b) views as numpy arrays; name in 'ifgo'."""
        k = "ifgo".index(name)
        H = self.hidden
        sl = slice(k * H, (k + 1) * H)
        return self.W.data[:, sl], self.U.data[:, sl], self.b.data[sl]


def lstm_cell_step(x_t, h_prev, c_prev, p):
    """One LSTM step built only from autodiff primitives.

    Shapes: x_t (..., F), h_prev and c_prev (..., H).  Returns (h_t, c_t).
    """
    H = p.hidden
    if x_t.shape[-1] != p.W.shape[0] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError(
            f"lstm_cell_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"do not fit W {p.W.shape}, U {p.U.shape}"
        )
    if x_t.ndim == 1:
        h, c = lstm_cell_step(x_t.reshape(1, -1), h_prev.reshape(1, H), c_prev.reshape(1, H), p)
        return h.reshape(H), c.reshape(H)
    z =tn.add(tn.add(tn.matmul(x_t, p.W), tn.matmul(h_prev, p.U)), p.b)
    i = tn.sigmoid(z[..., :H])
    f = tn.sigmoid(z[..., H:2 * H])
    g = tn.tanh(z[..., 2 * H:3 * H])
    o = tn.sigmoid(z[..., 3 * H:])
    c = tn.add(tn.mul(f, c_prev), tn.mul(i, g))
    h = tn.mul(o, tn.tanh(c))
    return h, c


def lstm_scan(xw, U, reverse=False):
    """Differentiable recurrence over pre-projected inputs ``xw`` (B, T, 4H).

    Forward and backward run in the selected kernel backend.
    """
    hs, cs, gates = kernels.lstm_scan_forward(xw.data, U.data, reverse)

    def bw(g):
        dxw, dU = kernels.lstm_scan_backward(g, U.data, hs, cs, gates, reverse)
        return dxw, dU

    return Tensor._from_op(hs, (xw, U), bw, "lstm_scan")


def lstm_sequence(X, p, reverse=False):
    """Hidden states for every step of X (..., T, F), zero initial state."""
    if X.shape[-1] != p.W.shape[0]:
        raise ShapeError(f"lstm: input width {X.shape[-1]} but W is {p.W.shape}")
    lead = X.shape[:-2]
    T = X.shape[-2]
    xw = tn.add(tn.matmul(X, p.W), p.b)
    xw = xw.reshape((-1, T, 4 * p.hidden))
    hs = lstm_scan(xw, p.U, reverse)
    return hs.reshape(lead + (T, p.hidden))


def lstm_sequence_stepwise(X, p, reverse=False):
    """Same result as ``lstm_sequence`` via repeated ``lstm_cell_step``."""
    T = X.shape[-2]
    lead = X.shape[:-2]
    h = Tensor(np.zeros(lead + (p.hidden,)))
    c = Tensor(np.zeros(lead + (p.hidden,)))
    out = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        h, c = lstm_cell_step(X[..., t, :], h, c, p)
        out[t] = h
    return tn.stack(out, axis=-2)


def bilstm_forward(X, fwd, bwd, stepwise=False):
    """Concat of forward-scan and backward-scan hidden states, width 2H."""
    if X.shape[-2] < 1:
        raise ValueError("bilstm_forward: empty sequence")
    run = lstm_sequence_stepwise if stepwise else lstm_sequence
    return tn.concat_last([run(X, fwd, False), run(X, bwd, True)])


# transformer encoder

@functools.lru_cache(maxsize=64)
def _pe_table(T, width):
    pos = np.arange(T, dtype=np.float64)[:, None]
    m2 = np.arange(0, width, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, m2 / width)
    pe = np.empty((T, width))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : width // 2])
    pe.setflags(write=False)
    return pe


def positional_encoding(T, width):
    """Fixed sinusoidal table (T, width): sin on even columns, cos on odd."""
    if T < 1 or width < 1:
        raise ValueError("positional_encoding: T and width must be >= 1")
    return _pe_table(int(T), int(width)).copy()


@dataclass
class EncoderBlockParams(_Params):
    """Attention projections are stored packed: column block u of Wq/Wk/Wv
    (width d_k) is head u's projection matrix."""

    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    ffn1: Linear
    ffn2: Linear
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    heads: int
    d_k: int

    @classmethod
    def init(cls, rng, width, heads, d_k, d_ff):
        hd = heads * d_k
        return cls(
            Wq=uniform_init(rng, (width, hd), width),
            Wk=uniform_init(rng, (width, hd), width),
            Wv=uniform_init(rng, (width, hd), width),
            Wo=uniform_init(rng, (hd, width), hd),
            ffn1=Linear.init(rng, width, d_ff),
            ffn2=Linear.init(rng, d_ff, width),
            ln1_gamma=Tensor(np.ones(width), requires_grad=True),
            ln1_beta=Tensor(np.zeros(width), requires_grad=True),
            ln2_gamma=Tensor(np.ones(width), requires_grad=True),
            ln2_beta=Tensor(np.zeros(width), requires_grad=True),
            heads=heads,
            d_k=d_k,
        )

    def head_weights(self, u):
        sl = slice(u * self.d_k, (u + 1) * self.d_k)
        return self.Wq.data[:, sl], self.Wk.data[:, sl], self.Wv.data[:, sl]


def _split_heads(x, heads, d_k):
    # (..., T, U*d_k) -> (..., U, T, d_k)
    lead = x.shape[:-2]
    T = x.shape[-2]
    x = x.reshape(lead + (T, heads, d_k))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return tn.transpose(x, axes)


def _merge_heads(x):
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = tn.transpose(x, axes)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def multi_head_self_attention(X, p, return_weights=False):
    """Unmasked scaled dot-product attention over all U heads, then W^O.

    With ``return_weights`` also returns the (..., U, T, T) numpy array of
    attention probabilities.
    """
    width = p.Wq.shape[0]
    if X.shape[-1] != width:
        raise ShapeError(f"attention: input width {X.shape[-1]} but Wq is {p.Wq.shape}")
    Q = _split_heads(tn.matmul(X, p.Wq), p.heads, p.d_k)
    K = _split_heads(tn.matmul(X, p.Wk), p.heads, p.d_k)
    V = _split_heads(tn.matmul(X, p.Wv), p.heads, p.d_k)
    logits = tn.scale(tn.matmul(Q, tn.transpose(K)), 1.0 / math.sqrt(p.d_k))
    A = tn.softmax_last(logits)
    heads = tn.matmul(A, V)
    out = tn.matmul(_merge_heads(heads), p.Wo)
    if return_weights:
        return out, A.data
    return out


def feed_forward(X, p):
    return p.ffn2(tn.relu(p.ffn1(X)))


def encoder_block(X, p, eps=1e-5):
    """Post-norm block: LN(X + MHSA(X)), then LN(. + FFN(.))."""
    x2 = tn.layer_norm(tn.add(X, multi_head_self_attention(X, p)), p.ln1_gamma, p.ln1_beta, eps)
    return tn.layer_norm(tn.add(x2, feed_forward(x2, p)), p.ln2_gamma, p.ln2_beta, eps)


# baseline attention

@dataclass
class TemporalAttentionParams(_Params):
    Wa: Tensor
    ba: Tensor
    v: Tensor

    @classmethod
    def init(cls, rng, width):
        return cls(
            Wa=uniform_init(rng, (width, width), width),
            ba=uniform_init(rng, (width,), width),
            v=uniform_init(rng, (width, 1), width),
        )


def temporal_attention(H, p, return_weights=False):
    """Additive attention over time steps.

    score_t = v . tanh(H_t Wa + ba); alpha = softmax over t;
    context = sum_t alpha_t H_t; row t of the output is [H_t, context].
    """
    T = H.shape[-2]
    scores = tn.matmul(tn.tanh(tn.add(tn.matmul(H, p.Wa), p.ba)), p.v)  # (..., T, 1)
    n = scores.ndim
    alpha = tn.softmax_last(tn.transpose(scores, tuple(range(n - 2)) + (n - 1, n - 2)))  # (..., 1, T)
    context = tn.matmul(alpha, H)  # (..., 1, D)
    ones = Tensor(np.ones(H.shape[:-2] + (T, 1)))
    out = tn.concat_last([H, tn.matmul(ones, context)])
    if return_weights:
        return out, alpha.data[..., 0, :]
    return out
