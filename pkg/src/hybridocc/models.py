"""The four occupancy-detector architectures and their checkpoint format.

Variants
--------
hybrid_concat
    Bi-LSTM and transformer encoder run side by side on the input; their
    per-step features are concatenated before the sigmoid head.
bilstm_then_transformer
    Bi-LSTM output (2H) -> linear adapter (F') -> encoder -> head.
transformer_then_bilstm
    Input projection -> encoder -> Bi-LSTM -> head.
bilstm_attention
    Bi-LSTM -> additive temporal attention -> head.

The transformer path always starts with a learned projection to width F'
followed by the sinusoidal position table.
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import layers as L
from . import tensor as tn
from .tensor import ShapeError, Tensor

VARIANTS = (
    "hybrid_concat",
    "bilstm_then_transformer",
    "transformer_then_bilstm",
    "bilstm_attention",
)

CHECKPOINT_MAGIC = b"HYBRIDOCC-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "hybrid_concat"
    n_features: int = 9
    seq_len: int = 24
    hidden: int = 64
    d_model: int = 64
    heads: int = 4
    d_k: int = 16
    d_ff: int = 128
    blocks: int = 1
    seed: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}"
            )
        for name in ("n_features", "seq_len", "hidden", "d_model", "heads", "d_k", "d_ff", "blocks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def uses_transformer(self):
        return self.variant != "bilstm_attention"

    def head_width(self):
        H2 = 2 * self.hidden
        return {
            "hybrid_concat": H2 + self.d_model,
            "bilstm_then_transformer": self.d_model,
            "transformer_then_bilstm": H2,
            "bilstm_attention": 2 * H2,
        }[self.variant]


def count_parameters(config):
    """Closed-form number of scalar parameters for ``config``."""
    c = config
    F, H, D = c.n_features, c.hidden, c.d_model

    def lstm(n_in):
        return 4 * H * (n_in + H + 1)

    def linear(n_in, n_out):
        return n_in * n_out + n_out

    block = 3 * D * c.heads * c.d_k + c.heads * c.d_k * D + linear(D, c.d_ff) + linear(c.d_ff, D) + 4 * D
    encoder = c.blocks * block
    head = linear(c.head_width(), 1)
    if c.variant == "hybrid_concat":
        return 2 * lstm(F) + linear(F, D) + encoder + head
    if c.variant == "bilstm_then_transformer":
        return 2 * lstm(F) + linear(2 * H, D) + encoder + head
    if c.variant == "transformer_then_bilstm":
        return linear(F, D) + encoder + 2 * lstm(D) + head
    return 2 * lstm(F) + (2 * H) * (2 * H) + 2 * H + 2 * H + head


class Model:
    """A built network.  Parameters live in ``self.params`` (ordered)."""

    def __init__(self, config):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        self.lstm_fwd = self.lstm_bwd = None
        self.proj = None
        self.blocks = []
        self.attention = None
        lstm_in = c.n_features
        if c.variant == "transformer_then_bilstm":
            lstm_in = c.d_model
        if c.variant != "transformer_then_bilstm":
            self.lstm_fwd = L.LSTMParams.init(rng, lstm_in, c.hidden)
            self.lstm_bwd = L.LSTMParams.init(rng, lstm_in, c.hidden)
        if c.uses_transformer():
            proj_in = 2 * c.hidden if c.variant == "bilstm_then_transformer" else c.n_features
            self.proj = L.Linear.init(rng, proj_in, c.d_model)
            self.blocks = [
                L.EncoderBlockParams.init(rng, c.d_model, c.heads, c.d_k, c.d_ff) for _ in range(c.blocks)
            ]
        if c.variant == "transformer_then_bilstm":
            self.lstm_fwd = L.LSTMParams.init(rng, lstm_in, c.hidden)
            self.lstm_bwd = L.LSTMParams.init(rng, lstm_in, c.hidden)
        if c.variant == "bilstm_attention":
            self.attention = L.TemporalAttentionParams.init(rng, 2 * c.hidden)
        self.head = L.Linear.init(rng, c.head_width(), 1)
        self._dropout_rng = np.random.default_rng([c.seed, 1])
        self.params = self._collect()

    def _collect(self):
        out = {}
        if self.lstm_fwd is not None:
            out.update(self.lstm_fwd.params("lstm_fwd."))
            out.update(self.lstm_bwd.params("lstm_bwd."))
        if self.proj is not None:
            out.update(self.proj.params("proj."))
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"encoder.{i}."))
        if self.attention is not None:
            out.update(self.attention.params("attention."))
        out.update(self.head.params("head."))
        return out

    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # forward pieces

    def bilstm(self, X):
        return L.bilstm_forward(X, self.lstm_fwd, self.lstm_bwd)

    def transformer(self, X):
        x = self.proj(X)
        x = tn.add(x, Tensor(L.positional_encoding(x.shape[-2], x.shape[-1])))
        for blk in self.blocks:
            x = L.encoder_block(x, blk)
        return x

    def features(self, X):
        """Per-step representation fed to the classification head."""
        v = self.config.variant
        if v == "hybrid_concat":
            return tn.concat_last([self.bilstm(X), self.transformer(X)])
        if v == "bilstm_then_transformer":
            return self.transformer(self.bilstm(X))
        if v == "transformer_then_bilstm":
            return self.bilstm(self.transformer(X))
        return L.temporal_attention(self.bilstm(X), self.attention)

    def logits(self, X, training=False):
        X = self._check_input(X)
        h = self.features(X)
        if training and self.config.dropout > 0:
            keep = 1.0 - self.config.dropout
            mask = (self._dropout_rng.random(h.shape) < keep) / keep
            h = tn.dropout_mask(h, mask)
        z = self.head(h)
        return z.reshape(z.shape[:-1])

    def forward(self, X, training=False):
        """Occupancy probabilities, shape (..., T)."""
        return tn.sigmoid(self.logits(X, training))

    __call__ = forward

    def _check_input(self, X):
        X = tn.as_tensor(X)
        c = self.config
        if X.ndim < 2 or X.shape[-1] != c.n_features or X.shape[-2] != c.seq_len:
            raise ShapeError(
                f"model expects input (..., {c.seq_len}, {c.n_features}), got {X.shape}"
            )
        return X


def build(config):
    if not isinstance(config, ModelConfig):
        config = ModelConfig(**config)
    return Model(config)


def forward(model, X):
    return model.forward(X)


def predict_proba(model, X):
    with tn.no_grad():
        return model.forward(X).data


def predict(model, X, threshold=0.5):
    """Hard labels: 1 where the probability reaches ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (predict_proba(model, X) >= threshold).astype(np.int8)


# checkpoints

def _fmt_value(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_config(kv):
    types = {f.name: f.type for f in fields(ModelConfig)}
    args = {}
    for k, v in kv.items():
        if k not in types:
            raise CheckpointError(f"unknown config key {k!r} in checkpoint")
        t = types[k]
        args[k] = v if t == "str" else float(v) if t == "float" else int(v)
    try:
        return ModelConfig(**args)
    except ConfigError as e:
        raise CheckpointError(f"invalid config in checkpoint: {e}") from None


def save(model, path, meta=None):
    """Write ``model`` (and optional flat metadata) to ``path``."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(f"version = {CHECKPOINT_VERSION}\n".encode())
    buf.write(b"[config]\n")
    for k, v in asdict(model.config).items():
        buf.write(f"{k} = {_fmt_value(v)}\n".encode())
    buf.write(b"[meta]\n")
    for k, v in (meta or {}).items():
        if isinstance(v, (list, tuple, np.ndarray)):
            v = ",".join(repr(float(x)) for x in v)
        buf.write(f"{k} = {_fmt_value(v)}\n".encode())
    buf.write(b"[params]\n")
    buf.write(f"count = {len(model.params)}\n".encode())
    buf.write(b"END-HEADER\n")
    for name, p in model.params.items():
        shape = "x".join(str(n) for n in p.shape)
        buf.write(f"{name} {shape}\n".encode())
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = buf.getvalue()
    trailer = b"END " + struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(body + trailer)


def _read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[-8:-4] != b"END ":
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated)")
    body = raw[:-8]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch)")
    end = body.find(b"END-HEADER\n")
    if end < 0:
        raise CheckpointError(f"{path}: corrupt checkpoint (no header terminator)")
    header = body[len(CHECKPOINT_MAGIC):end].decode()
    sections = {"": {}}
    cur = ""
    for line in header.splitlines():
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1]
            sections[cur] = {}
            continue
        k, sep, v = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"{path}: corrupt header line {line!r}")
        sections[cur][k] = v
    version = int(sections[""].get("version", -1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    blobs = {}
    pos = end + len(b"END-HEADER\n")
    for _ in range(int(sections["params"]["count"])):
        nl = body.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: corrupt checkpoint (parameter record)")
        name, shape_s = body[pos:nl].decode().split(" ")
        shape = tuple(int(s) for s in shape_s.split("x"))
        nbytes = 8 * int(np.prod(shape))
        data = body[nl + 1:nl + 1 + nbytes]
        if len(data) != nbytes:
            raise CheckpointError(f"{path}: corrupt checkpoint (short blob for {name})")
        blobs[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
        pos = nl + 1 + nbytes
    if pos != len(body):
        raise CheckpointError(f"{path}: corrupt checkpoint (trailing bytes)")
    return sections, blobs


def load(path, expected=None):
    """Read a checkpoint.  Returns ``(model, meta)``.

    ``expected`` may be a ModelConfig or a variant name; a checkpoint for a
    different variant is rejected.
    """
    sections, blobs = _read_checkpoint(path)
    config = _parse_config(sections["config"])
    if expected is not None:
        want = expected if isinstance(expected, str) else expected.variant
        if want != config.variant:
            raise CheckpointError(
                f"{path}: checkpoint holds variant {config.variant!r}, expected {want!r}"
            )
    model = build(config)
    for name, p in model.params.items():
        if name not in blobs:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if blobs[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {blobs[name].shape}, expected {p.shape}"
            )
    extra = set(blobs) - set(model.params)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
    for name, p in model.params.items():
        p.data[...] = blobs[name]
    return model, dict(sections.get("meta", {}))


def with_seed(config, seed):
    return replace(config, seed=seed)
