"""Loss, optimizer and the mini-batch training loop."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .models import ConfigError
from .tensor import Tensor

PROB_CLAMP = 1e-7


class NumericAbort(RuntimeError):
    """Raised when a gradient or loss turns non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.clip_norm < 0 or self.patience < 0:
            raise ConfigError("clip_norm and patience must be >= 0")


@dataclass
class TrainTrace:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.train_loss)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "seconds"])
            for i, loss in enumerate(self.train_loss):
                vl = self.val_loss[i] if i < len(self.val_loss) else ""
                va = self.val_acc[i] if i < len(self.val_acc) else ""
                w.writerow([i + 1, repr(loss), repr(vl) if vl != "" else "",
                            repr(va) if va != "" else "", f"{self.seconds[i]:.3f}"])


def bce(probs, labels):
    """Mean binary cross-entropy over every entry of ``probs``.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ValueError(f"bce: predictions {probs.shape} vs labels {y.shape}")
    p = tn.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = tn.add(tn.mul(Tensor(y), tn.log(p)), tn.mul(Tensor(1.0 - y), tn.log(tn.sub(1.0, p))))
    return tn.scale(tn.tsum(terms), -1.0 / y.size)


def bce_per_sample(probs, labels):
    """Loss of one sequence: probs (T,), labels (T,)."""
    if probs.ndim != 1:
        raise ValueError(f"bce_per_sample expects a 1-D prediction, got {probs.shape}")
    return bce(probs, labels)


def stack_samples(samples):
    X = np.stack([s.X for s in samples])
    y = np.stack([s.y for s in samples]).astype(np.float64)
    return X, y


def dataset_loss(model, samples):
    """Mean over samples of the per-sample loss (a differentiable scalar)."""
    if not samples:
        raise ValueError("dataset_loss: empty sample set")
    X, y = stack_samples(samples)
    # equal T per sample, so the mean over all entries is the mean of per-sample means
    return bce(model.forward(Tensor(X)), y)


class Adam:
    """Adaptive-moment optimizer over a name -> Tensor dict, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=0.0):
        self.params = params
        self.learning_rate, self.beta1, self.beta2, self.adam_eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.state = {}

    def step(self):
        values = {k: p.data for k, p in self.params.items()}
        grads = {k: np.zeros_like(p.data) if p.grad is None else p.grad for k, p in self.params.items()}
        new, self.state = optimizer_step(values, grads, self.state, self)
        for k, p in self.params.items():
            p.data[...] = new[k]


def optimizer_step(params, grads, state, config):
    """One bias-corrected Adam update with optional global-norm clipping.

    ``params`` and ``grads`` map names to arrays; ``state`` holds m, v and
    the step count (pass an empty dict the first time).  ``config`` needs
    learning_rate, beta1, beta2, adam_eps and clip_norm attributes.
    Returns the new parameter arrays and the state.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient in parameter {k}")
    if not state:
        state.update(m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()}, step=0)
    if config.clip_norm > 0:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > config.clip_norm:
            grads = {k: g * (config.clip_norm / norm) for k, g in grads.items()}
    state["step"] += 1
    t = state["step"]
    b1, b2 = config.beta1, config.beta2
    out = {}
    for k, w in params.items():
        g = grads[k]
        state["m"][k] = b1 * state["m"][k] + (1 - b1) * g
        state["v"][k] = b2 * state["v"][k] + (1 - b2) * g * g
        mhat = state["m"][k] / (1 - b1 ** t)
        vhat = state["v"][k] / (1 - b2 ** t)
        out[k] = w - config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)
    return out, state


def evaluate_loss(model, samples, batch_size=256):
    """Mean loss and per-step accuracy without building a graph."""
    total, correct, n = 0.0, 0, 0
    with tn.no_grad():
        for i in range(0, len(samples), batch_size):
            X, y = stack_samples(samples[i:i + batch_size])
            p = model.forward(Tensor(X))
            total += float(bce(p, y).data) * len(X)
            correct += int(((p.data >= 0.5) == (y >= 0.5)).sum())
            n += y.size
    return total / len(samples), correct / n


def fit(model, train_samples, val_samples=None, tc=None, log=None):
    """Train ``model`` in place.  Returns a TrainTrace.

    Each epoch reshuffles the training set with a seeded generator.  When
    validation samples are given and ``tc.patience`` > 0, training stops
    after ``patience`` epochs without validation improvement and the best
    parameters are restored.
    """
    tc = tc or TrainConfig()
    if not train_samples:
        raise ValueError("fit: empty training set")
    rng = np.random.default_rng(tc.seed)
    opt = Adam(model.params, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps, tc.clip_norm)
    trace = TrainTrace()
    best, best_params, bad = math.inf, None, 0
    n = len(train_samples)
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        weighted = 0.0
        for start in range(0, n, tc.batch_size):
            batch = [train_samples[j] for j in order[start:start + tc.batch_size]]
            X, y = stack_samples(batch)
            model.zero_grad()
            loss = bce(model.forward(Tensor(X), training=True), y)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise NumericAbort(f"non-finite loss at epoch {epoch + 1}")
            tn.backward(loss)
            opt.step()
            weighted += lv * len(batch)
        trace.train_loss.append(weighted / n)
        if val_samples:
            vl, va = evaluate_loss(model, val_samples)
            trace.val_loss.append(vl)
            trace.val_acc.append(va)
        trace.seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(epoch + 1, trace)
        if val_samples and tc.patience > 0:
            if trace.val_loss[-1] < best:
                best, bad = trace.val_loss[-1], 0
                best_params = {k: p.data.copy() for k, p in model.params.items()}
            else:
                bad += 1
                if bad >= tc.patience:
                    trace.stopped_early = True
                    break
    if best_params is not None:
        for k, p in model.params.items():
            p.data[...] = best_params[k]
    model.zero_grad()
    return trace
