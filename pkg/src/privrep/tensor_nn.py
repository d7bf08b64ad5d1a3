"""Small dense numeric core: seeded streams, layers with hand-written
backward passes, parameter sets, SGD and finite-difference checking.

Matrices are C-contiguous float64 numpy arrays of shape ``(rows, cols)``.
Every backward function returns gradients for the arguments of its
forward counterpart, in the same order.
"""

import hashlib
import math

import numpy as np

from . import kernels
from .errors import DimensionError, DivergenceError, DomainError, SchemaError

MASK64 = (1 << 64) - 1
CHECKPOINT_MAGIC = "privrep-checkpoint"
CHECKPOINT_VERSION = 1


# --- matrices -------------------------------------------------------------

def as_matrix(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {x.shape}")
    return np.ascontiguousarray(x)


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains NaN or Inf")
    return x


# --- randomness -----------------------------------------------------------

def stream_id_for(*parts):
    """Stable 64-bit stream id for a tuple of tags (e.g. purpose, record id)."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams with the same pair replay the same draws. ``draws`` counts
    the scalar variates consumed so far, which lets tests assert that
    noise is never reused.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(seq))
        self.draws = 0

    @classmethod
    def derive(cls, seed, *tags):
        return cls(seed, stream_id_for(*tags))

    def child(self, *tags):
        return RngStream(self.seed, stream_id_for(self.stream_id, *tags))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def uniform_open(self, size):
        """Uniform draws strictly inside (0, 1)."""
        k = self._gen.integers(0, 1 << 53, size=size, dtype=np.int64)
        self.draws += int(np.prod(size))
        return (k + 0.5) * (1.0 / (1 << 53))

    def uniform(self, low, high, size):
        self.draws += int(np.prod(size))
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n):
        self.draws += n
        return self._gen.permutation(n)

    def sample_without_replacement(self, n, m):
        """``m`` distinct indices from ``range(n)``, uniformly."""
        return np.sort(self.permutation(n)[:m])

    def bernoulli(self, p, size):
        self.draws += int(np.prod(size))
        return self._gen.random(size) < p

    def integers(self, low, high, size=None):
        self.draws += 1 if size is None else int(np.prod(size))
        return self._gen.integers(low, high, size=size)

    def choice(self, n, size, p=None):
        self.draws += int(np.prod(size))
        return self._gen.choice(n, size=size, p=p)


def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


# --- parameters -----------------------------------------------------------

class ParamSet:
    """Named parameters, each with a gradient buffer of the same shape."""

    def __init__(self, params=None):
        self.values = {}
        self.grads = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        value = as_matrix(value).copy()
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self):
        out = ParamSet()
        for name, value in self.values.items():
            out.values[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def load_from(self, other):
        for name in self.values:
            np.copyto(self.values[name], other.values[name])

    def equals(self, other):
        return (self.names() == other.names()
                and all(np.array_equal(self.values[n], other.values[n]) for n in self.values))

    def merged(self, prefix, other):
        """Add every parameter of ``other`` under ``prefix`` (arrays are shared)."""
        for name in other:
            self.values[prefix + name] = other.values[name]
            self.grads[prefix + name] = other.grads[name]
        return self


def sgd_step(params, lr, epoch=None, batch=None):
    """``w -= lr * grad`` for every parameter, then zero the gradients."""
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r}", epoch, batch)
    for name, w in params.values.items():
        w -= lr * params.grads[name]
    params.zero_grad()
    return params


# --- layers ---------------------------------------------------------------

def affine_forward(x, w, b):
    x, w = as_matrix(x), as_matrix(w)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise DimensionError(
            f"affine shapes do not conform: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b


def affine_backward(grad_out, x, w):
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0, keepdims=True)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def mean_pool_forward(x):
    """Mean over the rows of ``x``; returns a 1 x cols matrix."""
    x = as_matrix(x)
    return x.mean(axis=0, keepdims=True)


def mean_pool_backward(grad_out, n_rows):
    return np.repeat(as_matrix(grad_out) / n_rows, n_rows, axis=0)


def embedding_lookup_forward(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError(f"token id out of range for vocabulary of {table.shape[0]}")
    return table[ids]


def embedding_lookup_backward(grad_out, ids, grad_table):
    np.add.at(grad_table, np.asarray(ids, dtype=np.int64), grad_out)
    return grad_table


def embedding_bag_forward(table, tokens, offsets, mask_id):
    try:
        return kernels.embedding_bag_forward(table, tokens, offsets, mask_id)
    except IndexError as exc:
        raise DomainError(str(exc)) from None


def embedding_bag_backward(grad_pooled, tokens, offsets, counts, mask_id, grad_table):
    kernels.embedding_bag_backward(grad_pooled, tokens, offsets, counts, mask_id, grad_table)
    return grad_table


def softmax(logits):
    z = as_matrix(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = as_matrix(logits)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"label out of range for {n_classes} classes")
    return labels


def softmax_cross_entropy_forward(logits, labels):
    """Mean cross-entropy over the batch."""
    logits = as_matrix(logits)
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError("one label per row required")
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def softmax_cross_entropy_backward(logits, labels):
    logits = as_matrix(logits)
    labels = _check_labels(labels, logits.shape[1])
    grad = softmax(logits)
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


# --- gradient checking ----------------------------------------------------

def gradient_check(model, inputs, labels, h=1e-5, floor=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    ``model`` exposes ``params`` (a ParamSet) and ``loss(inputs, labels,
    backward=False)``, which fills ``params.grads`` when ``backward`` is
    set. Every scalar of every parameter is perturbed. The relative error
    is ``|a - n| / max(|a| + |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = model.params
    params.zero_grad()
    model.loss(inputs, labels, backward=True)
    analytic = {name: g.copy() for name, g in params.grads.items()}
    params.zero_grad()
    worst = 0.0
    for name in params:
        w = params.values[name]
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            up = model.loss(inputs, labels)
            w[idx] = orig - h
            down = model.loss(inputs, labels)
            w[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
            worst = max(worst, err)
    return worst


# --- checkpoints ----------------------------------------------------------

def write_checkpoint(fh, params, header=""):
    """Versioned text checkpoint: one ``param`` line and one value line per parameter.

    Values use Python's shortest round-trip float repr, so a reload is exact.
    """
    fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
    if header:
        if "\n" in header:
            raise ValueError("header must be a single line")
        fh.write(f"meta {header}\n")
    fh.write(f"params {len(params)}\n")
    for name in params:
        w = params.values[name]
        if " " in name:
            raise ValueError(f"parameter name {name!r} contains a space")
        fh.write(f"param {name} {w.shape[0]} {w.shape[1]}\n")
        fh.write(" ".join(repr(float(v)) for v in w.ravel()) + "\n")


def read_checkpoint(fh):
    """Inverse of :func:`write_checkpoint`; returns ``(ParamSet, header)``."""
    lines = fh.read().split("\n")
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise SchemaError("truncated checkpoint")
        pos += 1
        return lines[pos - 1]

    first = take().split()
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise SchemaError("not a privrep checkpoint")
    if int(first[1]) != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {first[1]}")
    header = ""
    line = take()
    if line.startswith("meta "):
        header = line[5:]
        line = take()
    parts = line.split()
    if len(parts) != 2 or parts[0] != "params":
        raise SchemaError(f"line {pos}: expected 'params <count>'")
    params = ParamSet()
    for _ in range(int(parts[1])):
        parts = take().split()
        if len(parts) != 4 or parts[0] != "param":
            raise SchemaError(f"line {pos}: expected 'param <name> <rows> <cols>'")
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        text = take().split()
        if len(text) != rows * cols:
            raise SchemaError(f"line {pos}: {name} needs {rows * cols} values, got {len(text)}")
        params.add(name, np.array([float(v) for v in text]).reshape(rows, cols))
    return params, header
