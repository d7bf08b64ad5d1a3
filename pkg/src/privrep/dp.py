"""Laplace mechanism, min-max normalization, word dropout and the
dropout-amplified privacy budget."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError, SensitivityError

MASK_ID = 0


def epsilon_effective(epsilon, mu):
    """Budget after masking a fraction ``mu`` of words: ``ln((1-mu) e^eps + mu)``.

    ``epsilon`` may be ``inf`` (no noise), in which case the result is
    ``inf`` unless every word is masked.
    """
    if not (epsilon > 0):
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if not (0.0 <= mu <= 1.0):
        raise ParameterError(f"mu must lie in [0, 1], got {mu}")
    if mu == 1.0:
        return 0.0
    if mu == 0.0:
        return float(epsilon)
    if math.isinf(epsilon):
        return math.inf
    # log1p form: ln(e^eps - mu(e^eps - 1)) = eps + ln(1 - mu(1 - e^-eps))
    return float(epsilon + math.log1p(-mu * -math.expm1(-epsilon)))


@dataclass(frozen=True)
class PrivacyParams:
    """Privacy settings for one release. ``scale`` and ``epsilon_effective``
    are derived and cannot be passed in."""

    epsilon: float
    mu: float = 0.0
    sensitivity: float = 1.0
    delta: float = 0.0
    scale: float = field(init=False)
    epsilon_effective: float = field(init=False)

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 <= self.mu <= 1.0):
            raise ParameterError(f"mu must lie in [0, 1], got {self.mu}")
        if not (self.sensitivity > 0) or math.isinf(self.sensitivity):
            raise ParameterError(f"sensitivity must be positive and finite, got {self.sensitivity}")
        if self.delta != 0:
            raise ParameterError("only pure epsilon-DP (delta = 0) is supported")
        object.__setattr__(self, "scale", self.sensitivity / self.epsilon)
        object.__setattr__(self, "epsilon_effective", epsilon_effective(self.epsilon, self.mu))

    @classmethod
    def non_private(cls, mu=0.0):
        """The epsilon = inf sentinel: zero noise scale."""
        return cls(math.inf, mu)

    @property
    def is_private(self):
        return not math.isinf(self.epsilon)

    def to_dict(self):
        return {"epsilon": self.epsilon, "mu": self.mu, "sensitivity": self.sensitivity,
                "delta": self.delta}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["epsilon"]), float(d.get("mu", 0.0)),
                   float(d.get("sensitivity", 1.0)), float(d.get("delta", 0.0)))


# --- Laplace noise --------------------------------------------------------

def laplace_inverse_cdf(u, b):
    """Map uniforms in (0, 1) to Laplace(0, b) variates."""
    c = np.asarray(u, dtype=np.float64) - 0.5
    return -b * np.sign(c) * np.log1p(-2.0 * np.abs(c))


def sample_laplace(rng, b, k):
    """``k`` i.i.d. Laplace(0, b) draws by inverse CDF from ``rng``."""
    if not (b > 0) or math.isinf(b):
        raise ParameterError(f"Laplace scale must be positive and finite, got {b}")
    if k < 1:
        raise ParameterError(f"need at least one draw, got k={k}")
    return laplace_inverse_cdf(rng.uniform_open(k), b)


def sample_laplace_matrix(rng, b, rows, cols):
    if rows * cols == 0:
        return np.zeros((rows, cols))
    return sample_laplace(rng, b, rows * cols).reshape(rows, cols)


# --- normalization and perturbation ---------------------------------------

def normalize_minmax(x):
    """Rescale to [0, 1] by ``(x - min) / (max - min)``; constant input maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise DomainError("cannot normalize a representation containing NaN")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def normalize_minmax_rows(x):
    """Row-wise :func:`normalize_minmax` for a batch; also returns the cache
    needed by :func:`normalize_minmax_rows_backward`."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise DomainError("cannot normalize a representation containing NaN")
    lo_idx = x.argmin(axis=1)
    hi_idx = x.argmax(axis=1)
    rows = np.arange(x.shape[0])
    lo, hi = x[rows, lo_idx], x[rows, hi_idx]
    rng = hi - lo
    flat = rng == 0
    safe = np.where(flat, 1.0, rng)
    y = (x - lo[:, None]) / safe[:, None]
    y[flat] = 0.0
    return y, (y, lo_idx, hi_idx, safe, flat)


def normalize_minmax_rows_backward(grad_y, cache):
    """Gradient through row-wise min-max (min and max are the argmin/argmax entries)."""
    y, lo_idx, hi_idx, safe, flat = cache
    rows = np.arange(y.shape[0])
    g = grad_y / safe[:, None]
    s = g.sum(axis=1)
    t = (g * y).sum(axis=1)
    grad_x = g.copy()
    np.add.at(grad_x, (rows, lo_idx), -s + t)
    np.add.at(grad_x, (rows, hi_idx), -t)
    grad_x[flat] = 0.0
    return grad_x


def check_unit_range(x):
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any() or x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise SensitivityError(
            "Laplace mechanism input must lie in [0, 1]; normalize before perturbing")
    return x


def perturb(x, params, rng):
    """``x + r`` with ``r_i ~ Laplace(0, params.scale)``; no clipping afterwards.

    With the non-private sentinel (``scale == 0``) the input is returned
    unchanged and no randomness is consumed.
    """
    x = check_unit_range(x)
    if params.scale == 0:
        return x.copy()
    return x + sample_laplace(rng, params.scale, x.size).reshape(x.shape)


def dp_ratio_certificate(x, x_adj, output, params):
    """Exact log density ratio ``ln p(o | x) - ln p(o | x_adj)`` of the Laplace mechanism."""
    x = check_unit_range(x)
    x_adj = check_unit_range(x_adj)
    o = np.asarray(output, dtype=np.float64)
    return float(np.sum(np.abs(o - x_adj) - np.abs(o - x)) / params.scale)


# --- word dropout ---------------------------------------------------------

def mask_count(d, mu):
    """Number of masked words: ``d * mu`` rounded to nearest, ties up."""
    if not (0.0 <= mu <= 1.0):
        raise ParameterError(f"mu must lie in [0, 1], got {mu}")
    return min(d, int(math.floor(d * mu + 0.5)))


@dataclass(frozen=True)
class MaskVector:
    length: int
    zero_positions: frozenset

    def __post_init__(self):
        object.__setattr__(self, "zero_positions", frozenset(int(i) for i in self.zero_positions))
        if any(i < 0 or i >= self.length for i in self.zero_positions):
            raise ParameterError("mask positions must lie in [0, length)")

    def keep(self):
        """The 0/1 keep vector (1 = word survives)."""
        out = np.ones(self.length, dtype=np.int8)
        out[list(self.zero_positions)] = 0
        return out


def random_mask(d, mu, rng):
    m = mask_count(d, mu)
    if m == 0:
        return MaskVector(d, frozenset())
    return MaskVector(d, frozenset(rng.sample_without_replacement(d, m).tolist()))


def apply_mask(tokens, mask):
    tokens = np.asarray(tokens, dtype=np.int64)
    if mask.length != len(tokens):
        raise ParameterError(f"mask length {mask.length} != document length {len(tokens)}")
    out = tokens.copy()
    out[list(mask.zero_positions)] = MASK_ID
    return out


def word_dropout(doc, mu, rng, user_mask=None):
    """Copy of ``doc`` with masked words replaced by the reserved MASK id.

    Without ``user_mask``, ``mask_count(d, mu)`` positions are chosen
    uniformly without replacement.
    """
    d = len(doc.tokens)
    mask = user_mask if user_mask is not None else random_mask(d, mu, rng)
    return doc.replace_tokens(apply_mask(doc.tokens, mask))
