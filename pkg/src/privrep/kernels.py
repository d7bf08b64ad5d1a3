"""Backend selection for the hot embedding-bag kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``PRIVREP_BACKEND=python`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("PRIVREP_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "compiled"


def available_backends():
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.append("compiled")
    return names


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def _as_ragged(tokens, offsets):
    return (np.ascontiguousarray(tokens, dtype=np.int64),
            np.ascontiguousarray(offsets, dtype=np.int64))


def embedding_bag_forward(emb, tokens, offsets, mask_id, backend=None):
    """Mean of the embedding rows of each document, skipping ``mask_id``.

    Documents are given in CSR form: the tokens of document ``i`` are
    ``tokens[offsets[i]:offsets[i + 1]]``. Masked tokens contribute neither
    to the sum nor to the denominator; a document with no unmasked tokens
    pools to the zero vector. Returns ``(pooled, counts)``.
    """
    tokens, offsets = _as_ragged(tokens, offsets)
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    return get_backend(backend).embedding_bag_forward(emb, tokens, offsets, int(mask_id))


def embedding_bag_backward(grad_pooled, tokens, offsets, counts, mask_id, grad_emb,
                           backend=None):
    """Accumulate the pooling gradient into ``grad_emb`` in place."""
    tokens, offsets = _as_ragged(tokens, offsets)
    grad_pooled = np.ascontiguousarray(grad_pooled, dtype=np.float64)
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    get_backend(backend).embedding_bag_backward(
        grad_pooled, tokens, offsets, counts, int(mask_id), grad_emb)
