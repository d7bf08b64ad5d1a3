"""Pure-numpy embedding-bag kernels.

Accumulation runs in token order through ``np.add.at`` so results are
bit-identical to the compiled kernels.
"""

import numpy as np


def _segments(tokens, offsets, mask_id):
    n = len(offsets) - 1
    doc = np.repeat(np.arange(n), np.diff(offsets))
    keep = tokens != mask_id
    return doc[keep], tokens[keep], n


def embedding_bag_forward(emb, tokens, offsets, mask_id):
    doc, toks, n = _segments(tokens, offsets, mask_id)
    vocab = emb.shape[0]
    if toks.size and (toks.min() < 0 or toks.max() >= vocab):
        bad = toks[(toks < 0) | (toks >= vocab)][0]
        raise IndexError(f"token id {bad} out of range for vocabulary of {vocab}")
    out = np.zeros((n, emb.shape[1]))
    np.add.at(out, doc, emb[toks])
    counts = np.bincount(doc, minlength=n).astype(np.int64)
    nz = counts > 0
    out[nz] = out[nz] / counts[nz, None]
    return out, counts


def embedding_bag_backward(grad_pooled, tokens, offsets, counts, mask_id, grad_emb):
    doc, toks, _ = _segments(tokens, offsets, mask_id)
    if toks.size == 0:
        return
    np.add.at(grad_emb, toks, grad_pooled[doc] / counts[doc, None])
