"""Split model: client-side feature extractor and server-side classifier head."""

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Vocabulary
from .dp import MASK_ID, PrivacyParams, normalize_minmax_rows, normalize_minmax_rows_backward
from .errors import DimensionError, DomainError, SchemaError
from .tensor_nn import (
    ParamSet, RngStream, affine_backward, affine_forward, embedding_bag_backward,
    embedding_bag_forward, glorot_uniform, read_checkpoint, relu_backward, relu_forward,
    softmax, softmax_cross_entropy_backward, softmax_cross_entropy_forward, write_checkpoint,
)

BUNDLE_KIND = "privrep-model-bundle"


def ragged(docs):
    """CSR encoding (tokens, offsets) of a list of documents or token sequences."""
    seqs = [d.tokens if hasattr(d, "tokens") else d for d in docs]
    lengths = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    if offsets[-1]:
        tokens = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=int(offsets[-1]))
    else:
        tokens = np.zeros(0, dtype=np.int64)
    return tokens, offsets


class FeatureExtractor:
    """embedding -> masked mean pool -> affine -> ReLU.

    The MASK row of the embedding table is zero and excluded from the
    pooling denominator; an all-MASK document pools to zeros.
    """

    def __init__(self, vocab_size, embed_dim=32, rep_dim=64, rng=None, params=None):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.rep_dim = rep_dim
        if params is None:
            rng = rng or RngStream(0)
            emb = glorot_uniform(rng, vocab_size, embed_dim)
            emb[MASK_ID] = 0.0
            params = ParamSet({"embedding": emb,
                               "w": glorot_uniform(rng, embed_dim, rep_dim),
                               "b": np.zeros((1, rep_dim))})
        self.params = params

    def forward(self, docs):
        tokens, offsets = ragged(docs)
        pooled, counts = embedding_bag_forward(self.params["embedding"], tokens, offsets, MASK_ID)
        pre = affine_forward(pooled, self.params["w"], self.params["b"])
        return relu_forward(pre), (tokens, offsets, counts, pooled, pre)

    def backward(self, grad_rep, cache):
        tokens, offsets, counts, pooled, pre = cache
        g_pre = relu_backward(grad_rep, pre)
        g_pooled, g_w, g_b = affine_backward(g_pre, pooled, self.params["w"])
        self.params.grads["w"] += g_w
        self.params.grads["b"] += g_b
        embedding_bag_backward(g_pooled, tokens, offsets, counts, MASK_ID,
                               self.params.grads["embedding"])

    def extract_batch(self, docs):
        for d in docs:
            toks = getattr(d, "tokens", d)
            if len(toks) and (min(toks) < 0 or max(toks) >= self.vocab_size):
                raise DomainError(f"record {getattr(d, 'record_id', '?')}: token id out of range")
        return self.forward(docs)[0]


def extract(f, doc):
    """Raw (pre-normalization) representation of one document."""
    return f.extract_batch([doc])[0]


class ClassifierHead:
    def __init__(self, rep_dim, num_classes, rng=None, params=None):
        self.rep_dim = rep_dim
        self.num_classes = num_classes
        if params is None:
            rng = rng or RngStream(0)
            params = ParamSet({"w": glorot_uniform(rng, rep_dim, num_classes),
                               "b": np.zeros((1, num_classes))})
        self.params = params

    def logits(self, reps):
        reps = np.asarray(reps, dtype=np.float64)
        if reps.ndim == 1:
            reps = reps[None, :]
        if reps.shape[1] != self.rep_dim:
            raise DimensionError(f"head expects {self.rep_dim} inputs, got {reps.shape[1]}")
        return affine_forward(reps, self.params["w"], self.params["b"])

    def backward(self, grad_logits, reps):
        g_x, g_w, g_b = affine_backward(grad_logits, reps, self.params["w"])
        self.params.grads["w"] += g_w
        self.params.grads["b"] += g_b
        return g_x

    def predict_proba(self, reps):
        return softmax(self.logits(reps))


def classify(c, rep):
    """Class probabilities for one (possibly privatized) representation."""
    values = getattr(rep, "values", rep)
    return c.predict_proba(np.asarray(values, dtype=np.float64))[0]


class SplitModel:
    """Extractor and head trained end to end.

    ``normalize`` inserts row-wise min-max normalization between the two
    halves. ``noise`` (an array added after normalization) is how robust
    training injects Laplace draws; it is an argument rather than internal
    state so finite-difference checks see a fixed function.
    """

    def __init__(self, extractor, head, normalize=False, rep_dropout=0.0):
        if extractor.rep_dim != head.rep_dim:
            raise DimensionError("extractor and head disagree on representation size")
        self.extractor = extractor
        self.head = head
        self.normalize = normalize
        self.rep_dropout = rep_dropout
        self.params = ParamSet().merged("f.", extractor.params).merged("c.", head.params)

    def representations(self, docs):
        rep, _ = self.extractor.forward(docs)
        if self.normalize:
            rep, _ = normalize_minmax_rows(rep)
        return rep

    def loss(self, docs, labels, backward=False, noise=None, dropout_rng=None):
        rep, f_cache = self.extractor.forward(docs)
        n_cache = None
        if self.normalize:
            rep, n_cache = normalize_minmax_rows(rep)
        x = rep if noise is None else rep + noise
        keep = None
        if dropout_rng is not None and self.rep_dropout > 0:
            keep = (dropout_rng.uniform_open(x.shape) >= self.rep_dropout) / (1 - self.rep_dropout)
            x = x * keep
        logits = self.head.logits(x)
        loss = softmax_cross_entropy_forward(logits, labels)
        if backward:
            g = self.head.backward(softmax_cross_entropy_backward(logits, labels), x)
            if keep is not None:
                g = g * keep
            if n_cache is not None:
                g = normalize_minmax_rows_backward(g, n_cache)
            self.extractor.backward(g, f_cache)
        return loss


@dataclass
class ModelBundle:
    extractor: FeatureExtractor
    head: ClassifierHead
    vocabulary: Vocabulary
    training_params: PrivacyParams = field(default_factory=PrivacyParams.non_private)
    normalized: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.extractor.rep_dim != self.head.rep_dim:
            raise DimensionError("extractor and head disagree on representation size")

    @classmethod
    def initialize(cls, vocabulary, num_classes, seed=0, embed_dim=32, rep_dim=64, **kw):
        rng = RngStream.derive(seed, "init")
        f = FeatureExtractor(len(vocabulary), embed_dim, rep_dim, rng=rng)
        c = ClassifierHead(rep_dim, num_classes, rng=rng)
        return cls(f, c, vocabulary, **kw)

    def split_model(self, rep_dropout=0.0):
        return SplitModel(self.extractor, self.head, self.normalized, rep_dropout)

    def copy(self):
        f = FeatureExtractor(self.extractor.vocab_size, self.extractor.embed_dim,
                             self.extractor.rep_dim, params=self.extractor.params.copy())
        c = ClassifierHead(self.head.rep_dim, self.head.num_classes, params=self.head.params.copy())
        return ModelBundle(f, c, self.vocabulary, self.training_params, self.normalized,
                           dict(self.metadata))

    def all_params(self):
        return ParamSet().merged("f.", self.extractor.params).merged("c.", self.head.params)

    def equals(self, other):
        return (self.all_params().equals(other.all_params())
                and self.training_params == other.training_params
                and self.normalized == other.normalized)

    def save(self, path):
        tp = self.training_params
        meta = {
            "kind": BUNDLE_KIND,
            "embed_dim": self.extractor.embed_dim,
            "rep_dim": self.extractor.rep_dim,
            "num_classes": self.head.num_classes,
            "normalized": self.normalized,
            "training_params": {"epsilon": repr(tp.epsilon), "mu": tp.mu,
                                "sensitivity": tp.sensitivity},
            "metadata": self.metadata,
            "vocabulary": self.vocabulary.words,
        }
        with open(path, "w", encoding="utf-8") as fh:
            write_checkpoint(fh, self.all_params(), json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            params, header = read_checkpoint(fh)
        try:
            meta = json.loads(header)
        except json.JSONDecodeError:
            raise SchemaError(f"{path}: bad bundle metadata") from None
        if meta.get("kind") != BUNDLE_KIND:
            raise SchemaError(f"{path}: not a model bundle")
        vocab = Vocabulary(meta["vocabulary"])
        f_params, c_params = ParamSet(), ParamSet()
        for name in params:
            target = f_params if name.startswith("f.") else c_params
            target.values[name[2:]] = params.values[name]
            target.grads[name[2:]] = params.grads[name]
        f = FeatureExtractor(len(vocab), meta["embed_dim"], meta["rep_dim"], params=f_params)
        c = ClassifierHead(meta["rep_dim"], meta["num_classes"], params=c_params)
        tp = meta["training_params"]
        training = PrivacyParams(float(tp["epsilon"]), tp["mu"], tp["sensitivity"])
        return cls(f, c, vocab, training, meta["normalized"], meta["metadata"])
