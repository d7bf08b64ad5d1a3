"""Corpus ingestion, vocabulary, deterministic 8:1:1 splits and the
synthetic corpus generator."""

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dp import MASK_ID
from .errors import ParameterError, ParseError, SchemaError
from .tensor_nn import RngStream

UNK_ID = 1
N_RESERVED = 2
DEFAULT_VOCAB_CAP = 10_000
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class Document:
    record_id: str
    tokens: tuple
    main_label: int
    private_attributes: dict = field(default_factory=dict, compare=True)
    subgroups: dict = field(default_factory=dict, compare=True)

    def replace_tokens(self, tokens):
        return replace(self, tokens=tuple(int(t) for t in tokens))

    def __hash__(self):
        return hash((self.record_id, self.tokens, self.main_label))


def tokenize(text):
    return text.lower().split()


class Vocabulary:
    """Word to id map. Ids 0 and 1 are the reserved MASK and UNK entries,
    which no input word can produce."""

    def __init__(self, words):
        self.words = list(words)
        self.index = {w: i + N_RESERVED for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise SchemaError("duplicate word in vocabulary")

    @classmethod
    def build(cls, texts, cap=DEFAULT_VOCAB_CAP):
        counts = Counter(w for t in texts for w in tokenize(t))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(w for w, _ in ranked[:cap])

    def __len__(self):
        return len(self.words) + N_RESERVED

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.words == other.words

    def encode(self, text):
        return tuple(self.index.get(w, UNK_ID) for w in tokenize(text))


@dataclass
class Corpus:
    vocabulary: Vocabulary
    documents: list
    num_classes: int
    attributes: list
    entities: list = field(default_factory=list)
    split_of: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [d for d in self.documents if self.split_of[d.record_id] == name]

    def by_id(self):
        return {d.record_id: d for d in self.documents}

    def __eq__(self, other):
        return (isinstance(other, Corpus) and self.vocabulary == other.vocabulary
                and self.documents == other.documents and self.split_of == other.split_of
                and self.num_classes == other.num_classes)


def split_sizes(n):
    n_train = int(math.floor(0.8 * n + 0.5))
    n_dev = min(n - n_train, int(math.floor(0.1 * n + 0.5)))
    return n_train, n_dev, n - n_train - n_dev


def assign_splits(record_ids, seed):
    """Seeded 8:1:1 partition of ``record_ids``; returns id -> split name."""
    n_train, n_dev, _ = split_sizes(len(record_ids))
    order = RngStream.derive(seed, "split").permutation(len(record_ids))
    out = {}
    for rank, i in enumerate(order):
        out[record_ids[i]] = ("train" if rank < n_train
                              else "dev" if rank < n_train + n_dev else "test")
    return out


def _encode_values(values):
    """Map raw label values to dense ids: integers map to themselves, strings sort."""
    values = list(values)
    if all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        if values and min(values) < 0:
            raise SchemaError("integer labels must be non-negative")
        return {v: v for v in values}, (max(values) + 1 if values else 0)
    names = sorted({str(v) for v in values})
    return {v: names.index(str(v)) for v in values}, len(names)


def corpus_from_records(records, seed=0, vocab_cap=DEFAULT_VOCAB_CAP, attributes=None,
                        entities=(), vocabulary=None):
    """Build a Corpus from dicts with keys ``text``, ``label``, ``attributes``
    and optional ``id`` and ``subgroups``. ``records`` yields ``(line, dict)``."""
    rows = []
    for line, rec in records:
        for key in ("text", "label", "attributes"):
            if key not in rec:
                raise ParseError(f"missing field {key!r}", line)
        if not isinstance(rec["attributes"], dict):
            raise ParseError("'attributes' must be an object", line)
        if attributes is None:
            attributes = sorted(rec["attributes"])
        for a in list(attributes) + list(entities):
            if a not in rec["attributes"]:
                raise ParseError(f"missing attribute {a!r}", line)
        if not tokenize(str(rec["text"])):
            raise ParseError("empty text", line)
        rows.append((line, rec))
    attributes = list(attributes or [])
    entities = list(entities)
    if vocabulary is None:
        vocabulary = Vocabulary.build((str(r["text"]) for _, r in rows), vocab_cap)
    label_map, num_classes = _encode_values(r["label"] for _, r in rows)
    attr_maps = {a: _encode_values(r["attributes"][a] for _, r in rows)[0]
                 for a in attributes + entities}
    docs, seen = [], set()
    for i, (line, rec) in enumerate(rows):
        rid = str(rec.get("id", i))
        if rid in seen:
            raise ParseError(f"duplicate record id {rid!r}", line)
        seen.add(rid)
        docs.append(Document(
            record_id=rid,
            tokens=vocabulary.encode(str(rec["text"])),
            main_label=label_map[rec["label"]],
            private_attributes={a: attr_maps[a][rec["attributes"][a]]
                                for a in attributes + entities},
            subgroups={k: str(v) for k, v in rec.get("subgroups", {}).items()},
        ))
    split_of = assign_splits([d.record_id for d in docs], seed)
    return Corpus(vocabulary, docs, num_classes, attributes, entities, split_of)


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            yield lineno, obj


def load_corpus(path, attributes=None, entities=(), seed=0, vocab_cap=DEFAULT_VOCAB_CAP,
                vocabulary=None):
    """Read a line-delimited JSON corpus.

    Text is lower-cased and split on whitespace; words outside the
    ``vocab_cap`` most frequent map to UNK. Pass ``vocabulary`` to encode
    against an existing model's vocabulary instead of building one.
    """
    corpus = corpus_from_records(read_jsonl(path), seed, vocab_cap, attributes, entities,
                                 vocabulary)
    corpus.manifest = {"source": str(path), "seed": seed}
    return corpus


def corpus_records(corpus, texts):
    """Inverse of ``corpus_from_records`` given the original texts (by record id)."""
    for d in corpus.documents:
        yield {"id": d.record_id, "text": texts[d.record_id], "label": d.main_label,
               "attributes": dict(d.private_attributes), "subgroups": dict(d.subgroups)}


# --- synthetic corpus -----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Knobs of the synthetic generator.

    The main label is carried by ``topic_tokens`` words from the label's
    topic list; each is drawn from the right list with probability
    ``topic_purity`` (``minority_topic_purity`` for the minority group)
    and from a random topic otherwise. The private attribute ``group``
    takes value 0 with probability ``skew``. With probability ``rho`` a
    document's ``identity_tokens`` words come from its own group's list,
    otherwise from a uniformly random group's list.
    """

    n: int = 1000
    num_classes: int = 4
    rho: float = 0.9
    skew: float = 0.5
    num_groups: int = 2
    doc_length: int = 12
    topic_tokens: int = 4
    identity_tokens: int = 3
    words_per_topic: int = 8
    words_per_group: int = 2
    filler_words: int = 200
    topic_purity: float = 0.85
    minority_topic_purity: float | None = None
    num_entities: int = 0
    entity_rate: float = 0.2
    seed: int = 0

    @property
    def vocab_size(self):
        return (self.num_classes * self.words_per_topic + self.num_groups * self.words_per_group
                + self.filler_words + self.num_entities)

    def validate(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 < self.skew < 1.0:
            raise ParameterError(f"skew must lie in (0, 1), got {self.skew}")
        for name in ("topic_purity", "entity_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.n < 1 or self.num_classes < 2 or self.num_groups < 2:
            raise ParameterError("need n >= 1, at least 2 classes and 2 groups")
        if min(self.words_per_topic, self.words_per_group) < 1:
            raise ParameterError("vocabulary too small: every topic and group needs a word")
        fixed = self.topic_tokens + self.identity_tokens + self.num_entities
        if self.doc_length < max(fixed, 1) or (self.doc_length > fixed and self.filler_words < 1):
            raise ParameterError(
                f"doc_length {self.doc_length} cannot hold {fixed} signal words plus filler")


def _synthetic_records(cfg):
    rng = RngStream.derive(cfg.seed, "synthetic")
    topic = [[f"topic{c}w{j}" for j in range(cfg.words_per_topic)] for c in range(cfg.num_classes)]
    group = [[f"group{g}w{j}" for j in range(cfg.words_per_group)] for g in range(cfg.num_groups)]
    filler = [f"w{j}" for j in range(cfg.filler_words)]
    minority_purity = (cfg.topic_purity if cfg.minority_topic_purity is None
                       else cfg.minority_topic_purity)
    other = (1.0 - cfg.skew) / (cfg.num_groups - 1)
    group_p = [cfg.skew] + [other] * (cfg.num_groups - 1)
    for i in range(cfg.n):
        label = int(rng.integers(0, cfg.num_classes))
        g = int(rng.choice(cfg.num_groups, 1, p=group_p)[0])
        purity = cfg.topic_purity if g == 0 else minority_purity
        words = []
        for _ in range(cfg.topic_tokens):
            c = label if rng.bernoulli(purity, 1)[0] else int(rng.integers(0, cfg.num_classes))
            words.append(topic[c][int(rng.integers(0, cfg.words_per_topic))])
        shown = g if rng.bernoulli(cfg.rho, 1)[0] else int(rng.integers(0, cfg.num_groups))
        for _ in range(cfg.identity_tokens):
            words.append(group[shown][int(rng.integers(0, cfg.words_per_group))])
        present = rng.bernoulli(cfg.entity_rate, cfg.num_entities).tolist()
        words += [f"entity{e}" for e, p in enumerate(present) if p]
        while len(words) < cfg.doc_length:
            words.append(filler[int(rng.integers(0, cfg.filler_words))])
        order = rng.permutation(len(words))
        attributes = {"group": g}
        attributes.update({f"entity{e}": int(p) for e, p in enumerate(present)})
        yield {"id": f"s{i:06d}", "text": " ".join(words[j] for j in order), "label": label,
               "attributes": attributes, "subgroups": {"group": f"g{g}"}}


def generate_synthetic(cfg=None, **overrides):
    """Seeded synthetic corpus; returns ``(corpus, records)``.

    ``records`` are the JSON-ready rows (with text) so the corpus can be
    written to disk with :func:`write_corpus`.
    """
    cfg = replace(cfg or SyntheticConfig(), **overrides)
    cfg.validate()
    records = list(_synthetic_records(cfg))
    entities = [f"entity{e}" for e in range(cfg.num_entities)]
    corpus = corpus_from_records(enumerate(records, 1), seed=cfg.seed,
                                 attributes=["group"], entities=entities)
    corpus.manifest = {"generator": "synthetic", "config": asdict(cfg)}
    return corpus, records


def write_corpus(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def bag_of_words(docs, vocab_size):
    """Dense count matrix; used as the raw-text baseline for probes."""
    x = np.zeros((len(docs), vocab_size))
    for i, d in enumerate(docs):
        np.add.at(x[i], np.asarray(d.tokens, dtype=np.int64), 1.0)
    x[:, MASK_ID] = 0.0
    return x
