"""Client-side privatization and the file boundary between client and server.

Only :class:`PrivatizedRepresentation` objects cross the boundary. The
server-side functions here accept nothing else, so a server never needs
(or can be handed) token ids or pre-noise vectors.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .dp import (
    MaskVector, PrivacyParams, apply_mask, epsilon_effective, normalize_minmax_rows, perturb,
    random_mask,
)
from .errors import DimensionError, ParseError, SchemaError
from .tensor_nn import RngStream

MASK_SOURCES = ("random", "user")
REP_FIELDS = ("record_id", "dim", "values", "epsilon", "mu", "epsilon_effective", "mask_source")


@dataclass(frozen=True, eq=False)
class PrivatizedRepresentation:
    record_id: str
    values: np.ndarray
    epsilon: float
    mu: float
    epsilon_effective: float
    mask_source: str = "random"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.mask_source not in MASK_SOURCES:
            raise SchemaError(f"mask_source must be one of {MASK_SOURCES}")

    @property
    def dim(self):
        return self.values.shape[0]

    def __eq__(self, other):
        return (isinstance(other, PrivatizedRepresentation)
                and self.record_id == other.record_id
                and np.array_equal(self.values, other.values)
                and (self.epsilon, self.mu, self.epsilon_effective, self.mask_source)
                == (other.epsilon, other.mu, other.epsilon_effective, other.mask_source))


def _num(x):
    return "inf" if math.isinf(x) else float(x)


def serialize(rep):
    """One JSON object on one line; floats use shortest round-trip decimals."""
    obj = {"record_id": rep.record_id, "dim": rep.dim,
           "values": [float(v) for v in rep.values],
           "epsilon": _num(rep.epsilon), "mu": float(rep.mu),
           "epsilon_effective": _num(rep.epsilon_effective), "mask_source": rep.mask_source}
    return json.dumps(obj, allow_nan=False)


def _float_field(obj, key, line):
    v = obj[key]
    if v == "inf":
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{key} must be a number", line)
    return float(v)


def deserialize(text, line=None):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line) from None
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", line)
    missing = [k for k in REP_FIELDS if k not in obj]
    if missing:
        raise ParseError(f"missing field(s) {', '.join(missing)}", line)
    extra = sorted(set(obj) - set(REP_FIELDS))
    if extra:
        raise ParseError(f"unexpected field(s) {', '.join(extra)}", line)
    values = obj["values"]
    if not isinstance(values, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise ParseError("values must be a list of numbers", line)
    if obj["dim"] != len(values):
        raise ParseError(f"dim {obj['dim']} does not match {len(values)} values", line)
    eps, mu = _float_field(obj, "epsilon", line), _float_field(obj, "mu", line)
    eps_eff = _float_field(obj, "epsilon_effective", line)
    try:
        expected = epsilon_effective(eps, mu)
    except ValueError as exc:
        raise ParseError(str(exc), line) from None
    if not (eps_eff == expected or math.isclose(eps_eff, expected, rel_tol=1e-12)):
        raise ParseError(
            f"epsilon_effective {eps_eff!r} inconsistent with epsilon={eps!r}, mu={mu!r}", line)
    if obj["mask_source"] not in MASK_SOURCES:
        raise ParseError(f"unknown mask_source {obj['mask_source']!r}", line)
    return PrivatizedRepresentation(str(obj["record_id"]), np.array(values, dtype=np.float64),
                                    eps, mu, eps_eff, obj["mask_source"])


def write_reps(path, reps):
    with open(path, "w", encoding="utf-8") as fh:
        for rep in reps:
            fh.write(serialize(rep) + "\n")


def read_reps(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, 1):
            if text.strip():
                out.append(deserialize(text, lineno))
    return out


# --- privatization --------------------------------------------------------

def record_stream(seed, record_id, view=0):
    return RngStream.derive(seed, "dpnr", view, record_id)


def _privatize(docs, f, params, rngs, user_masks):
    masked, sources = [], []
    for doc, rng in zip(docs, rngs):
        mask = user_masks.get(doc.record_id) if user_masks else None
        if mask is None:
            mask = random_mask(len(doc.tokens), params.mu, rng)
            sources.append("random")
        else:
            sources.append("user")
        masked.append(apply_mask(doc.tokens, mask))
    raw = f.extract_batch(masked)
    normed, _ = normalize_minmax_rows(raw)
    out = []
    for doc, rng, x, src in zip(docs, rngs, normed, sources):
        out.append(PrivatizedRepresentation(doc.record_id, perturb(x, params, rng),
                                            params.epsilon, params.mu,
                                            params.epsilon_effective, src))
    return out


def dpnr(doc, f, params, rng, user_mask=None):
    """Word dropout, extraction, min-max normalization, Laplace perturbation."""
    return _privatize([doc], f, params, [rng], {doc.record_id: user_mask} if user_mask else None)[0]


def privatize_batch(docs, f, params, seed, view=0, user_masks=None):
    """Privatize many documents, each from its own record-keyed stream.

    The output for a record depends only on ``(seed, view, record_id)``,
    not on batch order. Different ``view`` values give fresh noise.
    """
    rngs = [record_stream(seed, d.record_id, view) for d in docs]
    return _privatize(list(docs), f, params, rngs, user_masks)


def read_user_masks(path):
    """``{record_id: MaskVector}`` from lines ``{"record_id", "length", "masked": [...]}``."""
    masks = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
                masks[str(obj["record_id"])] = MaskVector(int(obj["length"]), obj["masked"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad mask entry ({exc})", lineno) from None
    return masks


def non_private_representations(bundle, docs):
    """Representations exactly as the model consumed them in training, no noise."""
    return bundle.split_model().representations(docs)


def deployed_representations(bundle, docs, params=None, seed=0, view=0):
    """What the server receives: privatized when ``params`` is given."""
    if params is None:
        return non_private_representations(bundle, docs)
    reps = privatize_batch(docs, bundle.extractor, params, seed, view)
    return np.stack([r.values for r in reps]) if reps else np.zeros((0, bundle.head.rep_dim))


def wrap_non_private(docs, matrix):
    return [PrivatizedRepresentation(d.record_id, x, math.inf, 0.0, math.inf)
            for d, x in zip(docs, matrix)]


# --- server side ----------------------------------------------------------

def server_classify_batch(reps, head):
    """Predicted label and class probabilities for each privatized record."""
    reps = list(reps)
    for r in reps:
        if not isinstance(r, PrivatizedRepresentation):
            raise TypeError("the server only accepts PrivatizedRepresentation records")
        if r.dim != head.rep_dim:
            raise DimensionError(f"record {r.record_id}: dim {r.dim} != head input {head.rep_dim}")
    if not reps:
        return []
    probs = head.predict_proba(np.stack([r.values for r in reps]))
    return [{"record_id": r.record_id, "label": int(p.argmax()),
             "probabilities": [float(v) for v in p]} for r, p in zip(reps, probs)]


def write_predictions(path, predictions):
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(p) + "\n")


def read_predictions(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(t) for t in fh if t.strip()]


# --- ground-truth sidecar -------------------------------------------------

def write_labels(path, docs, split_of):
    """Per-record evaluation labels (no text, no tokens)."""
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"record_id": d.record_id, "split": split_of[d.record_id],
                                 "label": d.main_label, "attributes": d.private_attributes,
                                 "subgroups": d.subgroups}, sort_keys=True) + "\n")


def read_labels(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
                out[str(obj["record_id"])] = obj
                obj["attributes"], obj["split"]  # noqa: B018 - required keys
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad label entry ({exc})", lineno) from None
    return out
