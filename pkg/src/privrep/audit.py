"""Eavesdropper probes, empirical privacy metrics and the subgroup fairness audit.

Probes only ever see :class:`~privrep.pipeline.PrivatizedRepresentation`
records, the same view an eavesdropper on the client-server link has.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTaskError, DimensionError, ParameterError, SchemaError
from .pipeline import PrivatizedRepresentation, deployed_representations
from .tensor_nn import (
    ParamSet, RngStream, affine_backward, affine_forward, glorot_uniform, relu_backward,
    relu_forward, sgd_step, softmax, softmax_cross_entropy_backward,
    softmax_cross_entropy_forward,
)

PROBE_HIDDEN = 512


class AttackerProbe:
    """Two affine layers with a ReLU between them (k -> 512 -> classes).

    Inputs are standardized per coordinate with statistics of the probe's
    own training data before the first layer; that is fixed preprocessing,
    not a trainable layer.
    """

    def __init__(self, input_dim, num_classes, target_attribute, hidden=PROBE_HIDDEN, rng=None):
        rng = rng or RngStream(0)
        self.input_dim = input_dim
        self.hidden = hidden
        self.num_classes = num_classes
        self.target_attribute = target_attribute
        self.params = ParamSet({"w1": glorot_uniform(rng, input_dim, hidden),
                                "b1": np.zeros((1, hidden)),
                                "w2": glorot_uniform(rng, hidden, num_classes),
                                "b2": np.zeros((1, num_classes))})
        self.shift = np.zeros(input_dim)
        self.scale = np.ones(input_dim)

    def fit_standardizer(self, x):
        self.shift = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)

    def _inputs(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"probe expects {self.input_dim} inputs")
        return (x - self.shift) / self.scale

    def logits(self, x):
        h = relu_forward(affine_forward(self._inputs(x), self.params["w1"], self.params["b1"]))
        return affine_forward(h, self.params["w2"], self.params["b2"])

    def loss(self, x, labels, backward=False):
        z = self._inputs(x)
        pre = affine_forward(z, self.params["w1"], self.params["b1"])
        h = relu_forward(pre)
        logits = affine_forward(h, self.params["w2"], self.params["b2"])
        loss = softmax_cross_entropy_forward(logits, labels)
        if backward:
            g = softmax_cross_entropy_backward(logits, labels)
            g_h, g_w2, g_b2 = affine_backward(g, h, self.params["w2"])
            _, g_w1, g_b1 = affine_backward(relu_backward(g_h, pre), z, self.params["w1"])
            for name, grad in (("w1", g_w1), ("b1", g_b1), ("w2", g_w2), ("b2", g_b2)):
                self.params.grads[name] += grad
        return loss

    def predict(self, x):
        return softmax(self.logits(x)).argmax(axis=1)

    def accuracy(self, x, labels):
        labels = np.asarray(labels)
        return float((self.predict(x) == labels).mean()) if len(labels) else math.nan


@dataclass
class ProbeConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    hidden: int = PROBE_HIDDEN
    seed: int = 0


def _aligned(reps, labels):
    """Stack representation values and look up each record's label."""
    x, y = [], []
    for r in reps:
        if not isinstance(r, PrivatizedRepresentation):
            raise TypeError("attackers are trained on PrivatizedRepresentation records only")
        if r.record_id not in labels:
            raise SchemaError(f"no label for record {r.record_id!r}")
        x.append(r.values)
        y.append(int(labels[r.record_id]))
    return (np.stack(x) if x else np.zeros((0, 0))), np.array(y, dtype=np.int64)


def majority_baseline(train_labels, eval_labels):
    """Accuracy of always predicting the most frequent training label."""
    counts = Counter(int(v) for v in train_labels)
    top = min(counts, key=lambda v: (-counts[v], v))
    eval_labels = np.asarray(eval_labels)
    return float((eval_labels == top).mean()) if len(eval_labels) else math.nan


def train_attacker(train_views, labels, attribute, dev_reps=None, config=None):
    """Fit a probe that predicts ``attribute`` from privatized representations.

    ``train_views`` is either one list of representations or a list of
    such lists holding independent noise draws of the same records; epoch
    ``e`` trains on view ``e % len(train_views)``. ``labels`` maps record
    id to the attribute value. The returned probe carries the weights of
    the epoch with the best dev accuracy (``dev_reps``, when given).
    """
    config = config or ProbeConfig()
    if train_views and isinstance(train_views[0], PrivatizedRepresentation):
        train_views = [train_views]
    views = [_aligned(v, labels) for v in train_views]
    if not views or len(views[0][1]) == 0:
        raise ParameterError("no training representations")
    y = views[0][1]
    if len(set(y.tolist())) < 2:
        raise DegenerateTaskError(f"attribute {attribute!r} has a single class in training data")
    num_classes = int(max(int(v[1].max()) for v in views)) + 1
    probe = AttackerProbe(views[0][0].shape[1], num_classes, attribute, config.hidden,
                          RngStream.derive(config.seed, "probe-init", attribute))
    probe.fit_standardizer(np.concatenate([v[0] for v in views]))
    dev = _aligned(dev_reps, labels) if dev_reps else None
    order = RngStream.derive(config.seed, "probe-batches", attribute)
    best_acc, best = -1.0, None
    for epoch in range(config.epochs):
        x, y = views[epoch % len(views)]
        perm = order.permutation(len(y))
        for b, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start:start + config.batch_size]
            probe.loss(x[idx], y[idx], backward=True)
            sgd_step(probe.params, config.learning_rate, epoch, b)
        if dev is not None:
            acc = probe.accuracy(*dev)
            if acc > best_acc:
                best_acc, best = acc, probe.params.copy()
    if best is not None:
        probe.params.load_from(best)
    probe.train_labels = views[0][1]
    return probe


def evaluate_attacker(probe, reps, labels):
    x, y = _aligned(reps, labels)
    return {"accuracy": probe.accuracy(x, y),
            "majority_baseline": majority_baseline(probe.train_labels, y),
            "predictions": probe.predict(x) if len(y) else np.zeros(0, dtype=np.int64),
            "truths": y}


# --- metrics --------------------------------------------------------------

def empirical_privacy_demographic(accuracies):
    """``1 - X`` where X is the mean attacker accuracy."""
    accuracies = list(accuracies)
    if not accuracies:
        raise ParameterError("need at least one attacker accuracy")
    if any(not 0.0 <= a <= 1.0 for a in accuracies):
        raise ParameterError("accuracies must lie in [0, 1]")
    return 1.0 - sum(accuracies) / len(accuracies)


def f1_micro(predictions, truths):
    """Micro F1 over every (record, entity) presence decision; 0 when no positives at all."""
    p = np.asarray(predictions, dtype=bool).ravel()
    t = np.asarray(truths, dtype=bool).ravel()
    if p.shape != t.shape:
        raise DimensionError("predictions and truths differ in shape")
    tp = int(np.sum(p & t))
    denom = 2 * tp + int(np.sum(p & ~t)) + int(np.sum(~p & t))
    return 2 * tp / denom if denom else 0.0


def f1_macro(predictions, truths):
    p = np.asarray(predictions, dtype=bool)
    t = np.asarray(truths, dtype=bool)
    if p.ndim == 1:
        return f1_micro(p, t)
    return float(np.mean([f1_micro(p[:, j], t[:, j]) for j in range(p.shape[1])]))


def empirical_privacy_entities(predictions, truths):
    """``1 - F`` with F the micro-averaged F1 of entity-presence predictions."""
    return 1.0 - f1_micro(predictions, truths)


@dataclass
class PrivacyReport:
    accuracies: dict = field(default_factory=dict)
    majority_baselines: dict = field(default_factory=dict)
    X: float | None = None
    one_minus_X: float | None = None
    F: float | None = None
    one_minus_F: float | None = None
    F_macro: float | None = None
    epsilon: float | None = None
    mu: float | None = None
    epsilon_effective: float | None = None
    user_masks: bool = False

    @classmethod
    def build(cls, demographic, entities=None, **meta):
        """``demographic``: attribute -> evaluate_attacker result; ``entities``
        likewise for binary presence attributes."""
        report = cls(**meta)
        for name, res in list(demographic.items()) + list((entities or {}).items()):
            report.accuracies[name] = res["accuracy"]
            report.majority_baselines[name] = res["majority_baseline"]
        if demographic:
            report.one_minus_X = empirical_privacy_demographic(
                [demographic[a]["accuracy"] for a in demographic])
            report.X = 1.0 - report.one_minus_X
        if entities:
            preds = np.stack([entities[e]["predictions"] for e in entities], axis=1)
            truths = np.stack([entities[e]["truths"] for e in entities], axis=1)
            report.one_minus_F = empirical_privacy_entities(preds, truths)
            report.F = 1.0 - report.one_minus_F
            if len(entities) > 1:
                report.F_macro = f1_macro(preds, truths)
        return report

    def to_dict(self):
        d = dict(self.__dict__)
        for k in ("epsilon", "epsilon_effective"):
            if d[k] is not None and math.isinf(d[k]):
                d[k] = "inf"
        return d

    def table(self):
        rows = ["attribute\taccuracy\tmajority_baseline"]
        for name in self.accuracies:
            rows.append(f"{name}\t{self.accuracies[name]:.4f}\t{self.majority_baselines[name]:.4f}")
        for key in ("one_minus_X", "one_minus_F", "F_macro"):
            if getattr(self, key) is not None:
                rows.append(f"{key}\t{getattr(self, key):.4f}\t")
        return "\n".join(rows)


# --- fairness -------------------------------------------------------------

@dataclass
class SubgroupAudit:
    variable: str
    reference: str
    groups: list
    sizes: dict
    ratios: dict
    accuracy: dict
    gaps: dict


@dataclass
class FairnessReport:
    audits: dict = field(default_factory=dict)
    epsilon: float | None = None
    mu: float | None = None
    n: int = 0

    def to_dict(self):
        return {"epsilon": None if self.epsilon is None else repr(self.epsilon),
                "mu": self.mu, "n": self.n,
                "audits": {k: v.__dict__ for k, v in self.audits.items()}}

    def table(self):
        rows = ["variable\tgroup\tsize\tratio\taccuracy\tgap"]
        for a in self.audits.values():
            for g in a.groups:
                acc = a.accuracy[g]
                gap = a.gaps.get(g)
                rows.append("\t".join([a.variable, g, str(a.sizes[g]), f"{a.ratios[g]:.4f}",
                                       "absent" if acc is None else f"{acc:.4f}",
                                       "" if gap is None else f"{gap:+.4f}"]))
        return "\n".join(rows)


def subgroup_gaps(correct, groups, variable="group", reference=None, declared=()):
    """Per-subgroup accuracy and ``gap = acc(reference) - acc(other)``.

    The reference defaults to the largest subgroup (ties by name).
    Declared groups with no records are reported with accuracy ``None``.
    """
    correct = np.asarray(correct, dtype=bool)
    groups = [str(g) for g in groups]
    sizes = Counter(groups)
    for g in declared:
        sizes.setdefault(str(g), 0)
    names = sorted(sizes, key=lambda g: (-sizes[g], g))
    if reference is None:
        reference = names[0]
    n = len(groups)
    acc = {}
    for g in names:
        sel = np.array([x == g for x in groups], dtype=bool)
        acc[g] = float(correct[sel].mean()) if sizes[g] else None
    gaps = {}
    if acc.get(reference) is not None:
        for g in names:
            if g != reference and acc[g] is not None:
                gaps[g] = acc[reference] - acc[g]
    return SubgroupAudit(variable, reference, names, dict(sizes),
                         {g: sizes[g] / n if n else 0.0 for g in names}, acc, gaps)


def fairness_audit(bundle, docs, params=None, seed=0, variables=None, references=None):
    """Main-task accuracy per subgroup under the deployed inference path
    (privatized with ``params`` when given, clean otherwise)."""
    docs = list(docs)
    for d in docs:
        if not d.subgroups:
            raise SchemaError(f"record {d.record_id} has no subgroup labels")
    variables = variables or sorted({k for d in docs for k in d.subgroups})
    reps = deployed_representations(bundle, docs, params, seed)
    pred = bundle.head.predict_proba(reps).argmax(axis=1) if docs else np.zeros(0)
    correct = pred == np.array([d.main_label for d in docs])
    report = FairnessReport(epsilon=None if params is None else params.epsilon,
                            mu=None if params is None else params.mu, n=len(docs))
    for v in variables:
        missing = [d.record_id for d in docs if v not in d.subgroups]
        if missing:
            raise SchemaError(f"record {missing[0]} lacks subgroup variable {v!r}")
        report.audits[v] = subgroup_gaps(correct, [d.subgroups[v] for d in docs], v,
                                         (references or {}).get(v))
    return report


# --- export ---------------------------------------------------------------

def export_representations(path, reps, subgroups):
    """Write ``(record_id, subgroup, values)`` lines after a header carrying the budget."""
    reps = list(reps)
    first = reps[0] if reps else None
    header = {"kind": "privrep-representations", "count": len(reps),
              "epsilon": None if first is None else _jsonable(first.epsilon),
              "mu": None if first is None else first.mu,
              "epsilon_effective": None if first is None else _jsonable(first.epsilon_effective)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in reps:
            fh.write(json.dumps({"record_id": r.record_id, "subgroup": subgroups.get(r.record_id),
                                 "values": [float(v) for v in r.values]}) + "\n")


def load_exported(path):
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(t) for t in fh if t.strip()]
    return header, rows


def _jsonable(x):
    return "inf" if math.isinf(x) else x
