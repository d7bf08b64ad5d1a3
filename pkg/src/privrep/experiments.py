"""End-to-end experiment helpers shared by the CLI sweep and the acceptance suite."""

import math
from dataclasses import dataclass, replace

import numpy as np

from .audit import PrivacyReport, ProbeConfig, evaluate_attacker, train_attacker
from .dp import PrivacyParams
from .pipeline import deployed_representations, privatize_batch, wrap_non_private
from .training import TrainConfig, train_robust, train_standard

EPSILON_GRID = (0.05, 0.1, 0.5, 1.0, 5.0)
MU_GRID = (0.1, 0.3, 0.5, 0.8)


def main_accuracy(bundle, docs, params=None, seed=0, view=0):
    """Main-task accuracy through the deployed path (privatized when ``params`` is set)."""
    docs = list(docs)
    if not docs:
        return math.nan
    reps = deployed_representations(bundle, docs, params, seed, view)
    pred = bundle.head.predict_proba(reps).argmax(axis=1)
    return float((pred == np.array([d.main_label for d in docs])).mean())


def eavesdropped(bundle, docs, params, seed, view):
    """What an eavesdropper sees for ``docs``: privatized records, or the raw
    representations wrapped as records when ``params`` is None."""
    if params is None:
        return wrap_non_private(docs, deployed_representations(bundle, docs))
    return privatize_batch(docs, bundle.extractor, params, seed, view)


def attack(bundle, corpus, params, seed=0, attributes=None, entities=None, views=None,
           probe=None, test_views=5):
    """Train one probe per private attribute on the train split, select on
    dev, report on test.

    The probe sees ``views`` independent noise draws of the training
    records (default: one fresh draw per probe epoch). Test accuracy is
    averaged over ``test_views`` independent draws, which estimates the
    attacker's expected accuracy under the mechanism rather than its
    accuracy on one lucky or unlucky draw.
    """
    attributes = corpus.attributes if attributes is None else attributes
    entities = corpus.entities if entities is None else entities
    probe = replace(probe or ProbeConfig(), seed=seed)
    tr, dv, te = corpus.split("train"), corpus.split("dev"), corpus.split("test")
    private = params is not None
    n_views = (views or probe.epochs) if private else 1
    train_views = [eavesdropped(bundle, tr, params, seed, v) for v in range(n_views)]
    dev = eavesdropped(bundle, dv, params, seed, 1000)
    tests = [eavesdropped(bundle, te, params, seed, 2000 + v)
             for v in range(test_views if private else 1)]
    results = {}
    for name in list(attributes) + list(entities):
        labels = {d.record_id: d.private_attributes[name] for d in corpus.documents}
        p = train_attacker(train_views, labels, name, dev, probe)
        runs = [evaluate_attacker(p, t, labels) for t in tests]
        results[name] = {
            "accuracy": float(np.mean([r["accuracy"] for r in runs])),
            "majority_baseline": runs[0]["majority_baseline"],
            "predictions": np.concatenate([r["predictions"] for r in runs]),
            "truths": np.concatenate([r["truths"] for r in runs]),
        }
    meta = {}
    if private:
        meta = {"epsilon": params.epsilon, "mu": params.mu,
                "epsilon_effective": params.epsilon_effective}
    return PrivacyReport.build({a: results[a] for a in attributes},
                               {e: results[e] for e in entities}, **meta)


@dataclass
class ExperimentConfig:
    epochs: int = 10
    robust_epochs: int = 10
    learning_rate: float = 0.1
    embed_dim: int = 32
    rep_dim: int = 64
    batch_size: int = 32
    views: int | None = None
    test_views: int = 5

    def train_config(self, seed, privacy=None, init_from=None, epochs=None):
        return TrainConfig(epochs=self.epochs if epochs is None else epochs,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           privacy=privacy, seed=seed, embed_dim=self.embed_dim,
                           rep_dim=self.rep_dim, init_from=init_from)


def fit_standard(corpus, seed, cfg=None):
    cfg = cfg or ExperimentConfig()
    return train_standard(corpus, cfg.train_config(seed))


def fit_robust(corpus, params, seed, standard=None, cfg=None):
    """Robust model fine-tuned from ``standard`` (trained here if absent)."""
    cfg = cfg or ExperimentConfig()
    standard = standard or fit_standard(corpus, seed, cfg)
    return train_robust(corpus, cfg.train_config(seed, params, standard, cfg.robust_epochs))


def sweep(corpus, kind, grid=None, seed=0, fixed_epsilon=1.0, cfg=None, progress=None):
    """One row per grid point: accuracy, empirical privacy and effective budget.

    ``kind`` is ``"epsilon"`` (mu fixed at 0) or ``"mu"`` (epsilon fixed
    at ``fixed_epsilon``).
    """
    cfg = cfg or ExperimentConfig()
    if kind == "epsilon":
        points = [PrivacyParams(e, 0.0) for e in (grid or EPSILON_GRID)]
    elif kind == "mu":
        points = [PrivacyParams(fixed_epsilon, m) for m in (grid or MU_GRID)]
    else:
        raise ValueError(f"unknown sweep kind {kind!r}")
    standard = fit_standard(corpus, seed, cfg)
    test = corpus.split("test")
    rows = []
    for params in points:
        robust = fit_robust(corpus, params, seed, standard, cfg)
        report = attack(robust, corpus, params, seed, views=cfg.views,
                        test_views=cfg.test_views)
        rows.append({"epsilon": params.epsilon, "mu": params.mu,
                     "epsilon_effective": params.epsilon_effective,
                     "main_accuracy": main_accuracy(robust, test, params, seed),
                     "one_minus_X": report.one_minus_X, "one_minus_F": report.one_minus_F})
        if progress:
            progress(rows[-1])
    return rows


def format_rows(rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    out = ["\t".join(columns)]
    for r in rows:
        out.append("\t".join("" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float)
                                                      else str(r[c])) for c in columns))
    return "\n".join(out) + "\n"
