"""Standard and noise-robust training of the split model with best-dev-loss
checkpoint selection."""

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dp import PrivacyParams, apply_mask, random_mask, sample_laplace_matrix
from .errors import DivergenceError, ParameterError
from .model import ModelBundle
from .tensor_nn import RngStream, sgd_step, softmax

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 0.1
    privacy: PrivacyParams | None = None
    seed: int = 0
    embed_dim: int = 32
    rep_dim: int = 64
    rep_dropout: float = 0.0
    # Ablation: mask words during training as well.
    train_word_dropout: bool = False
    # False swaps min-max normalization for the identity (equivalence tests only).
    normalize: bool = True
    dev_noise_draws: int = 3
    # Divide the step size by 1 + 2b^2 (one plus the Laplace variance) so
    # the head's curvature stays comparable across noise scales.
    noise_scaled_lr: bool = True
    dataset_id: str = ""
    # Warm start: copy extractor and head weights from this bundle.
    init_from: object = field(default=None, repr=False, compare=False)
    hook: object = field(default=None, repr=False, compare=False)

    def effective_lr(self):
        b = self.privacy.scale if self.privacy is not None else 0.0
        if self.noise_scaled_lr and b > 0:
            return self.learning_rate / (1.0 + 2.0 * b * b)
        return self.learning_rate

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if not (self.learning_rate >= 0) or math.isinf(self.learning_rate):
            raise ParameterError("learning_rate must be finite and non-negative")
        if not 0.0 <= self.rep_dropout < 1.0:
            raise ParameterError("rep_dropout must lie in [0, 1)")
        if self.dev_noise_draws < 1:
            raise ParameterError("dev_noise_draws must be >= 1")


def _emit(config, event, **info):
    if config.hook is not None:
        config.hook(event, info)


def _mask_docs(docs, mu, rng):
    return [apply_mask(d.tokens, random_mask(len(d.tokens), mu, rng)) for d in docs]


def evaluate_model(model, docs, labels, params, rng, draws=1, word_dropout=False):
    """Mean loss and accuracy over ``draws`` independent noise draws."""
    if not docs:
        return math.nan, math.nan
    labels = np.asarray(labels)
    losses, accs = [], []
    noisy = params is not None and params.scale > 0
    for _ in range(draws if noisy or word_dropout else 1):
        inputs = _mask_docs(docs, params.mu, rng) if word_dropout else docs
        rep = model.representations(inputs)
        if noisy:
            rep = rep + sample_laplace_matrix(rng, params.scale, *rep.shape)
        p = softmax(model.head.logits(rep))
        losses.append(float(-np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300)).mean()))
        accs.append(float((p.argmax(axis=1) == labels).mean()))
    return float(np.mean(losses)), float(np.mean(accs))


def _train(corpus, config, robust):
    config.validate()
    privacy = config.privacy if robust else None
    if robust and privacy is None:
        raise ParameterError("robust training needs PrivacyParams (use PrivacyParams.non_private())")
    if not robust and config.privacy is not None:
        raise ParameterError("standard training takes no privacy parameters")
    train_docs, dev_docs = corpus.split("train"), corpus.split("dev")
    bundle = ModelBundle.initialize(
        corpus.vocabulary, corpus.num_classes, config.seed, config.embed_dim, config.rep_dim,
        training_params=privacy or PrivacyParams.non_private(),
        normalized=robust and config.normalize,
        metadata={"seed": config.seed, "epochs": config.epochs, "dataset": config.dataset_id,
                  "robust": robust, "learning_rate": config.learning_rate,
                  "batch_size": config.batch_size, "train_word_dropout": config.train_word_dropout},
    )
    if not train_docs:
        raise ParameterError("training split is empty")
    if config.init_from is not None:
        bundle.metadata["init_from"] = config.init_from.metadata.get("seed")
        bundle.extractor.params.load_from(config.init_from.extractor.params)
        bundle.head.params.load_from(config.init_from.head.params)
    model = bundle.split_model(config.rep_dropout)
    labels = np.array([d.main_label for d in train_docs])
    dev_labels = [d.main_label for d in dev_docs]
    order_rng = RngStream.derive(config.seed, "batches")
    noise_rng = RngStream.derive(config.seed, "train-noise")
    mask_rng = RngStream.derive(config.seed, "train-mask")
    drop_rng = RngStream.derive(config.seed, "rep-dropout") if config.rep_dropout > 0 else None
    noisy = privacy is not None and privacy.scale > 0
    word_dropout = robust and config.train_word_dropout and privacy.mu > 0
    lr = config.effective_lr() if robust else config.learning_rate
    bundle.metadata["effective_learning_rate"] = lr
    best_loss, best = math.inf, None
    history = []
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(len(train_docs))
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start:start + config.batch_size]
            docs = [train_docs[i] for i in idx]
            if word_dropout:
                docs = _mask_docs(docs, privacy.mu, mask_rng)
            noise = None
            if noisy:
                noise = sample_laplace_matrix(noise_rng, privacy.scale, len(idx), config.rep_dim)
            _emit(config, "train_batch", epoch=epoch, batch=b, normalized=model.normalize,
                  noise=noise, draws=noise_rng.draws)
            loss = model.loss(docs, labels[idx], backward=True, noise=noise, dropout_rng=drop_rng)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite training loss", epoch, b)
            sgd_step(model.params, lr, epoch, b)
            total += loss
            batches += 1
        dev_rng = RngStream.derive(config.seed, "dev-noise")
        dev_loss, dev_acc = evaluate_model(model, dev_docs, dev_labels, privacy, dev_rng,
                                           config.dev_noise_draws, word_dropout)
        _emit(config, "dev_eval", epoch=epoch, noisy=noisy, draws=config.dev_noise_draws)
        row = {"epoch": epoch, "train_loss": total / batches, "dev_loss": dev_loss,
               "dev_accuracy": dev_acc}
        history.append(row)
        logger.info("epoch %d train_loss %.4f dev_loss %.4f dev_acc %.4f",
                    epoch, row["train_loss"], dev_loss, dev_acc)
        if best is None or dev_loss < best_loss or math.isnan(best_loss):
            best_loss, best = dev_loss, (epoch, model.params.copy())
    if best is not None:
        model.params.load_from(best[1])
        bundle.metadata["best_epoch"] = best[0]
    bundle.metadata["history"] = history
    return bundle


def train_standard(corpus, config):
    """Plain cross-entropy training of extractor and head."""
    return _train(corpus, config, robust=False)


def train_robust(corpus, config):
    """Training with deployment-matched noise.

    Every forward pass normalizes the representation and adds fresh
    Laplace noise at ``config.privacy.scale`` before the head; both
    halves are updated through the noise. Dev loss is measured with noise.
    """
    return _train(corpus, config, robust=True)


def robust_config(config, privacy):
    return replace(config, privacy=privacy)


def write_metrics(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
