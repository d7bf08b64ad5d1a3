import math

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from privrep.data import bag_of_words, corpus_from_records, generate_synthetic
from privrep.dp import PrivacyParams
from privrep.errors import DivergenceError, ParameterError
from privrep.training import TrainConfig, evaluate_model, train_robust, train_standard


def separable_corpus(n=300, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        label = i % 2
        words = [f"c{label}w{rng.integers(3)}" for _ in range(2)]
        words += [f"f{rng.integers(30)}" for _ in range(4)]
        rows.append((i + 1, {"id": f"d{i}", "text": " ".join(words), "label": label,
                             "attributes": {"g": int(rng.integers(2))}}))
    return corpus_from_records(rows, seed=seed)


def train_accuracy(bundle, corpus):
    docs = corpus.split("train")
    rep = bundle.split_model().representations(docs)
    pred = bundle.head.predict_proba(rep).argmax(axis=1)
    return float(np.mean(pred == [d.main_label for d in docs]))


class TestStandard:
    def test_separable(self):
        corpus = separable_corpus()
        tr = corpus.split("train")
        oracle = LogisticRegression(max_iter=1000).fit(
            bag_of_words(tr, len(corpus.vocabulary)), [d.main_label for d in tr])
        assert oracle.score(bag_of_words(tr, len(corpus.vocabulary)),
                            [d.main_label for d in tr]) >= 0.98
        bundle = train_standard(corpus, TrainConfig(epochs=15, seed=1, learning_rate=0.5))
        assert train_accuracy(bundle, corpus) >= 0.98

    def test_zero_epochs_returns_initialized(self, small_corpus):
        from privrep.model import ModelBundle
        cfg = TrainConfig(epochs=0, seed=2, rep_dim=8, embed_dim=4)
        init = ModelBundle.initialize(small_corpus.vocabulary, small_corpus.num_classes, 2, 4, 8)
        assert train_standard(small_corpus, cfg).equals(init)

    def test_same_seed_same_bundle(self, small_corpus):
        cfg = TrainConfig(epochs=2, seed=5, rep_dim=8, embed_dim=4)
        assert train_standard(small_corpus, cfg).equals(train_standard(small_corpus, cfg))

    def test_history_and_best_epoch(self, small_bundle):
        hist = small_bundle.metadata["history"]
        assert len(hist) == 3
        best = min(range(3), key=lambda i: hist[i]["dev_loss"]) + 1
        assert small_bundle.metadata["best_epoch"] == best

    def test_rejects_privacy(self, small_corpus):
        with pytest.raises(ParameterError):
            train_standard(small_corpus, TrainConfig(privacy=PrivacyParams(1.0)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, small_corpus):
        cfg = TrainConfig(epochs=1, learning_rate=1e300, seed=0, rep_dim=8, embed_dim=4)
        with pytest.raises(DivergenceError) as err:
            train_standard(small_corpus, cfg)
        assert err.value.exit_code == 4

    def test_invalid_config(self, small_corpus):
        with pytest.raises(ParameterError):
            train_standard(small_corpus, TrainConfig(batch_size=0))


class TestRobust:
    def test_requires_privacy(self, small_corpus):
        with pytest.raises(ParameterError):
            train_robust(small_corpus, TrainConfig())

    def test_zero_noise_limit_matches_standard(self, small_corpus):
        base = dict(epochs=2, seed=4, rep_dim=8, embed_dim=4)
        robust = train_robust(small_corpus, TrainConfig(privacy=PrivacyParams.non_private(),
                                                        normalize=False, **base))
        standard = train_standard(small_corpus, TrainConfig(**base))
        assert robust.all_params().equals(standard.all_params())

    def test_zero_noise_limit_adds_normalization_only(self, small_corpus):
        events = []
        cfg = TrainConfig(epochs=1, seed=4, rep_dim=8, embed_dim=4,
                          privacy=PrivacyParams.non_private(),
                          hook=lambda e, info: events.append((e, info)))
        bundle = train_robust(small_corpus, cfg)
        assert bundle.normalized
        batches = [i for e, i in events if e == "train_batch"]
        assert all(i["normalized"] and i["noise"] is None and i["draws"] == 0 for i in batches)

    def test_fresh_noise_each_batch(self, small_corpus):
        seen = []
        cfg = TrainConfig(epochs=1, seed=4, rep_dim=8, embed_dim=4, privacy=PrivacyParams(1.0),
                          hook=lambda e, info: seen.append((e, info)))
        train_robust(small_corpus, cfg)
        noises = [i["noise"] for e, i in seen if e == "train_batch"]
        assert len(noises) > 2
        assert all(n.shape[1] == 8 for n in noises)
        assert not np.array_equal(noises[0][:2], noises[1][:2])
        draws = [i["draws"] for e, i in seen if e == "train_batch"]
        assert draws == sorted(draws) and draws[0] == noises[0].size

    def test_dev_evaluated_with_noise(self, small_corpus):
        seen = []
        cfg = TrainConfig(epochs=2, seed=4, rep_dim=8, embed_dim=4, privacy=PrivacyParams(0.5),
                          hook=lambda e, info: seen.append((e, info)))
        train_robust(small_corpus, cfg)
        dev = [i for e, i in seen if e == "dev_eval"]
        assert len(dev) == 2 and all(i["noisy"] and i["draws"] == 3 for i in dev)

    def test_noise_scaled_learning_rate(self):
        cfg = TrainConfig(learning_rate=0.1, privacy=PrivacyParams(0.5))
        assert cfg.effective_lr() == pytest.approx(0.1 / 9)
        assert TrainConfig(learning_rate=0.1, privacy=PrivacyParams(0.5),
                           noise_scaled_lr=False).effective_lr() == 0.1

    def test_warm_start(self, small_corpus, small_bundle):
        cfg = TrainConfig(epochs=0, seed=3, rep_dim=16, embed_dim=8, privacy=PrivacyParams(1.0),
                          init_from=small_bundle)
        bundle = train_robust(small_corpus, cfg)
        assert bundle.all_params().equals(small_bundle.all_params())
        assert bundle.normalized and bundle.training_params.epsilon == 1.0

    def test_word_dropout_ablation_runs(self, small_corpus):
        cfg = TrainConfig(epochs=1, seed=1, rep_dim=8, embed_dim=4,
                          privacy=PrivacyParams(1.0, 0.3), train_word_dropout=True)
        assert train_robust(small_corpus, cfg).metadata["train_word_dropout"]


def test_evaluate_model_noise_free_is_single_pass(small_bundle, small_corpus):
    docs = small_corpus.split("dev")
    labels = [d.main_label for d in docs]
    loss, acc = evaluate_model(small_bundle.split_model(), docs, labels, None, None, draws=5)
    assert math.isfinite(loss) and 0 <= acc <= 1
