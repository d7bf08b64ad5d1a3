import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privrep.data import Document, Vocabulary
from privrep.dp import MASK_ID, MaskVector, PrivacyParams, normalize_minmax
from privrep.errors import DimensionError, ParseError
from privrep.model import ModelBundle, extract
from privrep.pipeline import (
    REP_FIELDS, PrivatizedRepresentation, deserialize, dpnr, privatize_batch, read_labels,
    read_reps, read_user_masks, serialize, server_classify_batch, write_labels, write_reps,
)
from privrep.tensor_nn import RngStream
from privrep.training import TrainConfig, train_robust

GOLDEN = Path(__file__).parent / "golden" / "toy_reps.jsonl"


def toy_bundle():
    vocab = Vocabulary([f"w{i}" for i in range(10)])
    return ModelBundle.initialize(vocab, 2, seed=0, embed_dim=4, rep_dim=3)


def toy_docs():
    return [Document(f"t{i}", tuple(2 + (i * 3 + j) % 10 for j in range(5 + i)), i % 2)
            for i in range(4)]


def golden_lines():
    reps = privatize_batch(toy_docs(), toy_bundle().extractor, PrivacyParams(1.0, 0.3), seed=7)
    return [serialize(r) for r in reps]


rep_values = st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64),
                      min_size=1, max_size=16)


class TestSerialization:
    def test_key_order_and_no_tokens(self):
        rep = PrivatizedRepresentation("a", [0.25, -3.5], 1.0, 0.5, PrivacyParams(1, 0.5)
                                       .epsilon_effective)
        obj = json.loads(serialize(rep))
        assert tuple(obj) == REP_FIELDS
        assert "tokens" not in obj and "text" not in obj
        assert len(obj["values"]) == 2 and obj["dim"] == 2

    @given(rep_values, st.sampled_from([0.05, 1.0, 5.0, math.inf]), st.floats(0, 1))
    @settings(max_examples=200)
    def test_round_trip(self, values, eps, mu):
        p = PrivacyParams(eps, mu)
        rep = PrivatizedRepresentation("r", values, eps, mu, p.epsilon_effective)
        assert deserialize(serialize(rep)) == rep

    def test_inconsistent_budget_rejected(self):
        rep = PrivatizedRepresentation("r", [0.1], 1.0, 0.5, 0.9)
        with pytest.raises(ParseError):
            deserialize(serialize(rep), line=4)

    @pytest.mark.parametrize("edit", [
        lambda o: o.pop("mu"),
        lambda o: o.update(tokens=[3, 4]),
        lambda o: o.update(dim=5),
        lambda o: o.update(values="x"),
    ])
    def test_schema_violations(self, edit):
        obj = json.loads(serialize(PrivatizedRepresentation("r", [0.1, 0.2], 1.0, 0.0, 1.0)))
        edit(obj)
        with pytest.raises(ParseError):
            deserialize(json.dumps(obj))

    def test_values_read_only(self):
        rep = PrivatizedRepresentation("r", [0.1], 1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            rep.values[0] = 2.0

    def test_empty_file(self, tmp_path):
        write_reps(tmp_path / "r.jsonl", [])
        assert read_reps(tmp_path / "r.jsonl") == []

    def test_bad_line_number(self, tmp_path):
        good = serialize(PrivatizedRepresentation("r", [0.1], 1.0, 0.0, 1.0))
        (tmp_path / "r.jsonl").write_text(good + "\n" + "{}\n")
        with pytest.raises(ParseError) as err:
            read_reps(tmp_path / "r.jsonl")
        assert err.value.line == 2


class TestDpnr:
    def test_no_privacy_is_normalized_raw(self):
        b, doc = toy_bundle(), toy_docs()[1]
        rep = dpnr(doc, b.extractor, PrivacyParams.non_private(), RngStream(0))
        np.testing.assert_array_equal(rep.values, normalize_minmax(extract(b.extractor, doc.tokens)))

    def test_full_masking_ignores_content(self):
        b = toy_bundle()
        p = PrivacyParams(1.0, 1.0)
        a = dpnr(Document("x", (2, 3, 4), 0), b.extractor, p, RngStream(5))
        c = dpnr(Document("x", (9, 8, 7), 0), b.extractor, p, RngStream(5))
        np.testing.assert_array_equal(a.values, c.values)
        assert a.epsilon_effective == 0.0

    def test_metadata_stamped(self):
        rep = dpnr(toy_docs()[0], toy_bundle().extractor, PrivacyParams(1.0, 0.5), RngStream(0))
        assert rep.epsilon_effective == pytest.approx(0.6201, abs=1e-4)
        assert rep.mask_source == "random"

    def test_user_mask_flagged(self):
        doc = toy_docs()[0]
        rep = dpnr(doc, toy_bundle().extractor, PrivacyParams(1.0, 0.2), RngStream(0),
                   MaskVector(len(doc.tokens), {0}))
        assert rep.mask_source == "user"

    def test_batch_order_independent(self):
        f, docs = toy_bundle().extractor, toy_docs()
        p = PrivacyParams(0.5, 0.3)
        fwd = {r.record_id: r for r in privatize_batch(docs, f, p, 3)}
        rev = {r.record_id: r for r in privatize_batch(docs[::-1], f, p, 3)}
        assert fwd == rev

    def test_views_differ(self):
        f, docs = toy_bundle().extractor, toy_docs()
        p = PrivacyParams(0.5)
        a, b = privatize_batch(docs, f, p, 3, view=0), privatize_batch(docs, f, p, 3, view=1)
        assert not np.array_equal(a[0].values, b[0].values)

    def test_golden_file(self):
        assert golden_lines() == GOLDEN.read_text().splitlines()

    def test_mask_file(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"record_id": "t0", "length": 5, "masked": [1, 3]}\n')
        masks = read_user_masks(tmp_path / "m.jsonl")
        assert masks["t0"].zero_positions == frozenset({1, 3})
        (tmp_path / "bad.jsonl").write_text('{"record_id": "t0"}\n')
        with pytest.raises(ParseError):
            read_user_masks(tmp_path / "bad.jsonl")


class TestServer:
    def test_rejects_raw_inputs(self):
        head = toy_bundle().head
        with pytest.raises(TypeError):
            server_classify_batch([np.zeros(3)], head)
        with pytest.raises(TypeError):
            server_classify_batch(toy_docs(), head)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            server_classify_batch([PrivatizedRepresentation("r", [0.1, 0.2], 1.0, 0.0, 1.0)],
                                  toy_bundle().head)

    def test_empty(self):
        assert server_classify_batch([], toy_bundle().head) == []

    def test_shuffle_invariant(self):
        b = toy_bundle()
        reps = privatize_batch(toy_docs(), b.extractor, PrivacyParams(1.0), 0)
        a = {p["record_id"]: p for p in server_classify_batch(reps, b.head)}
        c = {p["record_id"]: p for p in server_classify_batch(reps[::-1], b.head)}
        assert a == c

    def test_accuracy_close_to_training_dev(self, small_corpus, small_bundle):
        cfg = TrainConfig(epochs=3, seed=3, rep_dim=16, embed_dim=8, privacy=PrivacyParams(5.0),
                          init_from=small_bundle)
        robust = train_robust(small_corpus, cfg)
        dev = small_corpus.split("dev")
        dev_acc = robust.metadata["history"][robust.metadata["best_epoch"] - 1]["dev_accuracy"]
        reps = privatize_batch(dev, robust.extractor, PrivacyParams(5.0), seed=11)
        preds = server_classify_batch(reps, robust.head)
        acc = np.mean([p["label"] == d.main_label for p, d in zip(preds, dev)])
        assert abs(acc - dev_acc) <= 0.1

    def test_labels_sidecar(self, tmp_path, small_corpus):
        docs = small_corpus.split("test")
        write_labels(tmp_path / "l.jsonl", docs, small_corpus.split_of)
        labels = read_labels(tmp_path / "l.jsonl")
        d = docs[0]
        assert labels[d.record_id]["split"] == "test"
        assert labels[d.record_id]["attributes"] == d.private_attributes
        assert all("tokens" not in row for row in labels.values())
