import numpy as np
import pytest

from privrep.data import Vocabulary
from privrep.dp import MASK_ID, PrivacyParams
from privrep.errors import DimensionError, DomainError, SchemaError
from privrep.model import ClassifierHead, FeatureExtractor, ModelBundle, SplitModel, classify, extract
from privrep.tensor_nn import ParamSet, RngStream, gradient_check


def _toy_extractor():
    emb = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 2.0], [3.0, -4.0]])
    w = np.array([[1.0, 0.0, -1.0], [0.5, 1.0, 0.0]])
    b = np.array([[0.1, -0.2, 0.3]])
    return FeatureExtractor(4, 2, 3, params=ParamSet({"embedding": emb, "w": w, "b": b}))


class TestExtractor:
    def test_hand_computed(self):
        # mean of rows 2 and 3 is (2, -1); (2, -1) @ w + b = (1.6, -1.2, -1.7)
        rep = extract(_toy_extractor(), [2, 3])
        np.testing.assert_allclose(rep, [1.6, 0.0, 0.0])

    def test_mask_excluded_from_mean(self):
        f = _toy_extractor()
        np.testing.assert_allclose(extract(f, [2, MASK_ID, 3, MASK_ID]), extract(f, [2, 3]))

    def test_all_mask_gives_relu_bias(self):
        f = _toy_extractor()
        np.testing.assert_allclose(extract(f, [MASK_ID] * 4), [0.1, 0.0, 0.3])

    def test_order_invariant(self):
        f = FeatureExtractor(50, 8, 6, rng=RngStream(1))
        np.testing.assert_allclose(extract(f, [4, 9, 17, 9]), extract(f, [9, 17, 9, 4]),
                                   atol=1e-12)

    def test_mask_row_zero_at_init(self):
        f = FeatureExtractor(10, 4, 3, rng=RngStream(0))
        np.testing.assert_array_equal(f.params["embedding"][MASK_ID], 0.0)

    def test_out_of_range_token(self):
        with pytest.raises(DomainError):
            _toy_extractor().extract_batch([[2, 7]])


class TestHead:
    def test_zero_weights_uniform(self):
        c = ClassifierHead(5, 4, params=ParamSet({"w": np.zeros((5, 4)), "b": np.zeros((1, 4))}))
        np.testing.assert_allclose(classify(c, np.ones(5)), 0.25)

    def test_probabilities_sum_to_one(self):
        c = ClassifierHead(6, 3, rng=RngStream(2))
        p = c.predict_proba(np.random.default_rng(0).normal(size=(20, 6)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    def test_dimension_check(self):
        with pytest.raises(DimensionError):
            ClassifierHead(6, 3).logits(np.ones(5))


class TestSplitModel:
    def _model(self, normalize):
        rng = RngStream(3)
        return SplitModel(FeatureExtractor(12, 4, 5, rng=rng), ClassifierHead(5, 3, rng=rng),
                          normalize=normalize)

    @pytest.mark.parametrize("normalize", [False, True])
    def test_gradients(self, normalize):
        docs = [[2, 3, 4], [5, 0, 6, 7], [8, 9], [10, 11, 2, 3, 0]]
        assert gradient_check(self._model(normalize), docs, [0, 1, 2, 1]) < 1e-4

    def test_gradients_with_fixed_noise(self):
        docs = [[2, 3], [4, 5, 6]]
        noise = np.random.default_rng(0).laplace(size=(2, 5))
        model = self._model(True)

        class Noisy:
            params = model.params

            def loss(self, x, y, backward=False):
                return model.loss(x, y, backward, noise=noise)

        assert gradient_check(Noisy(), docs, [0, 2]) < 1e-4

    def test_mismatched_halves(self):
        with pytest.raises(DimensionError):
            SplitModel(FeatureExtractor(5, 2, 3), ClassifierHead(4, 2))


class TestBundle:
    def test_save_load_round_trip(self, tmp_path):
        b = ModelBundle.initialize(Vocabulary(["x", "y"]), 3, seed=1, embed_dim=4, rep_dim=5,
                                   training_params=PrivacyParams(0.5, 0.2), normalized=True,
                                   metadata={"note": "t"})
        b.save(tmp_path / "m.ckpt")
        again = ModelBundle.load(tmp_path / "m.ckpt")
        assert again.equals(b)
        assert again.vocabulary == b.vocabulary and again.metadata == {"note": "t"}

    def test_non_private_round_trip(self, tmp_path):
        b = ModelBundle.initialize(Vocabulary(["x"]), 2, embed_dim=2, rep_dim=2)
        b.save(tmp_path / "m.ckpt")
        assert not ModelBundle.load(tmp_path / "m.ckpt").training_params.is_private

    def test_rejects_other_files(self, tmp_path):
        (tmp_path / "x").write_text('{"text": "hello"}\n')
        with pytest.raises(SchemaError):
            ModelBundle.load(tmp_path / "x")

    def test_copy_is_independent(self):
        b = ModelBundle.initialize(Vocabulary(["x"]), 2, embed_dim=2, rep_dim=2)
        c = b.copy()
        c.head.params["w"][0, 0] += 1
        assert not b.equals(c)
