import io
import math

import numpy as np
import pytest

from privrep.errors import DimensionError, DivergenceError, DomainError, SchemaError
from privrep.tensor_nn import (
    ParamSet, RngStream, affine_backward, affine_forward, embedding_bag_forward,
    embedding_lookup_backward, embedding_lookup_forward, glorot_uniform, gradient_check,
    log_softmax, mean_pool_backward, mean_pool_forward, read_checkpoint, relu_backward,
    relu_forward, sgd_step, softmax, softmax_cross_entropy_backward,
    softmax_cross_entropy_forward, stream_id_for, write_checkpoint,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestAffine:
    def test_identity(self):
        out = affine_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(out, [[1, 2]])

    def test_hand_arithmetic(self):
        out = affine_forward(np.array([[1.0, 1.0]]), np.array([[2.0, 0], [0, 3.0]]),
                             np.array([1.0, 1.0]))
        np.testing.assert_array_equal(out, [[3, 4]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        b = rng.normal(size=2)
        np.testing.assert_allclose(affine_forward(x, w, b), naive_matmul(x, w) + b, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            affine_forward(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))

    def test_backward_shapes(self):
        x, w = np.ones((5, 3)), np.ones((3, 2))
        gx, gw, gb = affine_backward(np.ones((5, 2)), x, w)
        assert gx.shape == (5, 3) and gw.shape == (3, 2) and gb.shape == (1, 2)
        np.testing.assert_array_equal(gb, [[5, 5]])


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_relu_backward_zero_at_kink(self):
        g = relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(g, [0, 0, 1])

    def test_mean_pool_identical_rows(self):
        row = np.array([1.5, -2.0, 3.0])
        np.testing.assert_allclose(mean_pool_forward(np.tile(row, (4, 1))), row[None, :])

    def test_mean_pool_backward_spreads_evenly(self):
        g = mean_pool_backward(np.array([[4.0, 8.0]]), 4)
        np.testing.assert_array_equal(g, np.tile([1.0, 2.0], (4, 1)))

    def test_softmax_sums_to_one(self):
        p = softmax(np.random.default_rng(1).normal(size=(10, 5)) * 30)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_shift_invariance(self):
        z = np.random.default_rng(2).normal(size=(6, 4))
        np.testing.assert_allclose(softmax(z + 1000.0), softmax(z), atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self):
        z = np.random.default_rng(3).normal(size=(4, 3))
        np.testing.assert_allclose(log_softmax(z), np.log(softmax(z)), atol=1e-12)


class TestCrossEntropy:
    def test_uniform_four_classes(self):
        assert softmax_cross_entropy_forward(np.zeros((1, 4)), [2]) == pytest.approx(math.log(4))

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            softmax_cross_entropy_forward(np.zeros((1, 4)), [4])

    def test_backward_is_p_minus_onehot_over_n(self):
        z = np.array([[0.0, 0.0], [1.0, -1.0]])
        g = softmax_cross_entropy_backward(z, [0, 1])
        p = softmax(z)
        expected = (p - np.eye(2)[[0, 1]]) / 2
        np.testing.assert_allclose(g, expected)


class TestEmbedding:
    def test_lookup_and_scatter(self):
        table = np.arange(12, dtype=float).reshape(4, 3)
        np.testing.assert_array_equal(embedding_lookup_forward(table, [3, 1]), table[[3, 1]])
        grad = np.zeros_like(table)
        embedding_lookup_backward(np.ones((3, 3)), [1, 1, 2], grad)
        np.testing.assert_array_equal(grad[:, 0], [0, 2, 1, 0])

    def test_bag_skips_mask(self):
        table = np.array([[9.0, 9.0], [1.0, 2.0], [3.0, 4.0]])
        pooled, counts = embedding_bag_forward(table, np.array([0, 1, 2, 0]),
                                               np.array([0, 3, 4]), 0)
        np.testing.assert_array_equal(pooled, [[2.0, 3.0], [0.0, 0.0]])
        np.testing.assert_array_equal(counts, [2, 0])


class _Quadratic:
    """loss = scale * sum((x @ w - y)^2); used to exercise gradient_check."""

    def __init__(self, scale=1.0, constant=False):
        rng = np.random.default_rng(5)
        self.params = ParamSet({"w": rng.normal(size=(3, 2))})
        self.scale = scale
        self.constant = constant

    def loss(self, x, y, backward=False):
        w = self.params["w"]
        if self.constant:
            if backward:
                self.params.grads["w"] += 0.0
            return 1.0
        r = x @ w - y
        if backward:
            self.params.grads["w"] += self.scale * 2 * x.T @ r
        return float(self.scale * np.sum(r * r))


class _TinyNet:
    def __init__(self, seed=0):
        rng = RngStream(seed)
        self.params = ParamSet({"w1": glorot_uniform(rng, 4, 5), "b1": np.zeros((1, 5)),
                                "w2": glorot_uniform(rng, 5, 3), "b2": np.zeros((1, 3))})
        self.params.values["b1"] += 0.1

    def loss(self, x, y, backward=False):
        p = self.params
        h_pre = affine_forward(x, p["w1"], p["b1"])
        h = relu_forward(h_pre)
        z = affine_forward(h, p["w2"], p["b2"])
        loss = softmax_cross_entropy_forward(z, y)
        if backward:
            gz = softmax_cross_entropy_backward(z, y)
            gh, gw2, gb2 = affine_backward(gz, h, p["w2"])
            _, gw1, gb1 = affine_backward(relu_backward(gh, h_pre), x, p["w1"])
            for k, g in (("w1", gw1), ("b1", gb1), ("w2", gw2), ("b2", gb2)):
                p.grads[k] += g
        return loss


class TestGradients:
    def test_tiny_model_h_1e4(self):
        x = np.random.default_rng(1).normal(size=(6, 3))
        y = np.random.default_rng(2).normal(size=(6, 2))
        assert gradient_check(_Quadratic(), x, y, h=1e-4) < 1e-4

    def test_two_layer_net(self):
        x = np.random.default_rng(3).normal(size=(8, 4))
        assert gradient_check(_TinyNet(), x, np.arange(8) % 3) < 1e-4

    def test_constant_output_zero_gradients(self):
        m = _Quadratic(constant=True)
        m.loss(None, None, backward=True)
        np.testing.assert_array_equal(m.params.grads["w"], 0.0)

    def test_doubling_loss_doubles_gradients(self):
        x = np.ones((2, 3))
        y = np.zeros((2, 2))
        a, b = _Quadratic(1.0), _Quadratic(2.0)
        a.loss(x, y, backward=True)
        b.loss(x, y, backward=True)
        np.testing.assert_allclose(b.params.grads["w"], 2 * a.params.grads["w"])


class TestSgd:
    def test_step_clears_gradients(self):
        p = ParamSet({"w": np.array([1.0])})
        p.grads["w"][:] = 2.0
        sgd_step(p, 0.1)
        assert p.grads["w"][0, 0] == 0.0

    def test_single_step(self):
        p = ParamSet({"w": np.array([1.0])})
        p.grads["w"][:] = 2.0
        sgd_step(p, 0.1)
        assert p["w"][0] == pytest.approx(0.8)

    def test_zero_lr(self):
        p = ParamSet({"w": np.array([1.0, -3.0])})
        p.grads["w"][:] = [5.0, 7.0]
        sgd_step(p, 0.0)
        np.testing.assert_array_equal(p["w"], [[1.0, -3.0]])

    def test_two_steps_equal_summed_step(self):
        a = ParamSet({"w": np.array([0.5, 0.25])})
        b = a.copy()
        g = np.array([0.125, -0.5])
        a.grads["w"][:] = g
        sgd_step(a, 0.25)
        a.grads["w"][:] = g
        sgd_step(a, 0.25)
        b.grads["w"][:] = 2 * g
        sgd_step(b, 0.25)
        np.testing.assert_array_equal(a["w"], b["w"])

    def test_non_finite_gradient_raises(self):
        p = ParamSet({"w": np.array([1.0])})
        p.grads["w"][:] = np.nan
        with pytest.raises(DivergenceError) as err:
            sgd_step(p, 0.1, epoch=2, batch=7)
        assert err.value.epoch == 2 and err.value.batch == 7
        assert p["w"][0] == 1.0


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = RngStream.derive(4, "x", 1), RngStream.derive(4, "x", 1)
        np.testing.assert_array_equal(a.uniform_open(10), b.uniform_open(10))

    def test_tags_separate_streams(self):
        a, b = RngStream.derive(4, "x"), RngStream.derive(4, "y")
        assert not np.array_equal(a.uniform_open(10), b.uniform_open(10))
        assert stream_id_for("a", "b") != stream_id_for("ab")

    def test_uniform_open_excludes_endpoints(self):
        u = RngStream(0).uniform_open(100_000)
        assert u.min() > 0.0 and u.max() < 1.0

    def test_glorot_bounds(self):
        w = glorot_uniform(RngStream(0), 30, 70)
        assert np.abs(w).max() <= math.sqrt(6 / 100)


class TestCheckpoint:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(7)
        p = ParamSet({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 4)) * 1e-300})
        buf = io.StringIO()
        write_checkpoint(buf, p, '{"k": 1}')
        buf.seek(0)
        q, header = read_checkpoint(buf)
        assert header == '{"k": 1}'
        assert p.equals(q)

    def test_rejects_garbage(self):
        with pytest.raises(SchemaError):
            read_checkpoint(io.StringIO("not a checkpoint\n"))
