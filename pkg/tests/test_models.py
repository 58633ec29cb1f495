import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupdp.models import (
    Example,
    ModelParams,
    ShapeError,
    finite_diff_grad,
    init_params,
    logits,
    loss,
    n_params,
    per_example_grad,
    per_example_grads,
    per_example_losses,
    predict,
    zeros,
)


def random_case(arch, rng):
    d, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    p = init_params(arch, d, c, rng, h=int(rng.integers(2, 9)))
    p = p.with_theta(p.theta * rng.uniform(0.5, 3.0))
    return p, Example(rng.normal(size=d) * 2, int(rng.integers(c)))


def relative_gap(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestLoss:
    def test_zero_softmax_binary(self):
        p = zeros("softmax", 3, 2)
        assert loss(p, Example(np.array([1.0, -2.0, 5.0]), 1)) == pytest.approx(math.log(2), rel=1e-15)

    @pytest.mark.parametrize("c", [2, 3, 7])
    def test_uniform_logits(self, c):
        p = zeros("softmax", 4, c)
        assert loss(p, Example(np.ones(4), 0)) == pytest.approx(math.log(c), rel=1e-15)

    def test_confident_correct_class(self):
        theta = np.zeros(n_params("softmax", 1, 2))
        theta[3] = 800.0  # bias of class 1
        p = ModelParams("softmax", 1, 2, theta)
        assert loss(p, Example(np.zeros(1), 1)) == 0.0
        assert np.isfinite(loss(p, Example(np.zeros(1), 0)))

    @given(st.floats(-1e3, 1e3))
    def test_shift_invariance(self, shift):
        rng = np.random.default_rng(0)
        p = init_params("softmax", 3, 4, rng)
        theta = p.theta.copy()
        theta[-4:] += shift  # same constant on every logit
        X, y = rng.normal(size=(5, 3)), np.array([0, 1, 2, 3, 0])
        np.testing.assert_allclose(per_example_losses(p.with_theta(theta), X, y), per_example_losses(p, X, y), atol=1e-9)

    def test_shape_errors(self):
        p = zeros("softmax", 3, 2)
        with pytest.raises(ShapeError):
            loss(p, Example(np.ones(4), 0))
        with pytest.raises(ShapeError):
            loss(p, Example(np.ones(3), 2))
        with pytest.raises(ShapeError):
            ModelParams("softmax", 3, 2, np.zeros(7))
        with pytest.raises(ShapeError):
            ModelParams("cnn", 3, 2, np.zeros(8))


class TestGradients:
    @pytest.mark.parametrize("arch", ["softmax", "mlp"])
    def test_matches_central_differences(self, arch):
        rng = np.random.default_rng(11 if arch == "softmax" else 12)
        for _ in range(100):
            p, ex = random_case(arch, rng)
            assert relative_gap(per_example_grad(p, ex), finite_diff_grad(p, ex, h=1e-5)) < 1e-4

    def test_bias_block_at_zero(self):
        p = zeros("softmax", 2, 3)
        g = per_example_grad(p, Example(np.array([0.4, -1.0]), 2))
        np.testing.assert_allclose(g[-3:], np.array([1 / 3, 1 / 3, 1 / 3]) - np.array([0, 0, 1]), atol=1e-15)
        # weight block is the bias block times the input
        np.testing.assert_allclose(g[:6].reshape(3, 2), np.outer(g[-3:], [0.4, -1.0]), atol=1e-15)

    def test_duplicates_identical(self):
        rng = np.random.default_rng(3)
        p = init_params("mlp", 3, 2, rng, h=5)
        x = rng.normal(size=3)
        G = per_example_grads(p, np.vstack([x, x]), [1, 1])
        assert np.array_equal(G[0], G[1])

    @pytest.mark.parametrize("arch", ["softmax", "mlp"])
    def test_batch_mean_linearity(self, arch):
        rng = np.random.default_rng(4)
        p = init_params(arch, 3, 3, rng, h=6)
        X, y = rng.normal(size=(9, 3)), rng.integers(0, 3, size=9)

        def mean_loss(q, _):
            return float(per_example_losses(q, X, y).mean())

        fd = finite_diff_grad(p, Example(X[0], 0), h=1e-6, loss_fn=mean_loss)
        mean_grad = per_example_grads(p, X, y).mean(axis=0)
        # the per-example rows average exactly to the vectorised batch gradient
        single = np.mean([per_example_grad(p, Example(X[i], int(y[i]))) for i in range(9)], axis=0)
        assert np.max(np.abs(single - mean_grad)) < 1e-12
        assert relative_gap(mean_grad, fd) < 1e-6


class TestFiniteDifferences:
    def test_quadratic_surrogate(self):
        p = ModelParams("softmax", 1, 2, np.array([0.3, -1.2, 2.0, 0.5]))
        target = np.array([1.0, 2.0, 3.0, 4.0])

        def quad(q, _):
            return float(np.sum((q.theta - target) ** 2))

        fd = finite_diff_grad(p, Example(np.zeros(1), 0), h=1e-3, loss_fn=quad)
        np.testing.assert_allclose(fd, 2 * (p.theta - target), atol=1e-9)

    def test_second_order_convergence(self):
        p = ModelParams("softmax", 1, 2, np.array([0.7, -0.4, 0.2, 0.1]))
        ex = Example(np.array([1.3]), 0)
        exact = per_example_grad(p, ex)
        e1 = np.linalg.norm(finite_diff_grad(p, ex, h=1e-2) - exact)
        e2 = np.linalg.norm(finite_diff_grad(p, ex, h=5e-3) - exact)
        assert 3.0 < e1 / e2 < 5.0

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(zeros("softmax", 1, 2), Example(np.zeros(1), 0), h=0.0)


class TestInitAndPredict:
    def test_init_bounds_and_determinism(self):
        a = init_params("mlp", 4, 3, np.random.default_rng(5), h=16)
        b = init_params("mlp", 4, 3, np.random.default_rng(5), h=16)
        assert np.array_equal(a.theta, b.theta)
        assert np.all(np.abs(a.theta[: 16 * 4 + 16]) <= 0.5)
        assert np.all(np.abs(a.theta[16 * 4 + 16 :]) <= 0.25)

    def test_ties_to_lowest_class(self):
        assert predict(zeros("softmax", 2, 3), np.ones((4, 2))).tolist() == [0, 0, 0, 0]

    @settings(max_examples=20)
    @given(st.integers(1, 6), st.integers(2, 5), st.integers(1, 8))
    def test_logit_shapes(self, d, c, h):
        p = init_params("mlp", d, c, np.random.default_rng(0), h=h)
        assert logits(p, np.zeros((3, d))).shape == (3, c)
        assert per_example_grads(p, np.zeros((3, d)), [0, 1, 0]).shape == (3, p.size)
