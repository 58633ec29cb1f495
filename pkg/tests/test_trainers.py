import math
from dataclasses import replace

import numpy as np
import pytest

from groupdp import accountant as acc
from groupdp.data import DataError, SynthSpec, generate_synthetic
from groupdp.models import init_params, per_example_grads, per_example_losses
from groupdp.trainers import (
    ConfigError,
    TrainConfig,
    asc_thresholds,
    clip_scalar_loss,
    clip_vector,
    expected_ledger,
    loss_batch_size,
    noisy_group_losses,
    train,
    train_asc,
    train_azb,
    train_dpsgd,
)

SMALL = SynthSpec(
    sizes=(60, 40, 12),
    means=(((-1.0, 0.0), (1.0, 0.0)), ((0.0, -1.0), (0.0, 1.0)), ((1.0, 1.0), (2.0, 2.0))),
    spread=0.5,
    seed=4,
)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SMALL)


def config(algorithm, **kw):
    base = dict(T=30, M=8, lr=0.5, sigma=2.0, tau=40.0, k=5, eps_step=0.05, working_alpha=8, temperature=1.0, seed=3)
    base.update(kw)
    return TrainConfig(algorithm, **base)


class TestClipping:
    def test_vector(self):
        np.testing.assert_array_equal(clip_vector(np.array([3.0, 0.0]), 1.0), [1.0, 0.0])
        v = np.array([0.3, 0.4])
        np.testing.assert_array_equal(clip_vector(v, 1.0), v)
        np.testing.assert_array_equal(clip_vector(np.zeros(3), 1.0), np.zeros(3))

    def test_scalar(self):
        assert clip_scalar_loss(0.3, 1.0) == 0.3
        assert clip_scalar_loss(5.0, 1.0) == 1.0
        assert clip_scalar_loss(clip_scalar_loss(5.0, 2.0), 2.0) == clip_scalar_loss(5.0, 2.0)

    def test_loss_batch_size_guard(self):
        assert loss_batch_size(0.29, 100) == 29
        assert loss_batch_size(1.0, 7) == 7


class TestNoisyLosses:
    def test_noiseless_full_batch_is_exact(self, small):
        p = init_params("softmax", 2, 2, np.random.default_rng(0))
        out = noisy_group_losses(small, p, 1.0, math.inf, 0.0, np.random.default_rng(1))
        exact = [per_example_losses(p, small.X[g], small.y[g]).mean() for g in range(small.G)]
        np.testing.assert_allclose(out, exact, rtol=1e-14)

    def test_vanishing_clip_leaves_pure_noise(self, small):
        p = init_params("softmax", 2, 2, np.random.default_rng(0))
        r = np.random.default_rng(2)
        draws = np.array([noisy_group_losses(small, p, 1.0, 1e-300, 3.0, r) for _ in range(4000)])
        sizes = np.asarray(small.sizes)
        np.testing.assert_allclose(draws.std(axis=0) * sizes / 3.0, 1.0, atol=0.05)
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * 3.0 / sizes / math.sqrt(4000))

    def test_variance_decomposition(self, small):
        # subsampled batch of half the group: noise tau^2/b^2 plus the without-replacement sampling variance
        p = init_params("softmax", 2, 2, np.random.default_rng(5))
        gamma, zeta, tau, reps = 0.5, 0.9, 2.0, 10_000
        r = np.random.default_rng(6)
        draws = np.array([noisy_group_losses(small, p, gamma, zeta, tau, r) for _ in range(reps)])
        for g in range(small.G):
            n = small.sizes[g]
            b = loss_batch_size(gamma, n)
            clipped = np.minimum(per_example_losses(p, small.X[g], small.y[g]), zeta)
            analytic = tau**2 / b**2 + clipped.var() / b * (n - b) / (n - 1)
            x = draws[:, g]
            dev = (x - x.mean()) ** 2
            se = dev.std(ddof=1) / math.sqrt(reps)
            assert abs(dev.mean() - analytic) < 3 * se

    def test_empty_loss_batch(self, small):
        p = init_params("softmax", 2, 2, np.random.default_rng(0))
        with pytest.raises(DataError):
            noisy_group_losses(small, p, 0.01, 1.0, 1.0, np.random.default_rng(0))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            config("sgd")
        with pytest.raises(ConfigError):
            config("asc", eps_step=None)
        with pytest.raises(ConfigError):
            config("dpsgd", temperature=-1.0)
        with pytest.raises(ConfigError):
            config("dpsgd", momentum=1.0)
        config("dpsgd", temperature=0.0)  # zero temperature is allowed

    def test_asc_needs_noise(self, small):
        with pytest.raises(ConfigError):
            train(config("asc", sigma=0.0), small)


class TestDpsgd:
    def test_noiseless_full_batch_is_gradient_descent(self, small):
        cfg = config("dpsgd", T=1, M=small.n, sigma=0.0, xi=1e9, k=None, lr=0.7)
        p0 = init_params("softmax", 2, 2, np.random.default_rng(cfg.seed))
        X, y, _ = small.pooled()
        expected = p0.theta - 0.7 * per_example_grads(p0, X, y).mean(axis=0)
        out = train_dpsgd(cfg, small)
        assert np.max(np.abs(out.params.theta - expected)) < 1e-10

    def test_batch_too_large(self, small):
        with pytest.raises(DataError):
            train(config("dpsgd", M=small.n + 1), small)

    def test_momentum_matches_hand_recursion(self, small):
        cfg = config("dpsgd", T=2, M=small.n, sigma=0.0, xi=1e9, k=None, lr=0.3, momentum=0.5)
        p = init_params("softmax", 2, 2, np.random.default_rng(cfg.seed))
        X, y, _ = small.pooled()
        g1 = per_example_grads(p, X, y).mean(axis=0)
        theta1 = p.theta - 0.3 * g1
        g2 = per_example_grads(p.with_theta(theta1), X, y).mean(axis=0)
        theta2 = theta1 - 0.3 * (0.5 * g1 + g2)
        assert np.max(np.abs(train(cfg, small).params.theta - theta2)) < 1e-12


def record_norms(store):
    def hook(info):
        store.append(info)

    return hook


@pytest.mark.parametrize("algo", ["dpsgd", "asc", "azb", "azb-weak", "azb-prop"])
def test_clip_contract_every_step(small, algo):
    infos = []
    train(config(algo, xi=0.05), small, on_step=record_norms(infos))
    assert len(infos) == 30
    for info in infos:
        assert np.all(info.max_norms <= info.thresholds * (1 + 1e-12))


@pytest.mark.parametrize("algo", ["dpsgd", "asc", "azb", "azb-weak", "azb-prop"])
def test_ledger_matches_closed_form(small, algo):
    report = train(config(algo, T=37, k=6), small)
    expected = expected_ledger(report.config, small.sizes)
    for g in range(small.G):
        got = report.ledger.curve(g).eps[0]
        assert got == pytest.approx(expected[g], rel=1e-10)


@pytest.mark.parametrize("algo", ["dpsgd", "asc", "azb", "azb-prop"])
def test_determinism(small, algo):
    a = train(config(algo), small).to_dict()
    b = train(config(algo), small).to_dict()
    assert a == b


class TestAsc:
    def test_single_group_equals_dpsgd(self):
        one = generate_synthetic(SynthSpec(sizes=(50,), means=(((-1.0, 0.0), (1.0, 0.5)),), seed=1))
        cfg = config("asc", k=None, T=20, M=10)
        xi = asc_thresholds(cfg.sigma, [10], [50], cfg.working_alpha, cfg.eps_step)[0]
        a = train_asc(cfg, one)
        b = train_dpsgd(replace(cfg, algorithm="dpsgd", xi=xi, eps_step=None), one)
        assert np.array_equal(a.params.theta, b.params.theta)

    def test_uniform_ledger_across_groups(self, small):
        report = train(config("asc"), small)
        curves = [report.ledger.curve(g) for g in range(small.G)]
        assert curves[0] == curves[1] == curves[2]

    def test_total_after_ten_steps_two_releases(self, small):
        cfg = config("asc", T=10, k=5)
        report = train(cfg, small)
        loss = acc.rdp_curve(acc.MechanismSpec(cfg.gamma_loss, cfg.tau / cfg.zeta), (cfg.working_alpha,)).eps[0]
        assert report.ledger.curve(0).eps[0] == math.fsum([10 * cfg.eps_step, 2 * loss])

    def test_zero_allocation_group_still_accrues(self, small):
        # M=2 over three groups leaves one group empty at the start
        infos = []
        report = train(config("asc", M=2, k=None, T=5), small, on_step=record_norms(infos))
        assert 0 in infos[0].batch_sizes.tolist()
        assert report.ledger.curve(0) == report.ledger.curve(1) == report.ledger.curve(2)

    def test_noiseless_full_batch_is_dro_gradient(self):
        equal = generate_synthetic(replace(SMALL, sizes=(20, 20, 20)))
        cfg = config("asc", T=1, M=60, k=None, sigma=1e12, add_noise=False, lr=0.4)
        infos = []
        out = train_asc(cfg, equal, on_step=record_norms(infos))
        assert infos[0].batch_sizes.tolist() == [20, 20, 20]
        assert np.all(infos[0].thresholds > 1e6)
        p0 = init_params("softmax", 2, 2, np.random.default_rng(cfg.seed))
        dro = np.mean([per_example_grads(p0, equal.X[g], equal.y[g]).mean(axis=0) for g in range(3)], axis=0)
        assert np.max(np.abs(out.params.theta - (p0.theta - 0.4 * dro))) < 1e-8

    def test_thresholds_respect_budget(self):
        xis = asc_thresholds(3.0, [5, 0, 40], [100, 50, 400], 10, 0.02)
        assert xis[1] == 0.0
        for m, n, xi in ((5, 100, xis[0]), (40, 400, xis[2])):
            assert acc.subsampled_gaussian_rdp(10, acc.MechanismSpec(m / n, 3.0 / xi)) <= 0.02

    def test_larger_rate_gets_smaller_threshold(self):
        xis = asc_thresholds(3.0, [5, 40], [100, 100], 10, 0.02)
        assert xis[1] < xis[0]


class TestAzb:
    def test_equal_sizes_symmetric(self):
        equal = generate_synthetic(replace(SMALL, sizes=(30, 30, 30)))
        base = train_azb(config("azb"), equal)
        weak = train_azb(config("azb-weak"), equal)
        prop = train_azb(config("azb-prop"), equal)
        for report in (base, weak, prop):
            assert report.ledger.curve(0) == report.ledger.curve(1) == report.ledger.curve(2)
        assert base.ledger.curve(0) == weak.ledger.curve(0)
        # base draws M from each group, prop spreads M across the groups, so prop is cheaper
        assert prop.ledger.curve(0).eps[0] < base.ledger.curve(0).eps[0]

    def test_base_epsilons_reverse_size_order(self, small):
        eps = train(config("azb"), small).epsilons
        assert eps[2][0] > eps[1][0] > eps[0][0]

    def test_prop_epsilons_equal(self, small):
        eps = train(config("azb-prop"), small).epsilons
        assert eps[0] == eps[1] == eps[2]

    def test_batch_exceeds_group(self, small):
        with pytest.raises(DataError):
            train(config("azb", M=13), small)
        train(config("azb-prop", M=13), small)  # prop only needs M <= n

    def test_lambda_history_on_simplex(self, small):
        report = train(config("azb", temperature=3.0), small)
        for rec in report.history:
            assert abs(sum(rec["lambda"]) - 1.0) < 1e-12
