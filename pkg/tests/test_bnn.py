"""Tests for the Bayesian MLP: forward pass, gradients, HMC and Gibbs updates."""

import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import logit

from pheno_ml.bnn import (
    BayesianMLPClassifier,
    BnnArchitecture,
    HmcConfig,
    HmcState,
    PosteriorSamples,
    PriorSpec,
    check_capacity,
    forward,
    gibbs_update_hyperparams,
    grad_log_posterior,
    group_posterior,
    hmc_step,
    leapfrog,
    log_posterior,
    predict_bnn,
    train_bnn,
)
from pheno_ml.errors import CapacityError, DataError


def gaussian(x):
    return -0.5 * float(x @ x), -x


def _tiny_arch():
    return BnnArchitecture(n_inputs=1, n_hidden_layers=1, width_factor=1)


class TestForward:
    """Test the network output."""

    def test_zero_weights(self):
        """All-zero weights give output 0."""
        arch = BnnArchitecture(3, n_hidden_layers=2)
        weights = arch.unpack(np.zeros(arch.n_weights))
        assert forward(weights, np.array([1.0, -2.0, 0.5])) == 0.0

    def test_hand_computed(self):
        """One hidden unit: 3 * tanh(2 * 0.25 + 0.5) - 1."""
        weights = [np.array([[2.0], [0.5]]), np.array([[3.0], [-1.0]])]
        assert forward(weights, np.array([0.25])) == pytest.approx(3 * math.tanh(1.0) - 1)

    def test_odd_without_biases(self):
        """With tanh and zero biases, flipping every weight flips the output."""
        arch = BnnArchitecture(2, n_hidden_layers=2, width_factor=2)
        rng = np.random.default_rng(0)
        weights = arch.unpack(rng.normal(size=arch.n_weights))
        for W in weights:
            W[-1] = 0.0
        x = np.array([0.3, -1.2])
        flipped = [-W for W in weights]
        assert forward(flipped, x) == pytest.approx(-forward(weights, x))

    def test_shape_mismatch(self):
        """Inputs of the wrong width are rejected."""
        arch = _tiny_arch()
        with pytest.raises(DataError, match="network expects 1"):
            forward(arch.unpack(np.zeros(arch.n_weights)), np.array([1.0, 2.0]))


class TestPosterior:
    """Test the log posterior and its gradient."""

    def test_zero_weights_balanced(self):
        """At zero weights the likelihood is n log 0.5 and the prior keeps only constants."""
        arch = BnnArchitecture(2, n_hidden_layers=1)
        prior = PriorSpec.default(arch)
        X = np.ones((6, 2))
        y = np.array([0, 1] * 3)
        k = prior.group_sizes()
        constants = np.sum(0.5 * k * np.log(prior.precisions / (2 * np.pi)))
        value = log_posterior(np.zeros(arch.n_weights), arch, prior, X, y)
        assert value == pytest.approx(6 * math.log(0.5) + constants)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        """Backpropagation agrees with central differences on random architectures."""
        rng = np.random.default_rng(seed)
        arch = BnnArchitecture(
            int(rng.integers(1, 6)),
            n_hidden_layers=int(rng.integers(1, 3)),
            width_factor=int(rng.integers(1, 3)),
            activation="tanh",
        )
        prior = PriorSpec.default(arch)
        X = rng.normal(size=(8, arch.n_inputs))
        y = rng.integers(0, 2, 8)
        theta = rng.normal(0.0, 0.5, arch.n_weights)
        grad = grad_log_posterior(theta, arch, prior, X, y)
        eps = 1e-6
        coords = rng.choice(arch.n_weights, size=min(20, arch.n_weights), replace=False)
        for j in coords:
            step = np.zeros(arch.n_weights)
            step[j] = eps
            numeric = (
                log_posterior(theta + step, arch, prior, X, y)
                - log_posterior(theta - step, arch, prior, X, y)
            ) / (2 * eps)
            assert grad[j] == pytest.approx(numeric, rel=1e-5, abs=1e-6)

    def test_prior_gradient(self):
        """Without data the gradient is -tau * w per group."""
        arch = _tiny_arch()
        prior = PriorSpec.default(arch)
        theta = np.array([0.5, -1.0, 2.0, 0.25])
        grad = grad_log_posterior(theta, arch, prior, np.zeros((0, 1)), np.zeros(0))
        np.testing.assert_allclose(grad, -prior.precisions[prior.group_of] * theta)

    def test_non_binary_labels(self):
        """Labels outside {0, 1} are rejected."""
        arch = _tiny_arch()
        with pytest.raises(DataError, match="binary"):
            log_posterior(
                np.zeros(arch.n_weights), arch, PriorSpec.default(arch), np.ones((2, 1)), [0, 2]
            )


class TestHmc:
    """Test the integrator and the transition kernel."""

    def test_leapfrog_reversible(self):
        """Integrating forward and back with negated momentum returns to the start."""
        x0 = np.array([1.0, -0.5])
        p0 = np.array([0.3, 0.8])
        x1, p1, _, g1 = leapfrog(x0, p0, -x0, gaussian, 0.1, 25)
        x2, p2, _, _ = leapfrog(x1, -p1, g1, gaussian, 0.1, 25)
        np.testing.assert_allclose(x2, x0, atol=1e-10)
        np.testing.assert_allclose(-p2, p0, atol=1e-10)

    def test_small_step_conserves_energy(self):
        """Tiny steps leave the Hamiltonian essentially unchanged."""
        x0, p0 = np.array([1.0]), np.array([0.5])
        x, p, log_prob, _ = leapfrog(x0, p0, -x0, gaussian, 1e-5, 10)
        h0 = 0.5 * x0 @ x0 + 0.5 * p0 @ p0
        assert abs(-log_prob + 0.5 * p @ p - h0) < 1e-6

    def test_energy_error_is_second_order(self):
        """Halving the step over the same time cuts the energy error about fourfold."""

        def error(step, n):
            x0 = np.array([1.0])
            x, p, log_prob, _ = leapfrog(x0, np.zeros(1), -x0, gaussian, step, n)
            return abs(-log_prob + 0.5 * p @ p - 0.5)

        ratio = error(0.1, 10) / error(0.05, 20)
        assert 3.0 <= ratio <= 5.0

    def test_samples_standard_gaussian(self):
        """HMC draws from a standard Gaussian have mean near zero."""
        rng = np.random.default_rng(0)
        state = HmcState.at(np.array([2.0, -2.0]), gaussian)
        draws = []
        for _ in range(3000):
            state = hmc_step(state, gaussian, 0.2, 8, rng).state
            draws.append(state.position)
        draws = np.array(draws[500:])
        assert np.abs(draws.mean(axis=0)).max() < 0.15
        np.testing.assert_allclose(draws.var(axis=0), 1.0, atol=0.2)

    def test_divergence_is_rejected(self):
        """A trajectory that leaves the finite region is rejected in place."""

        def explosive(x):
            value = float(np.exp(np.exp(x @ x)))
            return value, np.full_like(x, np.inf)

        start = HmcState(np.array([0.0]), 0.0, np.array([0.0]))
        result = hmc_step(start, explosive, 0.1, 5, np.random.default_rng(1))
        assert not result.accepted
        assert result.diverged
        assert result.state is start


class TestGibbs:
    """Test conjugate precision updates."""

    def setup_method(self):
        self.arch = _tiny_arch()
        self.prior = PriorSpec.default(self.arch)

    def test_zero_weights_posterior(self):
        """Zero weights leave the prior rate and add k/2 to the shape."""
        shape, rate = group_posterior(np.zeros(self.arch.n_weights), self.prior)
        k = self.prior.group_sizes()
        np.testing.assert_allclose(shape, self.prior.alpha / 2 + k / 2)
        np.testing.assert_allclose(rate, self.prior.alpha / (2 * self.prior.prior_means()))

    def test_mean_precision_decreases_with_weight_size(self):
        """Larger weights mean a smaller posterior precision."""
        means = []
        for scale in (0.1, 1.0, 10.0):
            shape, rate = group_posterior(np.full(self.arch.n_weights, scale), self.prior)
            means.append(shape / rate)
        assert (means[0] > means[1]).all() and (means[1] > means[2]).all()

    def test_update_draws_positive_precisions(self):
        """A sweep keeps the group structure and draws positive precisions."""
        rng = np.random.default_rng(3)
        updated = gibbs_update_hyperparams(np.ones(self.arch.n_weights), self.prior, rng)
        assert updated.precisions.shape == self.prior.precisions.shape
        assert (updated.precisions > 0).all()
        assert updated.input_mean_precision > 0


class TestTrainAndPredict:
    """Test chain bookkeeping and posterior prediction."""

    def test_separable_toy(self):
        """A 2-D separable problem is learned and half the chain is retained."""
        rng = np.random.default_rng(5)
        X = rng.normal(size=(100, 2))
        y = (X.sum(axis=1) > 0).astype(int)
        X += np.where(y == 1, 1.0, -1.0)[:, None]
        arch = BnnArchitecture(2, n_hidden_layers=1)
        samples = train_bnn(X, y, arch, hmc=HmcConfig(n_leapfrog=10, chain_length=200, seed=1))
        assert samples.n_draws == 100
        accuracy = ((predict_bnn(samples, X) >= 0.5) == y).mean()
        assert accuracy >= 0.95
        assert samples.summary()["draws"] == 100

    def _samples(self, biases):
        arch = _tiny_arch()
        draws = np.zeros((len(biases), arch.n_weights))
        draws[:, -1] = biases
        return PosteriorSamples(
            arch=arch,
            draws=draws,
            precisions=np.zeros((0, 4)),
            input_mean_precisions=np.zeros(0),
            step_sizes=np.array([0.1]),
            accepted=np.array([True]),
            burn_in=0,
        )

    def test_zero_draw_predicts_half(self):
        """One all-zero draw predicts 0.5."""
        assert predict_bnn(self._samples([0.0]), np.array([1.0])) == pytest.approx(0.5)

    def test_average_over_draws(self):
        """Draws with outputs 0.2 and 0.8 average to 0.5, in either order."""
        a = predict_bnn(self._samples([logit(0.2), logit(0.8)]), np.array([3.0]))
        b = predict_bnn(self._samples([logit(0.8), logit(0.2)]), np.array([3.0]))
        assert a == pytest.approx(0.5)
        assert a == pytest.approx(b)

    def test_capacity_guard(self):
        """Oversized networks are refused before any sampling."""
        check_capacity(BnnArchitecture(10))
        with pytest.raises(CapacityError, match="above the cap"):
            check_capacity(BnnArchitecture(300))
        model = BayesianMLPClassifier(HmcConfig(chain_length=4), weight_cap=100)
        with pytest.raises(CapacityError):
            model.fit(np.ones((4, 10)), np.array([0, 1, 0, 1]))
        assert model.samples is None


class TestChainAcceptance:
    """Sampler behavior on a realistic chain and hyperparameter draws."""

    def test_gibbs_draws_follow_gamma_posterior(self):
        """Precision draws for a fixed weight vector match the conjugate Gamma."""
        arch = _tiny_arch()
        prior = PriorSpec.default(arch)
        theta = np.random.default_rng(0).normal(0.0, 0.5, arch.n_weights)
        shape, rate = group_posterior(theta, prior)
        rng = np.random.default_rng(11)
        draws = np.array(
            [gibbs_update_hyperparams(theta, prior, rng).precisions for _ in range(2000)]
        )
        for group in range(prior.n_groups):
            posterior = stats.gamma(shape[group], scale=1 / rate[group])
            assert stats.kstest(draws[:, group], posterior.cdf).pvalue > 0.001

    def test_default_network_keeps_rejection_low(self):
        """Five hidden layers on a 2000-step chain end with rejection below 0.3."""
        rng = np.random.default_rng(8)
        X = rng.normal(size=(60, 3))
        y = (X[:, 0] > 0).astype(int)
        model = BayesianMLPClassifier(HmcConfig(n_leapfrog=20, chain_length=2000, seed=2))
        model.fit(X, y)
        assert model.samples.arch.n_hidden_layers == 5
        assert model.samples.n_draws == 1000
        assert model.samples.rejection_rate < 0.3
        assert model.samples.summary()["acceptance_rate"] > 0.7
