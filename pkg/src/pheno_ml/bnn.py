"""Bayesian multilayer perceptron sampled by Hamiltonian Monte Carlo.

The network has five hidden layers of width 3N and one output unit read through a
logistic link. Every layer matrix carries its bias as the last row. Weights are grouped
for the prior: one group per input unit (automatic relevance determination), one group
for each remaining layer's weights and one for each layer's biases. Each group has a
Gaussian prior with precision tau ~ Gamma(alpha/2, rate alpha/(2 tau_w)); the input
groups share a tau_w whose reciprocal has its own Gamma prior. Precisions are redrawn
by Gibbs sweeps between HMC weight updates.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import CapacityError, DataError, FitError

logger = logging.getLogger(__name__)

DEFAULT_WEIGHT_CAP = 2_000_000

Target = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"

    def __call__(self, a: np.ndarray) -> np.ndarray:
        if self is Activation.TANH:
            return np.tanh(a)
        return np.maximum(a, 0.0)

    def derivative(self, a: np.ndarray, h: np.ndarray) -> np.ndarray:
        if self is Activation.TANH:
            return 1.0 - h * h
        return (a > 0).astype(float)


@dataclass(frozen=True)
class BnnArchitecture:
    n_inputs: int
    n_hidden_layers: int = 5
    width_factor: int = 3
    activation: Activation = Activation.TANH

    def __post_init__(self) -> None:
        if self.n_inputs < 1 or self.n_hidden_layers < 1 or self.width_factor < 1:
            raise DataError("layer widths must be positive")
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def widths(self) -> List[int]:
        hidden = self.width_factor * self.n_inputs
        return [self.n_inputs] + [hidden] * self.n_hidden_layers + [1]

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        w = self.widths
        return [(w[i] + 1, w[i + 1]) for i in range(len(w) - 1)]

    @property
    def n_weights(self) -> int:
        return sum(r * c for r, c in self.shapes)

    def unpack(self, theta: np.ndarray) -> List[np.ndarray]:
        """Split a flat parameter vector into layer matrices (views)."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_weights:
            raise DataError(f"expected {self.n_weights} parameters, got {theta.size}")
        out, start = [], 0
        for rows, cols in self.shapes:
            out.append(theta[start : start + rows * cols].reshape(rows, cols))
            start += rows * cols
        return out

    @staticmethod
    def pack(weights: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(W, dtype=float).ravel() for W in weights])


def check_capacity(arch: BnnArchitecture, cap: int = DEFAULT_WEIGHT_CAP) -> None:
    if arch.n_weights > cap:
        raise CapacityError(
            f"network with {arch.n_inputs} inputs has {arch.n_weights} weights, "
            f"above the cap of {cap}"
        )


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Group structure and current precisions of the hierarchical Gaussian prior."""

    group_of: np.ndarray
    precisions: np.ndarray
    input_groups: np.ndarray
    alpha: float = 2.0
    mean_precision: float = 0.5
    input_mean_precision: float = 0.5
    alpha0: float = 2.0
    tau0: float = 0.5

    @classmethod
    def default(
        cls, arch: BnnArchitecture, alpha: float = 2.0, mean_precision: float = 0.5
    ) -> "PriorSpec":
        groups: List[np.ndarray] = []
        is_input: List[bool] = []
        next_group = 0
        for layer, (rows, cols) in enumerate(arch.shapes):
            ids = np.empty((rows, cols), dtype=int)
            if layer == 0:
                for i in range(rows - 1):
                    ids[i] = next_group
                    is_input.append(True)
                    next_group += 1
            else:
                ids[:-1] = next_group
                is_input.append(False)
                next_group += 1
            ids[-1] = next_group
            is_input.append(False)
            next_group += 1
            groups.append(ids.ravel())
        return cls(
            group_of=np.concatenate(groups),
            precisions=np.full(next_group, mean_precision),
            input_groups=np.array(is_input, dtype=bool),
            alpha=alpha,
            mean_precision=mean_precision,
            input_mean_precision=mean_precision,
        )

    @property
    def n_groups(self) -> int:
        return self.precisions.size

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.n_groups)

    def prior_means(self) -> np.ndarray:
        """The tau_w each group's precision is centred on."""
        return np.where(self.input_groups, self.input_mean_precision, self.mean_precision)


def _cache(
    weights: Sequence[np.ndarray], X: np.ndarray, act: Activation
) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
    hs, pre = [X], []
    for W in weights[:-1]:
        a = hs[-1] @ W[:-1] + W[-1]
        pre.append(a)
        hs.append(act(a))
    out = hs[-1] @ weights[-1][:-1] + weights[-1][-1]
    return hs, pre, out[:, 0]


def _as_matrix(x: np.ndarray, n_inputs: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[1] != n_inputs:
        raise DataError(f"input has {X.shape[1]} features, network expects {n_inputs}")
    return X


def forward(
    weights: Sequence[np.ndarray], x: np.ndarray, activation: Activation = Activation.TANH
) -> Union[float, np.ndarray]:
    """Pre-link output f(W, x): a float for one input vector, an array for a matrix."""
    n_inputs = weights[0].shape[0] - 1
    X = _as_matrix(x, n_inputs)
    out = _cache(weights, X, Activation(activation))[2]
    return float(out[0]) if np.ndim(x) == 1 else out


def _log_likelihood(f: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * f - np.logaddexp(0.0, f)))


def _group_sums(theta: np.ndarray, prior: PriorSpec) -> np.ndarray:
    return np.bincount(prior.group_of, weights=theta * theta, minlength=prior.n_groups)


def log_prior(theta: np.ndarray, prior: PriorSpec) -> float:
    k = prior.group_sizes()
    tau = prior.precisions
    return float(
        np.sum(0.5 * k * np.log(tau / (2 * np.pi)) - 0.5 * tau * _group_sums(theta, prior))
    )


def value_and_grad(
    theta: np.ndarray, arch: BnnArchitecture, prior: PriorSpec, X: np.ndarray, y: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Unnormalized log posterior and its exact gradient by backpropagation."""
    weights = arch.unpack(theta)
    act = arch.activation
    hs, pre, f = _cache(weights, X, act)
    value = _log_likelihood(f, y) + log_prior(theta, prior)

    grads: List[np.ndarray] = [np.empty(0)] * len(weights)
    delta = (y - expit(f))[:, None]
    for layer in range(len(weights) - 1, -1, -1):
        h = hs[layer]
        grads[layer] = np.vstack([h.T @ delta, delta.sum(axis=0, keepdims=True)])
        if layer > 0:
            delta = (delta @ weights[layer][:-1].T) * act.derivative(pre[layer - 1], hs[layer])
    grad = BnnArchitecture.pack(grads) - prior.precisions[prior.group_of] * theta
    return value, grad


def log_posterior(
    theta: np.ndarray, arch: BnnArchitecture, prior: PriorSpec, X: np.ndarray, y: np.ndarray
) -> float:
    X = _as_matrix(X, arch.n_inputs)
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary")
    weights = arch.unpack(theta)
    f = _cache(weights, X, arch.activation)[2]
    value = _log_likelihood(f, y) + log_prior(theta, prior)
    if not np.isfinite(value):
        raise FitError("log posterior is not finite")
    return value


def grad_log_posterior(
    theta: np.ndarray, arch: BnnArchitecture, prior: PriorSpec, X: np.ndarray, y: np.ndarray
) -> np.ndarray:
    X = _as_matrix(X, arch.n_inputs)
    return value_and_grad(theta, arch, prior, X, np.asarray(y, dtype=float))[1]


@dataclass(frozen=True, eq=False)
class HmcState:
    position: np.ndarray
    log_prob: float
    grad: np.ndarray

    @classmethod
    def at(cls, position: np.ndarray, target: Target) -> "HmcState":
        log_prob, grad = target(position)
        return cls(np.asarray(position, dtype=float), log_prob, grad)


@dataclass(frozen=True, eq=False)
class HmcStepResult:
    state: HmcState
    accepted: bool
    delta_h: float
    diverged: bool = False


def leapfrog(
    position: np.ndarray,
    momentum: np.ndarray,
    grad: np.ndarray,
    target: Target,
    step_size: float,
    n_steps: int,
) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Integrate Hamiltonian dynamics; returns (position, momentum, log_prob, grad).

    A non-finite log probability stops the trajectory early and is returned as is.
    """
    x = np.array(position, dtype=float)
    p = momentum + 0.5 * step_size * grad
    log_prob = np.nan
    for i in range(n_steps):
        x = x + step_size * p
        log_prob, grad = target(x)
        if not (np.isfinite(log_prob) and np.isfinite(grad).all()):
            return x, p, float("nan"), grad
        if i != n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return x, p, float(log_prob), grad


def hmc_step(
    state: HmcState,
    target: Target,
    step_size: float,
    n_leapfrog: int,
    rng: np.random.Generator,
) -> HmcStepResult:
    """One HMC transition with a Metropolis correction on the total Hamiltonian."""
    if step_size <= 0 or n_leapfrog < 1:
        raise DataError("step size must be positive and leapfrog length at least 1")
    momentum = rng.standard_normal(state.position.size)
    h0 = -state.log_prob + 0.5 * momentum @ momentum
    x, p, log_prob, grad = leapfrog(
        state.position, momentum, state.grad, target, step_size, n_leapfrog
    )
    if not np.isfinite(log_prob):
        return HmcStepResult(state, accepted=False, delta_h=float("inf"), diverged=True)
    delta_h = float(-log_prob + 0.5 * p @ p - h0)
    if np.log(rng.uniform()) < -delta_h:
        return HmcStepResult(HmcState(x, log_prob, grad), accepted=True, delta_h=delta_h)
    return HmcStepResult(state, accepted=False, delta_h=delta_h)


def group_posterior(theta: np.ndarray, prior: PriorSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Conjugate Gamma (shape, rate) of every group precision given the weights."""
    k = prior.group_sizes()
    shape = prior.alpha / 2.0 + k / 2.0
    rate = prior.alpha / (2.0 * prior.prior_means()) + _group_sums(theta, prior) / 2.0
    return shape, rate


def gibbs_update_hyperparams(
    theta: np.ndarray, prior: PriorSpec, rng: np.random.Generator
) -> PriorSpec:
    """Redraw every group precision, then the input groups' shared tau_w."""
    shape, rate = group_posterior(theta, prior)
    precisions = rng.gamma(shape, 1.0 / rate)
    input_mean = prior.input_mean_precision
    n_input = int(prior.input_groups.sum())
    if n_input:
        # 1 / tau_w is Gamma distributed given the input group precisions
        u_shape = prior.alpha0 / 2.0 + n_input * prior.alpha / 2.0
        u_rate = (
            prior.alpha0 * prior.tau0 / 2.0
            + prior.alpha * precisions[prior.input_groups].sum() / 2.0
        )
        input_mean = 1.0 / rng.gamma(u_shape, 1.0 / u_rate)
    return replace(prior, precisions=precisions, input_mean_precision=float(input_mean))


@dataclass(frozen=True)
class HmcConfig:
    n_leapfrog: int = 100
    step_size: float = 0.1
    chain_length: int = 2000
    target_rejection: float = 0.3
    low_rejection: float = 0.1
    shrink: float = 0.8
    grow: float = 1.1
    window_min: int = 20
    window_max: int = 100
    thin: int = 1
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.step_size <= 0 or self.n_leapfrog < 1 or self.chain_length < 2:
            raise DataError("HMC needs step_size > 0, n_leapfrog >= 1 and chain_length >= 2")
        if self.thin < 1:
            raise DataError(f"thin must be >= 1, got {self.thin}")

    @property
    def burn_in(self) -> int:
        return self.chain_length - self.chain_length // 2


@dataclass
class PosteriorSamples:
    arch: BnnArchitecture
    draws: np.ndarray
    precisions: np.ndarray
    input_mean_precisions: np.ndarray
    step_sizes: np.ndarray
    accepted: np.ndarray
    burn_in: int
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def acceptance_rate(self) -> float:
        """Acceptance over the retained (post burn-in) iterations."""
        kept = self.accepted[self.burn_in :]
        return float(kept.mean()) if kept.size else 0.0

    @property
    def rejection_rate(self) -> float:
        return 1.0 - self.acceptance_rate

    @property
    def final_step_size(self) -> float:
        return float(self.step_sizes[-1])

    def weights(self, i: int) -> List[np.ndarray]:
        return self.arch.unpack(self.draws[i])

    def summary(self, probabilities: Optional[np.ndarray] = None) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "n_inputs": self.arch.n_inputs,
            "n_weights": self.arch.n_weights,
            "activation": self.arch.activation.value,
            "draws": self.n_draws,
            "burn_in": self.burn_in,
            "acceptance_rate": round(self.acceptance_rate, 6),
            "final_step_size": self.final_step_size,
        }
        if probabilities is not None:
            out["probabilities"] = [float(p) for p in probabilities]
        return out


def train_bnn(
    X: np.ndarray,
    y: np.ndarray,
    arch: Optional[BnnArchitecture] = None,
    prior: Optional[PriorSpec] = None,
    hmc: Optional[HmcConfig] = None,
) -> PosteriorSamples:
    """Alternate Gibbs precision sweeps and HMC weight updates.

    During burn-in (the first half of the chain) the step size is multiplied by
    ``shrink`` when the trailing-window rejection rate reaches ``target_rejection`` and
    by ``grow`` when it falls below ``low_rejection``; it is frozen afterwards.
    """
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise DataError("cannot train on an empty dataset")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary")
    arch = arch or BnnArchitecture(np.atleast_2d(X).shape[1])
    X = _as_matrix(X, arch.n_inputs)
    if X.shape[0] != y.size:
        raise DataError(f"{X.shape[0]} samples but {y.size} labels")
    hmc = hmc or HmcConfig()
    prior = prior or PriorSpec.default(arch)
    rng = np.random.default_rng(hmc.seed)

    theta = rng.normal(0.0, hmc.init_scale, arch.n_weights)
    step = hmc.step_size
    window: List[bool] = []
    best_step, best_rejection = step, np.inf
    last_rejection = np.nan

    draws, precisions, input_means, steps, accepted = [], [], [], [], []
    for it in range(hmc.chain_length):
        prior = gibbs_update_hyperparams(theta, prior, rng)

        def target(th: np.ndarray, prior: PriorSpec = prior) -> Tuple[float, np.ndarray]:
            return value_and_grad(th, arch, prior, X, y)

        result = hmc_step(HmcState.at(theta, target), target, step, hmc.n_leapfrog, rng)
        theta = result.state.position
        accepted.append(result.accepted)
        steps.append(step)
        precisions.append(prior.precisions.copy())
        input_means.append(prior.input_mean_precision)

        if it < hmc.burn_in:
            window.append(not result.accepted)
            if len(window) > hmc.window_max:
                window.pop(0)
            if len(window) >= hmc.window_min:
                last_rejection = float(np.mean(window))
                if last_rejection < best_rejection and last_rejection < hmc.target_rejection:
                    best_step, best_rejection = step, last_rejection
                if last_rejection >= hmc.target_rejection:
                    step *= hmc.shrink
                    window = []
                elif last_rejection < hmc.low_rejection:
                    step *= hmc.grow
                    window = []
            if it == hmc.burn_in - 1 and not last_rejection < hmc.target_rejection:
                if np.isfinite(best_rejection):
                    step = best_step
                logger.warning(
                    f"step-size adaptation did not reach rejection < {hmc.target_rejection} "
                    f"during burn-in; continuing with step size {step:.3g}"
                )
        elif (it - hmc.burn_in) % hmc.thin == 0:
            draws.append(theta.copy())

    samples = PosteriorSamples(
        arch=arch,
        draws=np.array(draws),
        precisions=np.array(precisions),
        input_mean_precisions=np.array(input_means),
        step_sizes=np.array(steps),
        accepted=np.array(accepted, dtype=bool),
        burn_in=hmc.burn_in,
    )
    logger.info(
        f"BNN chain finished: {samples.n_draws} draws, acceptance {samples.acceptance_rate:.3f}, "
        f"step size {samples.final_step_size:.3g}"
    )
    return samples


def predict_bnn(samples: PosteriorSamples, x: np.ndarray) -> Union[float, np.ndarray]:
    """Posterior predictive probability of label 1, averaged over retained draws."""
    if samples.n_draws < 1:
        raise DataError("no retained posterior draws")
    X = _as_matrix(x, samples.arch.n_inputs)
    total = np.zeros(X.shape[0])
    for i in range(samples.n_draws):
        total += expit(_cache(samples.weights(i), X, samples.arch.activation)[2])
    prob = total / samples.n_draws
    return float(prob[0]) if np.ndim(x) == 1 else prob


class BayesianMLPClassifier:
    """fit/predict wrapper used by the grid runner and the baseline test."""

    def __init__(
        self,
        hmc: Optional[HmcConfig] = None,
        n_hidden_layers: int = 5,
        width_factor: int = 3,
        activation: Union[str, Activation] = Activation.TANH,
        weight_cap: int = DEFAULT_WEIGHT_CAP,
    ):
        self.hmc = hmc or HmcConfig()
        self.n_hidden_layers = n_hidden_layers
        self.width_factor = width_factor
        self.activation = Activation(activation)
        self.weight_cap = weight_cap
        self.samples: Optional[PosteriorSamples] = None

    def architecture(self, n_inputs: int) -> BnnArchitecture:
        return BnnArchitecture(n_inputs, self.n_hidden_layers, self.width_factor, self.activation)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "BayesianMLPClassifier":
        arch = self.architecture(np.atleast_2d(X).shape[1])
        check_capacity(arch, self.weight_cap)
        self.samples = train_bnn(X, y, arch, hmc=self.hmc)
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.samples is None:
            raise FitError("network is not trained")
        q = np.atleast_1d(predict_bnn(self.samples, np.atleast_2d(X)))
        return np.column_stack([1 - q, q])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
