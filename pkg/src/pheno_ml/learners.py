"""Classical learners: CART trees, random forest with grid-search CV, gradient boosting
and L2 logistic regression.

Trees split on ``x <= threshold`` going left, with thresholds at midpoints between
consecutive distinct values. Classification leaves hold Laplace-smoothed class
probabilities ((count + 1) / (n + 2)).
"""

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from scipy.special import entr, expit

from .errors import DataError, FitError
from .evaluate import stratified_folds, weighted_f1

logger = logging.getLogger(__name__)

CRITERIA = ("gini", "entropy", "squared_error")
TIE_TOLERANCE = 1e-12


def gini(q: np.ndarray) -> np.ndarray:
    """Gini impurity of a binary node with label-1 fraction ``q``."""
    return 2.0 * q * (1.0 - q)


def entropy(q: np.ndarray) -> np.ndarray:
    """Entropy in nats of a binary node with label-1 fraction ``q``."""
    return entr(q) + entr(1.0 - q)


IMPURITY: Dict[str, Callable[[np.ndarray], np.ndarray]] = {"gini": gini, "entropy": entropy}


@dataclass
class TreeNode:
    """A split (``feature`` set) or a leaf.

    ``value`` is the class-probability vector for classification trees and the leaf
    output (mean target, or a Newton step for boosting) for regression trees.
    """

    n_samples: int
    value: Union[float, np.ndarray]
    impurity: float
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def leaves(self) -> List["TreeNode"]:
        if self.is_leaf:
            return [self]
        return self.left.leaves() + self.right.leaves()

    def n_nodes(self) -> int:
        if self.is_leaf:
            return 1
        return 1 + self.left.n_nodes() + self.right.n_nodes()


@dataclass(frozen=True)
class TreeParams:
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    criterion: str = "gini"
    max_features: Optional[int] = None

    def __post_init__(self) -> None:
        if self.criterion not in CRITERIA:
            raise DataError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.max_depth is not None and self.max_depth < 0:
            raise DataError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.min_samples_split < 2 or self.min_samples_leaf < 1:
            raise DataError("min_samples_split must be >= 2 and min_samples_leaf >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise DataError(f"max_features must be >= 1, got {self.max_features}")


def node_impurity(target: np.ndarray, criterion: str) -> float:
    if target.size == 0:
        return 0.0
    if criterion == "squared_error":
        return float(np.mean((target - target.mean()) ** 2))
    return float(IMPURITY[criterion](np.mean(target)))


def split_costs(target_sorted: np.ndarray, criterion: str) -> np.ndarray:
    """Total child impurity for every left size 1..n-1 of an ordered node.

    Classification costs are n_left * imp(left) + n_right * imp(right); regression costs
    are the summed squared deviations of the two children.
    """
    n = target_sorted.size
    n_left = np.arange(1, n, dtype=float)
    n_right = n - n_left
    if criterion == "squared_error":
        centered = target_sorted - target_sorted.mean()
        s = np.cumsum(centered)[:-1]
        s2 = np.cumsum(centered**2)[:-1]
        total, total2 = centered.sum(), (centered**2).sum()
        left = s2 - s**2 / n_left
        right = (total2 - s2) - (total - s) ** 2 / n_right
        return np.maximum(left, 0.0) + np.maximum(right, 0.0)
    ones = np.cumsum(target_sorted)[:-1]
    f = IMPURITY[criterion]
    return n_left * f(ones / n_left) + n_right * f((target_sorted.sum() - ones) / n_right)


def best_split(
    X: np.ndarray,
    target: np.ndarray,
    features: Sequence[int],
    criterion: str,
    min_samples_leaf: int = 1,
) -> Optional[Tuple[int, float, float]]:
    """Best (feature, threshold, child cost) among ``features``, or None.

    Within a feature the lowest threshold wins ties; across features the lowest index
    wins, both up to TIE_TOLERANCE.
    """
    n = X.shape[0]
    best: Optional[Tuple[int, float, float]] = None
    for j in sorted(features):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        costs = split_costs(target[order], criterion)
        n_left = np.arange(1, n)
        valid = (
            (xs[1:] > xs[:-1]) & (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
        )
        if not valid.any():
            continue
        masked = np.where(valid, costs, np.inf)
        lowest = masked.min()
        i = int(np.flatnonzero(masked <= lowest + TIE_TOLERANCE)[0])
        if best is None or lowest < best[2] - TIE_TOLERANCE:
            best = (j, float((xs[i] + xs[i + 1]) / 2.0), float(lowest))
    return best


def laplace_leaf(y: np.ndarray) -> np.ndarray:
    ones = float(np.sum(y))
    q = (ones + 1.0) / (y.size + 2.0)
    return np.array([1.0 - q, q])


def grow_tree(
    X: np.ndarray,
    target: np.ndarray,
    params: TreeParams,
    rng: Optional[np.random.Generator] = None,
    leaf_value: Optional[Callable[[np.ndarray], Union[float, np.ndarray]]] = None,
) -> Tuple[TreeNode, np.ndarray]:
    """Grow a CART tree; returns the root and raw impurity-decrease importances.

    ``leaf_value`` maps the row indices reaching a node to that node's value. Without it
    classification nodes get Laplace probabilities and regression nodes the mean target.
    """
    X = np.asarray(X, dtype=float)
    target = np.asarray(target, dtype=float)
    n, p = X.shape
    if n < 1:
        raise DataError("cannot grow a tree on zero samples")
    if leaf_value is None:
        if params.criterion == "squared_error":
            leaf_value = lambda rows: float(target[rows].mean())  # noqa: E731
        else:
            leaf_value = lambda rows: laplace_leaf(target[rows])  # noqa: E731
    k = p if params.max_features is None else min(params.max_features, p)
    importances = np.zeros(p)

    def candidates() -> Sequence[int]:
        if k >= p or rng is None:
            return range(p)
        return np.sort(rng.choice(p, size=k, replace=False)).tolist()

    def grow(rows: np.ndarray, depth: int) -> TreeNode:
        y = target[rows]
        impurity = node_impurity(y, params.criterion)
        node = TreeNode(n_samples=rows.size, value=leaf_value(rows), impurity=impurity)
        if (
            np.ptp(y) == 0
            or (params.max_depth is not None and depth >= params.max_depth)
            or rows.size < params.min_samples_split
            or rows.size < 2 * params.min_samples_leaf
        ):
            return node
        split = best_split(X[rows], y, candidates(), params.criterion, params.min_samples_leaf)
        if split is None:
            return node
        feature, threshold, cost = split
        go_left = X[rows, feature] <= threshold
        importances[feature] += rows.size * impurity - cost
        node.feature, node.threshold = feature, threshold
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return node

    root = grow(np.arange(n), 0)
    return root, np.maximum(importances, 0.0)


def _route(node: TreeNode, X: np.ndarray, rows: np.ndarray, out: np.ndarray) -> None:
    if node.is_leaf:
        out[rows] = node.value
        return
    left = X[rows, node.feature] <= node.threshold
    _route(node.left, X, rows[left], out)
    _route(node.right, X, rows[~left], out)


def tree_predict(root: TreeNode, X: np.ndarray) -> np.ndarray:
    """Leaf values for every row: (n, 2) probabilities or (n,) regression outputs."""
    X = np.asarray(X, dtype=float)
    shape = (X.shape[0], 2) if isinstance(root.value, np.ndarray) else (X.shape[0],)
    out = np.zeros(shape)
    _route(root, X, np.arange(X.shape[0]), out)
    return out


def _normalized(importances: np.ndarray) -> np.ndarray:
    total = importances.sum()
    return importances / total if total > 0 else importances


def _check_xy(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DataError(f"X has shape {X.shape} but there are {y.size} labels")
    if X.shape[0] < 1:
        raise DataError("no samples to fit")
    return X, y


class DecisionTreeClassifier:
    def __init__(self, params: Optional[TreeParams] = None, seed: int = 0):
        self.params = params or TreeParams()
        self.seed = seed
        self.root: Optional[TreeNode] = None
        self.feature_importances = np.zeros(0)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "DecisionTreeClassifier":
        X, y = _check_xy(X, y)
        rng = np.random.default_rng(self.seed)
        self.root, raw = grow_tree(X, y, self.params, rng)
        self.feature_importances = _normalized(raw)
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return tree_predict(self.root, X)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def fit_decision_tree(
    X: np.ndarray, y: np.ndarray, params: Optional[TreeParams] = None, seed: int = 0
) -> TreeNode:
    return DecisionTreeClassifier(params, seed).fit(X, y).root


@dataclass(frozen=True)
class ForestConfig:
    """Random forest hyperparameters; ``features_per_split=None`` means ceil(sqrt(p))."""

    n_estimators: int = 100
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_depth: Optional[int] = None
    criterion: str = "gini"
    features_per_split: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_estimators < 1:
            raise DataError(f"n_estimators must be >= 1, got {self.n_estimators}")
        if self.criterion not in IMPURITY:
            raise DataError(f"criterion must be gini or entropy, got {self.criterion!r}")
        if self.max_depth is not None and self.max_depth < 1:
            raise DataError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise DataError(f"features_per_split must be >= 1, got {self.features_per_split}")
        TreeParams(
            max_depth=self.max_depth,
            min_samples_split=self.min_samples_split,
            min_samples_leaf=self.min_samples_leaf,
            criterion=self.criterion,
        )

    def tree_params(self, p: int) -> TreeParams:
        k = self.features_per_split or math.ceil(math.sqrt(p))
        return TreeParams(
            max_depth=self.max_depth,
            min_samples_split=self.min_samples_split,
            min_samples_leaf=self.min_samples_leaf,
            criterion=self.criterion,
            max_features=min(k, p),
        )

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def _fit_forest_tree(
    X: np.ndarray, y: np.ndarray, params: TreeParams, seed: int, index: int, bootstrap: bool
) -> Tuple[TreeNode, np.ndarray]:
    rng = np.random.default_rng([seed, index])
    rows = rng.integers(0, X.shape[0], size=X.shape[0]) if bootstrap else np.arange(X.shape[0])
    root, raw = grow_tree(X[rows], y[rows], params, rng)
    return root, _normalized(raw)


class RandomForestClassifier:
    """Bagged CART trees; class probabilities are averaged over trees."""

    def __init__(self, config: Optional[ForestConfig] = None, n_jobs: int = 1):
        self.config = config or ForestConfig()
        self.n_jobs = n_jobs
        self.trees: List[TreeNode] = []
        self.feature_importances = np.zeros(0)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RandomForestClassifier":
        X, y = _check_xy(X, y)
        if X.shape[0] < 2:
            raise DataError("a random forest needs at least 2 samples")
        cfg = self.config
        params = cfg.tree_params(X.shape[1])
        fitted = Parallel(n_jobs=self.n_jobs)(
            delayed(_fit_forest_tree)(X, y, params, cfg.seed, i, cfg.bootstrap)
            for i in range(cfg.n_estimators)
        )
        self.trees = [root for root, _ in fitted]
        self.feature_importances = np.mean([imp for _, imp in fitted], axis=0)
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise FitError("forest is not fitted")
        return np.sum([tree_predict(t, X) for t in self.trees], axis=0) / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def fit_random_forest(
    X: np.ndarray, y: np.ndarray, config: Optional[ForestConfig] = None, n_jobs: int = 1
) -> RandomForestClassifier:
    return RandomForestClassifier(config, n_jobs).fit(X, y)


def forest_grid(
    n_estimators: Sequence[int] = (100, 200, 500),
    min_samples_split: Sequence[int] = (8, 10),
    min_samples_leaf: Sequence[int] = (3, 4, 5),
    max_depth: Sequence[Optional[int]] = (80, 90),
    criterion: Sequence[str] = ("gini", "entropy"),
    features_per_split: Optional[int] = None,
    seed: int = 0,
) -> List[ForestConfig]:
    """Cartesian grid of forest configs in a fixed order (72 configs by default)."""
    return [
        ForestConfig(
            n_estimators=ne,
            min_samples_split=mss,
            min_samples_leaf=msl,
            max_depth=md,
            criterion=cr,
            features_per_split=features_per_split,
            seed=seed,
        )
        for ne, mss, msl, md, cr in itertools.product(
            n_estimators, min_samples_split, min_samples_leaf, max_depth, criterion
        )
    ]


@dataclass
class GridSearchResult:
    best: ForestConfig
    scores: List[float]
    n_folds: int
    configs: List[ForestConfig] = field(default_factory=list)

    @property
    def best_score(self) -> float:
        return max(self.scores)


def _fold_score(
    config: ForestConfig, X: np.ndarray, y: np.ndarray, train: np.ndarray, valid: np.ndarray
) -> float:
    model = RandomForestClassifier(config).fit(X[train], y[train])
    return weighted_f1(y[valid], model.predict(X[valid])).weighted


def grid_search_cv(
    grid: Sequence[ForestConfig],
    X: np.ndarray,
    y: np.ndarray,
    folds: int = 10,
    seed: int = 0,
    n_jobs: int = 1,
) -> GridSearchResult:
    """Pick the config with the best mean stratified k-fold weighted F1.

    Ties go to the earliest config in ``grid``.
    """
    X, y = _check_xy(X, y)
    grid = list(grid)
    if not grid:
        raise DataError("empty parameter grid")
    if folds < 2:
        raise DataError(f"folds must be >= 2, got {folds}")
    assignment = stratified_folds(y, folds, seed)
    usable = []
    for k in range(folds):
        train = np.flatnonzero(assignment != k)
        valid = np.flatnonzero(assignment == k)
        if valid.size == 0 or np.unique(y[train]).size < 2:
            logger.warning(f"fold {k + 1}: training part lacks a class, skipping")
            continue
        usable.append((train, valid))
    if not usable:
        raise DataError("every cross-validation fold was skipped")

    jobs = [(c, f) for c in range(len(grid)) for f in range(len(usable))]
    scores = Parallel(n_jobs=n_jobs)(
        delayed(_fold_score)(grid[c], X, y, *usable[f]) for c, f in jobs
    )
    table = np.asarray(scores, dtype=float).reshape(len(grid), len(usable))
    means = table.mean(axis=1).tolist()
    best = int(np.argmax(means))
    logger.debug(f"grid search: best config {best + 1}/{len(grid)} with mean F1 {means[best]:.4f}")
    return GridSearchResult(best=grid[best], scores=means, n_folds=len(usable), configs=grid)


class GradientBoostingClassifier:
    """Stagewise logistic-loss boosting of squared-error regression trees.

    Each leaf takes one Newton step, sum(residual) / sum(p(1-p)) over its rows; the
    model starts from the training log-odds.
    """

    def __init__(
        self, rounds: int = 100, depth: int = 3, rate: float = 0.1, seed: int = 0
    ):
        if rounds < 0 or depth < 1 or rate <= 0:
            raise DataError("rounds must be >= 0, depth >= 1 and rate > 0")
        self.rounds = rounds
        self.depth = depth
        self.rate = rate
        self.seed = seed
        self.initial = 0.0
        self.trees: List[TreeNode] = []
        self.feature_importances = np.zeros(0)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GradientBoostingClassifier":
        X, y = _check_xy(X, y)
        q = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        self.initial = float(np.log(q / (1 - q)))
        params = TreeParams(max_depth=self.depth, criterion="squared_error")
        rng = np.random.default_rng(self.seed)
        scores = np.full(X.shape[0], self.initial)
        importances = np.zeros(X.shape[1])
        self.trees = []
        for _ in range(self.rounds):
            prob = expit(scores)
            residual = y - prob
            weight = prob * (1 - prob)

            def newton(rows: np.ndarray) -> float:
                denom = weight[rows].sum()
                return float(residual[rows].sum() / denom) if denom > 1e-12 else 0.0

            root, raw = grow_tree(X, residual, params, rng, leaf_value=newton)
            self.trees.append(root)
            importances += raw
            scores = scores + self.rate * tree_predict(root, X)
        self.feature_importances = _normalized(importances)
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        scores = np.full(X.shape[0], self.initial)
        for root in self.trees:
            scores = scores + self.rate * tree_predict(root, X)
        return scores

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        q = expit(self.decision_function(X))
        return np.column_stack([1 - q, q])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)


def fit_gradient_boosting(
    X: np.ndarray,
    y: np.ndarray,
    rounds: int = 100,
    depth: int = 3,
    rate: float = 0.1,
    seed: int = 0,
) -> GradientBoostingClassifier:
    return GradientBoostingClassifier(rounds, depth, rate, seed).fit(X, y)


class LogisticRegression:
    """L2-penalized logistic regression with an unpenalized intercept.

    Minimizes sum(log-loss) + l2/2 * ||w||^2 by Newton steps with backtracking until the
    gradient norm drops to ``tol``.
    """

    def __init__(self, l2: float = 1.0, tol: float = 1e-6, max_iter: int = 10_000):
        if l2 < 0:
            raise DataError(f"l2 must be non-negative, got {l2}")
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter
        self.coef = np.zeros(0)
        self.intercept = 0.0
        self.gradient_norm = np.inf
        self.n_iter = 0

    def _objective(self, A: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
        z = A @ beta
        return float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * self.l2 * beta[:-1] @ beta[:-1])

    def gradient(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of the penalized objective at the fitted parameters (coef then intercept)."""
        A = np.column_stack([np.asarray(X, dtype=float), np.ones(len(y))])
        beta = np.append(self.coef, self.intercept)
        return self._gradient(A, np.asarray(y, dtype=float), beta)

    def _gradient(self, A: np.ndarray, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
        grad = A.T @ (expit(A @ beta) - y)
        grad[:-1] += self.l2 * beta[:-1]
        return grad

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticRegression":
        X, y = _check_xy(X, y)
        if X.shape[0] < 2:
            raise DataError("logistic regression needs at least 2 samples")
        y = y.astype(float)
        A = np.column_stack([X, np.ones(X.shape[0])])
        p = A.shape[1]
        penalty = np.full(p, self.l2)
        penalty[-1] = 0.0
        beta = np.zeros(p)
        objective = self._objective(A, y, beta)

        for it in range(1, self.max_iter + 1):
            grad = self._gradient(A, y, beta)
            norm = float(np.linalg.norm(grad))
            if not np.isfinite(norm) or not np.isfinite(objective):
                raise FitError("logistic regression loss is not finite", iteration=it)
            self.gradient_norm = norm
            if norm <= self.tol:
                break
            prob = expit(A @ beta)
            hessian = (A * (prob * (1 - prob))[:, None]).T @ A + np.diag(penalty)
            try:
                step = linalg.solve(hessian, grad, assume_a="sym")
            except (linalg.LinAlgError, ValueError):
                step = linalg.lstsq(hessian, grad)[0]
            t = 1.0
            slope = float(grad @ step)
            candidate = beta - step
            value = self._objective(A, y, candidate)
            while value > objective - 1e-4 * t * slope and t > 1e-10:
                t /= 2.0
                candidate = beta - t * step
                value = self._objective(A, y, candidate)
            beta, objective = candidate, value
        else:
            logger.warning(
                f"logistic regression stopped after {self.max_iter} iterations "
                f"with gradient norm {self.gradient_norm:.2e}"
            )
        self.n_iter = it
        self.coef = beta[:-1]
        self.intercept = float(beta[-1])
        self.gradient_norm = float(np.linalg.norm(self._gradient(A, y, beta)))
        return self

    @property
    def feature_importances(self) -> np.ndarray:
        return np.abs(self.coef)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        q = expit(self.decision_function(X))
        return np.column_stack([1 - q, q])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)


def fit_logistic_regression(
    X: np.ndarray, y: np.ndarray, l2: float = 1.0
) -> Tuple[np.ndarray, float]:
    model = LogisticRegression(l2).fit(X, y)
    return model.coef, model.intercept
