"""OTU selection: seven ML criteria voted into a TOTAL score, combined with the
network degree-difference ranking into a 0-3 score and the predictor subsets
OTU-S0..OTU-S3.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata

from .data import BinaryLabels, OtuTable
from .errors import DataError, FitError
from .learners import (
    DecisionTreeClassifier,
    ForestConfig,
    GradientBoostingClassifier,
    LogisticRegression,
    RandomForestClassifier,
    TreeParams,
)
from .netinfer import NetworkComparison, class_networks, compare_networks, select_by_degree_diff
from .ranking import rank_desc, top_count

logger = logging.getLogger(__name__)

CRITERIA = ("KBest", "Mutual", "LR", "DT", "GB", "RF", "Max")
SUBSETS = ("OTU-S0", "OTU-S1", "OTU-S2", "OTU-S3")
MI_BINS = 10


def _check_xy(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DataError(f"X has shape {X.shape} but there are {y.size} labels")
    if not ((y == 0).any() and (y == 1).any()):
        raise DataError("feature selection needs samples of both classes")
    return X, y


def anova_f_scores(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Two-group one-way ANOVA F per column.

    Perfectly separated columns (no within-class spread) score +inf; a column with no
    spread at all scores 0.
    """
    X, y = _check_xy(X, y)
    n = y.size
    grand = X.mean(axis=0)
    between = np.zeros(X.shape[1])
    within = np.zeros(X.shape[1])
    for c in (0, 1):
        block = X[y == c]
        mean = block.mean(axis=0)
        between += block.shape[0] * (mean - grand) ** 2
        within += ((block - mean) ** 2).sum(axis=0)
    df_within = max(n - 2, 1)
    scores = np.zeros(X.shape[1])
    spread = within > 0
    scores[spread] = between[spread] / (within[spread] / df_within)
    scores[~spread & (between > 0)] = np.inf
    return scores


def discretize(column: np.ndarray, bins: int = MI_BINS) -> np.ndarray:
    """Bin codes: the distinct values when there are at most ``bins`` of them,
    equal-frequency rank bins otherwise (tied values share a bin)."""
    values, codes = np.unique(column, return_inverse=True)
    if values.size <= bins:
        return codes
    ranks = rankdata(column, method="average")
    return np.minimum(np.floor((ranks - 1) * bins / column.size), bins - 1).astype(int)


def _mi(codes: np.ndarray, y: np.ndarray) -> float:
    joint = np.zeros((codes.max() + 1, 2))
    np.add.at(joint, (codes, y), 1.0)
    joint /= joint.sum()
    outer = joint.sum(axis=1, keepdims=True) * joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float(max(0.0, np.sum(joint[mask] * np.log(joint[mask] / outer[mask]))))


def mutual_information(X: np.ndarray, y: np.ndarray, bins: int = MI_BINS) -> np.ndarray:
    """Plug-in mutual information (nats) between each binned column and the labels."""
    X, y = _check_xy(X, y)
    return np.array([_mi(discretize(X[:, j], bins), y) for j in range(X.shape[1])])


class RfeEstimator(str, Enum):
    LOGREG = "LR"
    DECISION_TREE = "DT"
    GRAD_BOOST = "GB"
    RANDOM_FOREST = "RF"


@dataclass(frozen=True)
class RfeSettings:
    lr_l2: float = 1.0
    dt_depth: int = 5
    gb_rounds: int = 100
    gb_depth: int = 3
    gb_rate: float = 0.1
    rf_trees: int = 100

    def build(self, kind: RfeEstimator, seed: int) -> Any:
        if kind is RfeEstimator.LOGREG:
            return LogisticRegression(self.lr_l2)
        if kind is RfeEstimator.DECISION_TREE:
            return DecisionTreeClassifier(TreeParams(max_depth=self.dt_depth), seed=seed)
        if kind is RfeEstimator.GRAD_BOOST:
            return GradientBoostingClassifier(self.gb_rounds, self.gb_depth, self.gb_rate, seed)
        return RandomForestClassifier(ForestConfig(n_estimators=self.rf_trees, seed=seed))


def rfe(
    estimator: Union[RfeEstimator, str],
    X: np.ndarray,
    y: np.ndarray,
    n_select: int,
    seed: int = 0,
    settings: Optional[RfeSettings] = None,
) -> List[int]:
    """Recursive feature elimination, one feature per round.

    Each round refits the estimator and drops the remaining column with the smallest
    importance (|coefficient| for logistic regression, impurity decrease otherwise);
    among equal importances the lowest column index goes first. Returns the surviving
    column indices in ascending order.
    """
    kind = RfeEstimator(estimator)
    X, y = _check_xy(X, y)
    p = X.shape[1]
    if not 1 <= n_select <= p:
        raise DataError(f"n_select must be in 1..{p}, got {n_select}")
    settings = settings or RfeSettings()
    remaining = list(range(p))
    iteration = 0
    while len(remaining) > n_select:
        iteration += 1
        try:
            model = settings.build(kind, seed).fit(X[:, remaining], y)
        except Exception as e:
            raise FitError(f"{kind.value} fit failed during RFE: {e}", iteration=iteration) from e
        importances = np.asarray(model.feature_importances, dtype=float)
        remaining.pop(int(np.argmin(importances)))
    return remaining


def max_value_rank(X: np.ndarray, names: Sequence[str], fraction: float = 0.3) -> List[str]:
    """Top ceil(fraction * p) columns by maximum entry, ties by name."""
    X = np.asarray(X, dtype=float)
    order = rank_desc(X.max(axis=0), names)
    return [names[j] for j in order[: top_count(fraction, len(names))]]


@dataclass(frozen=True)
class FeatureScore:
    otu: str
    flags: Tuple[bool, ...] = (False,) * len(CRITERIA)
    network_selected: bool = False
    ml_selected: bool = False
    net_degree_diff: int = 0

    @property
    def total(self) -> int:
        return int(sum(self.flags))

    @property
    def combined(self) -> int:
        return int(self.ml_selected) + 2 * int(self.network_selected)

    def flag(self, criterion: str) -> bool:
        return self.flags[CRITERIA.index(criterion)]


def total_score(
    flags: np.ndarray, names: Sequence[str], fraction: float = 0.3
) -> Tuple[List[FeatureScore], List[str]]:
    """TOTAL votes per OTU and the top ceil(fraction * p) OTUs by TOTAL (ties by name).

    ``flags`` has one row per criterion and one column per OTU.
    """
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim != 2 or flags.shape[1] != len(names):
        raise DataError(f"flag matrix of shape {flags.shape} does not match {len(names)} OTUs")
    totals = flags.sum(axis=0)
    order = rank_desc(totals, names)
    ml_selected = [names[j] for j in order[: top_count(fraction, len(names))]]
    chosen = set(ml_selected)
    scores = [
        FeatureScore(
            otu=name, flags=tuple(bool(f) for f in flags[:, j]), ml_selected=name in chosen
        )
        for j, name in enumerate(names)
    ]
    return scores, ml_selected


@dataclass
class Combination:
    scores: List[FeatureScore]
    subsets: Dict[str, List[str]] = field(default_factory=dict)


def combined_score(
    ml_selected: Sequence[str],
    net_selected: Sequence[str],
    all_otus: Sequence[Union[str, FeatureScore]],
) -> Combination:
    """Score 0-3 per OTU (1 for the ML cut, 2 for the network cut) and the subsets.

    OTU-S0 keeps the unselected OTUs with the best TOTAL, as many as OTU-S3 has members.
    Subsets list OTUs in input order.
    """
    ml, net = set(ml_selected), set(net_selected)
    base = [FeatureScore(otu=o) if isinstance(o, str) else o for o in all_otus]
    names = [s.otu for s in base]
    unknown = (ml | net) - set(names)
    if unknown:
        raise DataError(f"selected OTUs not in the table: {', '.join(sorted(unknown))}")
    scores = [replace(s, ml_selected=s.otu in ml, network_selected=s.otu in net) for s in base]

    members: Dict[int, List[str]] = {c: [] for c in range(4)}
    for s in scores:
        members[s.combined].append(s.otu)
    zero = [s for s in scores if s.combined == 0]
    order = rank_desc([s.total for s in zero], [s.otu for s in zero])
    keep = {zero[j].otu for j in order[: len(members[3])]}
    if len(keep) < len(members[3]):
        logger.warning(
            f"only {len(keep)} unselected OTUs available for OTU-S0 (OTU-S3 has {len(members[3])})"
        )
    if not members[3]:
        logger.warning("no OTU is selected by both strategies; OTU-S0 and OTU-S3 are empty")
    subsets = {
        "OTU-S0": [name for name in members[0] if name in keep],
        "OTU-S1": members[1],
        "OTU-S2": members[2],
        "OTU-S3": members[3],
    }
    return Combination(scores=scores, subsets=subsets)


@dataclass
class FeatureSelection:
    scores: List[FeatureScore]
    ml_selected: List[str]
    net_selected: List[str]
    comparison: NetworkComparison
    subsets: Dict[str, List[str]]


def _criterion(
    name: str,
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    fraction: float,
    seed: int,
    settings: RfeSettings,
) -> List[str]:
    k = top_count(fraction, len(names))
    if name == "KBest":
        order = rank_desc(anova_f_scores(X, y), names)
        return [names[j] for j in order[:k]]
    if name == "Mutual":
        order = rank_desc(mutual_information(X, y), names)
        return [names[j] for j in order[:k]]
    if name == "Max":
        return max_value_rank(X, names, fraction)
    kept = rfe(RfeEstimator(name), X, y, k, seed=seed, settings=settings)
    return [names[j] for j in kept]


def select_features(
    table: OtuTable,
    labels: Union[BinaryLabels, np.ndarray],
    fraction: float = 0.3,
    seed: int = 0,
    settings: Optional[RfeSettings] = None,
    threshold: float = 0.2,
    ridge: float = 0.1,
    n_jobs: int = 1,
) -> FeatureSelection:
    """Run the seven criteria and the network comparison on one table."""
    y = labels.labels if isinstance(labels, BinaryLabels) else np.asarray(labels).astype(int)
    X, y = _check_xy(table.counts, y)
    names = list(table.otu_names)
    settings = settings or RfeSettings()

    picks = Parallel(n_jobs=n_jobs)(
        delayed(_criterion)(c, X, y, names, fraction, seed, settings) for c in CRITERIA
    )
    flags = np.array([[name in set(chosen) for name in names] for chosen in picks])
    scores, ml_selected = total_score(flags, names, fraction)

    net0, net1 = class_networks(X, y, names, threshold=threshold, ridge=ridge)
    comparison = compare_networks(net0, net1)
    net_selected = select_by_degree_diff(comparison, fraction)
    diffs = comparison.difference
    scores = [replace(s, net_degree_diff=int(diffs[j])) for j, s in enumerate(scores)]

    combination = combined_score(ml_selected, net_selected, scores)
    logger.info(
        f"selected {len(ml_selected)} OTUs by TOTAL and {len(net_selected)} by degree difference; "
        + ", ".join(f"{k}={len(v)}" for k, v in combination.subsets.items())
    )
    return FeatureSelection(
        scores=combination.scores,
        ml_selected=ml_selected,
        net_selected=net_selected,
        comparison=comparison,
        subsets=combination.subsets,
    )
