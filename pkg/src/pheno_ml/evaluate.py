"""Splitting, weighted-F1 metrics, random baselines and the exceedance test."""

import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel

from .data import OtuTable
from .errors import DataError
from .ranking import largest_remainder

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int]]


@dataclass(frozen=True)
class SplitPlan:
    test_fraction: float = 0.2
    folds: int = 10
    stratified: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.test_fraction < 1:
            raise DataError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.folds < 2:
            raise DataError(f"folds must be >= 2, got {self.folds}")


@dataclass(frozen=True, eq=False)
class Split:
    """Sorted train/test row indices and the CV fold of every training row."""

    train: np.ndarray
    test: np.ndarray
    folds: np.ndarray

    def fold(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """(fit rows, validation rows) of fold ``k`` as indices into the full data."""
        return self.train[self.folds != k], self.train[self.folds == k]


def stratified_folds(
    labels: Sequence[int], k: int, seed: Seed = 0, stratified: bool = True
) -> np.ndarray:
    """Fold id in 0..k-1 for every sample.

    Each class is shuffled and dealt round-robin, continuing where the previous class
    stopped, so fold sizes differ by at most one.
    """
    y = np.asarray(labels).astype(int)
    rng = np.random.default_rng(seed)
    if not stratified:
        return rng.permutation(y.size) % k
    folds = np.empty(y.size, dtype=int)
    offset = 0
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        if members.size < k:
            logger.warning(
                f"class {c} has {members.size} sample(s) for {k} folds; "
                f"some folds will not contain it"
            )
        folds[members] = (np.arange(members.size) + offset) % k
        offset += members.size
    return folds


def split(n: int, labels: Sequence[int], plan: SplitPlan) -> Split:
    """Stratified hold-out split plus CV folds over the training part."""
    y = np.asarray(labels).astype(int)
    if y.size != n:
        raise DataError(f"{y.size} labels for {n} samples")
    if n < plan.folds + 1:
        raise DataError(f"need at least {plan.folds + 1} samples for {plan.folds} folds, got {n}")
    n_test = math.ceil(round(plan.test_fraction * n, 9))
    rng = np.random.default_rng(plan.seed)

    if plan.stratified:
        classes = np.unique(y)
        members = [rng.permutation(np.flatnonzero(y == c)) for c in classes]
        quotas = largest_remainder(n_test, [m.size for m in members])
        test = np.concatenate([m[:q] for m, q in zip(members, quotas)])
    else:
        test = rng.permutation(n)[:n_test]
    test = np.sort(test)
    train = np.setdiff1d(np.arange(n), test)
    folds = stratified_folds(y[train], plan.folds, [plan.seed, 1], plan.stratified)
    return Split(train=train, test=test, folds=folds)


@dataclass(frozen=True)
class Metrics:
    """Per-class precision/recall/F1 for classes (0, 1) and their support-weighted F1."""

    precision: Tuple[float, float]
    recall: Tuple[float, float]
    f1: Tuple[float, float]
    support: Tuple[int, int]
    weighted: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "support": list(self.support),
            "weighted_f1": self.weighted,
        }


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def weighted_f1(y_true: Sequence[int], y_pred: Sequence[int]) -> Metrics:
    """Weighted F1 over classes 0 and 1; any zero division counts as 0."""
    t = np.asarray(y_true).astype(int)
    p = np.asarray(y_pred).astype(int)
    if t.size == 0:
        raise DataError("cannot score an empty prediction")
    if t.size != p.size:
        raise DataError(f"{t.size} true labels but {p.size} predictions")
    precision, recall, f1, support = [], [], [], []
    for c in (0, 1):
        tp = float(np.sum((t == c) & (p == c)))
        pr = _ratio(tp, float(np.sum(p == c)))
        rc = _ratio(tp, float(np.sum(t == c)))
        precision.append(pr)
        recall.append(rc)
        f1.append(_ratio(2 * pr * rc, pr + rc))
        support.append(int(np.sum(t == c)))
    weighted = sum(s * f for s, f in zip(support, f1)) / t.size
    return Metrics(
        precision=(precision[0], precision[1]),
        recall=(recall[0], recall[1]),
        f1=(f1[0], f1[1]),
        support=(support[0], support[1]),
        weighted=weighted,
    )


class BaselineStrategy(IntEnum):
    RANDOM_MATRIX = 1
    SPARSITY_PRESERVING_RANDOM = 2
    PERMUTED_LABELS = 3
    PERMUTED_ROWS = 4

    @classmethod
    def parse(cls, value: Union[str, int, "BaselineStrategy"]) -> "BaselineStrategy":
        if isinstance(value, cls):
            return value
        text = str(value).strip()
        if text.isdigit():
            return cls(int(text))
        try:
            return cls[text.upper().replace("-", "_")]
        except KeyError:
            raise DataError(f"unknown baseline strategy: {value!r}") from None


def _closed(matrix: np.ndarray) -> np.ndarray:
    totals = matrix.sum(axis=1, keepdims=True)
    return np.divide(matrix, totals, out=np.zeros_like(matrix), where=totals > 0)


def generate_baseline(
    strategy: Union[BaselineStrategy, int],
    table: Union[OtuTable, np.ndarray],
    labels: Sequence[int],
    seed: Seed = 0,
) -> Tuple[Union[OtuTable, np.ndarray], np.ndarray]:
    """A randomized stand-in for (table, labels) under one of the four strategies."""
    strategy = BaselineStrategy.parse(strategy)
    X = table.counts if isinstance(table, OtuTable) else np.asarray(table, dtype=float)
    y = np.asarray(labels).astype(int)
    if X.size == 0:
        raise DataError("cannot build a baseline from an empty table")
    rng = np.random.default_rng(seed)

    if strategy is BaselineStrategy.RANDOM_MATRIX:
        X = _closed(rng.uniform(size=X.shape))
    elif strategy is BaselineStrategy.SPARSITY_PRESERVING_RANDOM:
        X = _closed(np.where(X != 0, rng.uniform(size=X.shape), 0.0))
    elif strategy is BaselineStrategy.PERMUTED_LABELS:
        y = rng.permutation(y)
    else:
        X = X[rng.permutation(X.shape[0])]

    if isinstance(table, OtuTable):
        transform = table.transform if strategy >= BaselineStrategy.PERMUTED_LABELS else "TSS"
        return table.with_counts(X, transform=transform), y
    return X, y


Runner = Callable[[np.ndarray, np.ndarray, int], Metrics]


class BaselineTestResult(BaseModel):
    strategy: str
    f_original: float
    scores: List[float]
    per_class: List[Tuple[float, float]]
    failed: int = 0
    alpha: float = 0.05

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def exceed(self) -> int:
        return sum(1 for f in self.scores if f > self.f_original)

    @property
    def ev(self) -> float:
        return self.exceed / self.n

    @property
    def reject(self) -> bool:
        return self.ev < self.alpha

    def summary(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "N": self.n,
            "F_original": self.f_original,
            "X": self.exceed,
            "EV": self.ev,
            "alpha": self.alpha,
            "reject": self.reject,
            "failed": self.failed,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "replicate": range(1, self.n + 1),
                "weighted_f1": self.scores,
                "f1_label0": [pair[0] for pair in self.per_class],
                "f1_label1": [pair[1] for pair in self.per_class],
            }
        )


def replicate_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _run_replicate(
    strategy: BaselineStrategy, X: Any, y: np.ndarray, runner: Runner, seed: int, index: int
) -> Tuple[Optional[Metrics], str]:
    Xb, yb = generate_baseline(strategy, X, y, seed=[seed, index])
    try:
        return runner(Xb, yb, replicate_seed(seed, index)), ""
    except Exception as e:  # noqa: BLE001
        return None, str(e)


def exceedance_test(
    f_original: float,
    strategy: Union[BaselineStrategy, int],
    table: Union[OtuTable, np.ndarray],
    labels: Sequence[int],
    runner: Runner,
    n: int = 200,
    alpha: float = 0.05,
    seed: int = 0,
    n_jobs: int = 1,
) -> BaselineTestResult:
    """Compare a real-data score to ``n`` randomized baselines.

    EV is the fraction of baseline scores strictly above ``f_original``; the null is
    rejected when EV < alpha. Replicates whose runner raises are dropped.
    """
    if n < 1:
        raise DataError(f"need at least one baseline replicate, got {n}")
    strategy = BaselineStrategy.parse(strategy)
    y = np.asarray(labels).astype(int)
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_run_replicate)(strategy, table, y, runner, seed, i) for i in range(n)
    )
    scores, per_class, failed = [], [], 0
    for i, (metrics, error) in enumerate(outcomes):
        if metrics is None:
            failed += 1
            logger.warning(f"baseline replicate {i + 1} failed and is excluded: {error}")
            continue
        scores.append(metrics.weighted)
        per_class.append(metrics.f1)
    if not scores:
        raise DataError(f"all {n} baseline replicates failed")
    return BaselineTestResult(
        strategy=strategy.name,
        f_original=f_original,
        scores=scores,
        per_class=per_class,
        failed=failed,
        alpha=alpha,
    )


def holdout_runner(factory: Callable[[int], Any], plan: SplitPlan) -> Runner:
    """Runner that fits ``factory(seed)`` on the plan's training rows and scores the test rows.

    The split follows ``plan.seed`` so every replicate is scored on the same rows.
    """

    def run(X: Any, y: np.ndarray, seed: int) -> Metrics:
        matrix = X.counts if isinstance(X, OtuTable) else np.asarray(X, dtype=float)
        parts = split(matrix.shape[0], y, plan)
        model = factory(seed).fit(matrix[parts.train], y[parts.train])
        return weighted_f1(y[parts.test], model.predict(matrix[parts.test]))

    return run


SUMMARY_KEYS = ("predictors", "model", "response")


def summarize_results(
    records: Iterable[Union[Mapping[str, Any], BaseModel]], keys: Sequence[str] = SUMMARY_KEYS
) -> pd.DataFrame:
    """Distribution of weighted F1 per group of successful records (boxplot-ready)."""
    rows = [r.model_dump() if isinstance(r, BaseModel) else dict(r) for r in records]
    frame = pd.DataFrame(rows)
    columns = list(keys) + ["count", "min", "q1", "median", "q3", "max"]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    if "status" in frame:
        frame = frame[frame["status"] == "ok"]
    frame = frame.dropna(subset=["weighted_f1"])
    if frame.empty:
        return pd.DataFrame(columns=columns)
    grouped = frame.groupby(list(keys), sort=True)["weighted_f1"]
    summary = pd.DataFrame(
        {
            "count": grouped.count(),
            "min": grouped.min(),
            "q1": grouped.quantile(0.25),
            "median": grouped.median(),
            "q3": grouped.quantile(0.75),
            "max": grouped.max(),
        }
    ).reset_index()
    return summary[columns]
