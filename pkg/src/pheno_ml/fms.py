"""Full model selection: a regression tree over preprocessing-configuration indicators
that explains weighted F1 across grid cells."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator

from .data import TaxonomicLevel
from .errors import DataError
from .learners import TreeNode, TreeParams, grow_tree

logger = logging.getLogger(__name__)

LEVEL_NAMES = tuple(level.label for level in TaxonomicLevel)
FEATURE_NAMES = ("Aug",) + tuple(f"NM_{i}" for i in range(1, 21)) + LEVEL_NAMES


class FmsRecord(BaseModel):
    """One grid cell's configuration and score."""

    aug: int
    nm_index: int
    level: str
    weighted_f1: float

    @field_validator("aug")
    @classmethod
    def _aug(cls, v: int) -> int:
        if v not in (0, 1):
            raise ValueError("aug must be 0 or 1")
        return v

    @field_validator("nm_index")
    @classmethod
    def _nm(cls, v: int) -> int:
        if not 1 <= v <= 20:
            raise ValueError("nm_index must be in 1..20")
        return v

    @field_validator("level")
    @classmethod
    def _level(cls, v: str) -> str:
        return TaxonomicLevel.parse(v).label

    @field_validator("weighted_f1")
    @classmethod
    def _score(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("weighted_f1 must be in [0, 1]")
        return v

    def indicators(self) -> np.ndarray:
        row = np.zeros(len(FEATURE_NAMES))
        row[0] = self.aug
        row[self.nm_index] = 1.0
        row[21 + LEVEL_NAMES.index(self.level)] = 1.0
        return row


def encode(records: Sequence[FmsRecord]) -> Tuple[np.ndarray, np.ndarray]:
    """26 indicator columns (Aug, NM_1..NM_20, Phylum..Genus) and the F1 targets."""
    X = np.array([r.indicators() for r in records]).reshape(len(records), len(FEATURE_NAMES))
    y = np.array([r.weighted_f1 for r in records], dtype=float)
    return X, y


@dataclass
class RegressionTree:
    root: TreeNode
    n_records: int
    feature_names: Tuple[str, ...] = FEATURE_NAMES

    def coverage(self, node: TreeNode) -> float:
        """Percentage of records reaching ``node``."""
        return 100.0 * node.n_samples / self.n_records

    def leaves(self) -> List[TreeNode]:
        return self.root.leaves()

    def condition(self, node: TreeNode) -> str:
        """Condition whose truth sends a record left, e.g. "NM_6 = 0"."""
        return f"{self.feature_names[node.feature]} = 0"


def fit_regression_tree(
    records: Sequence[FmsRecord], max_depth: int = 4, min_split: int = 2, min_leaf: int = 1
) -> RegressionTree:
    """Squared-error CART over the indicator encoding; indicator = 0 goes left."""
    records = list(records)
    if not records:
        raise DataError("no records to fit a full-model-selection tree")
    X, y = encode(records)
    params = TreeParams(
        max_depth=max_depth,
        min_samples_split=min_split,
        min_samples_leaf=min_leaf,
        criterion="squared_error",
    )
    root, _ = grow_tree(X, y, params)
    return RegressionTree(root=root, n_records=len(records))


def export_tree(tree: RegressionTree, format: str = "text") -> str:
    from .formatters import fms_dot, fms_text

    if format == "text":
        return fms_text.render(tree)
    if format == "dot":
        return fms_dot.render(tree)
    raise DataError(f"unknown export format {format!r}; expected text or dot")


def records_from_results(results: Iterable[Union[Mapping[str, Any], BaseModel]]) -> List[FmsRecord]:
    """FmsRecords for successful grid cells; failed or skipped cells are counted and dropped."""
    out, skipped = [], 0
    for result in results:
        row = result.model_dump() if isinstance(result, BaseModel) else dict(result)
        if row.get("status", "ok") != "ok" or row.get("weighted_f1") is None:
            skipped += 1
            continue
        out.append(
            FmsRecord(
                aug=int(row["aug"]),
                nm_index=int(row["nm_index"]),
                level=str(row["level"]),
                weighted_f1=float(row["weighted_f1"]),
            )
        )
    if skipped:
        logger.warning(f"excluded {skipped} failed or skipped cell(s) from full model selection")
    return out


def load_records(path: Union[str, Path]) -> List[FmsRecord]:
    """Read FmsRecords, or ResultRecords, from a JSONL file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    rows = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: line {i} is not valid JSON: {e}") from e
    try:
        return records_from_results(rows)
    except (KeyError, ValidationError) as e:
        raise DataError(f"{path}: not a result or FMS record file: {e}") from e
