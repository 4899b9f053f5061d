"""Data model, file ingestion, OTU filtering and response binarization."""

import logging
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataError, EmptyTableError, IngestionError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DISEASE_RESPONSES = ("Scab", "Scabpit", "Scabsuper", "Black_Scurf")
YIELD_RESPONSES = ("Yield_Meter", "Yield_Plant")
RESPONSES = YIELD_RESPONSES + DISEASE_RESPONSES
METADATA_COLUMNS = ("sample_id", "variety", "state") + RESPONSES


class TaxonomicLevel(IntEnum):
    """Taxonomic rank of an OTU table, ordered from coarse to fine."""

    PHYLUM = 1
    CLASS = 2
    ORDER = 3
    FAMILY = 4
    GENUS = 5

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value: Union[str, int, "TaxonomicLevel"]) -> "TaxonomicLevel":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise DataError(f"unknown taxonomic level: {value!r}") from None


class EnvGroup(str, Enum):
    """Kind of environmental predictor block."""

    SOIL = "Soil"
    DS = "DS"
    ALPHA = "Alpha"

    @property
    def width(self) -> int:
        return {"Soil": 12, "DS": 4, "Alpha": 9}[self.value]

    @classmethod
    def parse(cls, value: Union[str, "EnvGroup"]) -> "EnvGroup":
        if isinstance(value, cls):
            return value
        for group in cls:
            if group.value.lower() == str(value).strip().lower():
                return group
        raise DataError(f"unknown environmental group: {value!r}")


def _check_unique(values: Sequence[str], what: str) -> None:
    seen = set()
    for i, value in enumerate(values):
        if value in seen:
            raise DataError(f"duplicate {what} {value!r} at position {i}")
        seen.add(value)


@dataclass(frozen=True, eq=False)
class OtuTable:
    """Sample by OTU abundance matrix.

    Raw tables hold integer counts; normalized tables reuse the same shape with reals.
    ``transform`` names the last transformation applied ("counts" for raw input); only
    ``clr`` tables may hold negative entries. ``provenance`` names the source sample of
    synthetic rows and is None for original rows.
    """

    sample_ids: Tuple[str, ...]
    otu_names: Tuple[str, ...]
    counts: np.ndarray
    level: TaxonomicLevel = TaxonomicLevel.GENUS
    varieties: Tuple[str, ...] = ()
    provenance: Tuple[Optional[str], ...] = ()
    transform: str = "counts"

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=float)
        if counts.ndim != 2:
            raise DataError(f"counts must be a 2-D matrix, got shape {counts.shape}")
        n, p = counts.shape
        sample_ids = tuple(str(s) for s in self.sample_ids)
        otu_names = tuple(str(o) for o in self.otu_names)
        varieties = tuple(str(v).strip() for v in self.varieties) or ("",) * n
        provenance = tuple(self.provenance) or (None,) * n

        if len(sample_ids) != n:
            raise DataError(f"{len(sample_ids)} sample ids for {n} rows")
        if len(otu_names) != p:
            raise DataError(f"{len(otu_names)} OTU names for {p} columns")
        if len(varieties) != n or len(provenance) != n:
            raise DataError("varieties and provenance must have one entry per sample")
        _check_unique(sample_ids, "sample id")
        _check_unique(otu_names, "OTU name")
        if not np.isfinite(counts).all():
            raise DataError("counts contain non-finite values")
        if self.transform != "clr" and (counts < 0).any():
            row, col = np.argwhere(counts < 0)[0]
            raise DataError(f"negative count at ({row + 1},{otu_names[col]})")

        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "otu_names", otu_names)
        object.__setattr__(self, "varieties", varieties)
        object.__setattr__(self, "provenance", provenance)
        object.__setattr__(self, "level", TaxonomicLevel.parse(self.level))

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def p(self) -> int:
        return self.counts.shape[1]

    @property
    def depths(self) -> np.ndarray:
        """Sequencing depth m^(k) of every sample."""
        return self.counts.sum(axis=1)

    @property
    def is_synthetic(self) -> np.ndarray:
        return np.array([src is not None for src in self.provenance], dtype=bool)

    def with_counts(self, counts: np.ndarray, transform: Optional[str] = None) -> "OtuTable":
        return replace(self, counts=counts, transform=transform or self.transform)

    def take(self, rows: Iterable[int]) -> "OtuTable":
        rows = np.asarray(list(rows), dtype=int)
        return replace(
            self,
            sample_ids=tuple(self.sample_ids[i] for i in rows),
            counts=self.counts[rows],
            varieties=tuple(self.varieties[i] for i in rows),
            provenance=tuple(self.provenance[i] for i in rows),
        )

    def select(self, otus: Iterable[Union[int, str]]) -> "OtuTable":
        """Keep the given columns (names or indices) in the order given."""
        index = {name: j for j, name in enumerate(self.otu_names)}
        cols = []
        for otu in otus:
            if isinstance(otu, str):
                if otu not in index:
                    raise DataError(f"unknown OTU {otu!r}")
                cols.append(index[otu])
            else:
                cols.append(int(otu))
        return replace(
            self,
            otu_names=tuple(self.otu_names[j] for j in cols),
            counts=self.counts[:, cols],
        )

    def concat(self, other: "OtuTable") -> "OtuTable":
        if other.otu_names != self.otu_names:
            raise DataError("cannot stack tables with different OTU columns")
        return replace(
            self,
            sample_ids=self.sample_ids + other.sample_ids,
            counts=np.vstack([self.counts, other.counts]),
            varieties=self.varieties + other.varieties,
            provenance=self.provenance + other.provenance,
        )

    def with_varieties(self, varieties: Sequence[str]) -> "OtuTable":
        return replace(self, varieties=tuple(varieties))

    def to_frame(self, with_provenance: bool = False) -> pd.DataFrame:
        frame = pd.DataFrame(self.counts, columns=list(self.otu_names))
        frame.insert(0, "sample_id", list(self.sample_ids))
        if with_provenance:
            frame["provenance"] = [src or "" for src in self.provenance]
        return frame


@dataclass(frozen=True, eq=False)
class ResponseSet:
    """Continuous phenotype values and per-sample metadata."""

    sample_ids: Tuple[str, ...]
    varieties: Tuple[str, ...]
    values: Dict[str, np.ndarray]
    states: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        n = len(self.sample_ids)
        if len(self.varieties) != n:
            raise DataError("one variety per sample is required")
        for name, vals in self.values.items():
            if len(vals) != n:
                raise DataError(f"response {name} has {len(vals)} values for {n} samples")
            if (np.asarray(vals) < 0).any():
                raise DataError(f"response {name} has negative values")
        _check_unique(self.sample_ids, "sample id")

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def response(self, name: str) -> np.ndarray:
        if name not in self.values:
            raise DataError(f"unknown response {name!r}; expected one of {', '.join(RESPONSES)}")
        return self.values[name]

    def reorder(self, sample_ids: Sequence[str]) -> "ResponseSet":
        position = {sid: i for i, sid in enumerate(self.sample_ids)}
        missing = [sid for sid in sample_ids if sid not in position]
        if missing:
            raise DataError(f"no metadata for sample(s): {', '.join(missing[:5])}")
        rows = [position[sid] for sid in sample_ids]
        return ResponseSet(
            sample_ids=tuple(sample_ids),
            varieties=tuple(self.varieties[i] for i in rows),
            values={name: np.asarray(vals)[rows] for name, vals in self.values.items()},
            states=tuple(self.states[i] for i in rows) if self.states else (),
        )


@dataclass(frozen=True, eq=False)
class BinaryLabels:
    """Binarized response, one 0/1 label per sample."""

    response: str
    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels).astype(int)
        if labels.ndim != 1 or labels.size == 0:
            raise DataError("labels must be a non-empty vector")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    def take(self, rows: Iterable[int]) -> "BinaryLabels":
        return BinaryLabels(self.response, self.labels[np.asarray(list(rows), dtype=int)])

    def class_counts(self) -> Dict[int, int]:
        return {c: int((self.labels == c).sum()) for c in (0, 1)}


@dataclass(frozen=True, eq=False)
class EnvTable:
    """Environmental predictors (soil chemistry, suppressiveness, alpha diversity)."""

    sample_ids: Tuple[str, ...]
    feature_names: Tuple[str, ...]
    values: np.ndarray
    group: EnvGroup

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape != (len(self.sample_ids), len(self.feature_names)):
            raise DataError("environmental values do not match sample and feature names")
        if not np.isfinite(values).all():
            raise DataError(f"{self.group.value} table has missing values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "group", EnvGroup.parse(self.group))

    @property
    def q(self) -> int:
        return self.values.shape[1]

    def take(self, rows: Iterable[int]) -> "EnvTable":
        rows = np.asarray(list(rows), dtype=int)
        return replace(
            self,
            sample_ids=tuple(self.sample_ids[i] for i in rows),
            values=self.values[rows],
        )

    def reorder(self, sample_ids: Sequence[str]) -> "EnvTable":
        position = {sid: i for i, sid in enumerate(self.sample_ids)}
        missing = [sid for sid in sample_ids if sid not in position]
        if missing:
            raise DataError(
                f"{self.group.value} table has no row for sample(s): {', '.join(missing[:5])}"
            )
        return self.take(position[sid] for sid in sample_ids)


def _read_raw_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"file not found: {path}")
    try:
        raw = pd.read_csv(
            path, header=None, dtype=str, keep_default_na=False, encoding="utf-8"
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise IngestionError(f"{path}: {e}") from e
    if raw.shape[0] < 1:
        raise IngestionError(f"{path}: missing header row", row=0)
    return raw


def _parse_numeric(body: pd.DataFrame, header: List[str], path: PathLike) -> np.ndarray:
    values = body.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    matrix = values.to_numpy(dtype=float)
    bad = np.argwhere(np.isnan(matrix))
    if bad.size:
        row, col = bad[0]
        raise IngestionError(
            f"{path}: non-numeric value at ({row + 1},{header[col]})",
            row=row + 1,
            column=header[col],
        )
    return matrix


def load_otu_table(path: PathLike, level: Union[str, TaxonomicLevel]) -> OtuTable:
    """Read an OTU CSV (``sample_id`` then one column per OTU)."""
    raw = _read_raw_csv(path)
    header = [str(h).strip() for h in raw.iloc[0]]
    if not header or header[0] != "sample_id":
        raise IngestionError(
            f"{path}: malformed header, first column must be 'sample_id'", row=0, column=header[0]
        )
    if len(header) < 2:
        raise IngestionError(f"{path}: malformed header, no OTU columns", row=0)
    otu_names = header[1:]
    if len(set(otu_names)) != len(otu_names):
        dup = next(name for name in otu_names if otu_names.count(name) > 1)
        raise IngestionError(f"{path}: malformed header, duplicate OTU {dup!r}", row=0, column=dup)

    body = raw.iloc[1:].reset_index(drop=True)
    sample_ids = [str(s).strip() for s in body.iloc[:, 0]]
    seen: Dict[str, int] = {}
    for i, sid in enumerate(sample_ids):
        if sid in seen:
            raise IngestionError(
                f"{path}: duplicate sample id {sid!r} at row {i + 1}", row=i + 1, column="sample_id"
            )
        seen[sid] = i

    counts = _parse_numeric(body.iloc[:, 1:], otu_names, path)
    negative = np.argwhere(counts < 0)
    if negative.size:
        row, col = negative[0]
        raise IngestionError(
            f"negative count at ({row + 1},{otu_names[col]})", row=row + 1, column=otu_names[col]
        )

    return OtuTable(
        sample_ids=tuple(sample_ids),
        otu_names=tuple(otu_names),
        counts=counts,
        level=TaxonomicLevel.parse(level),
    )


def load_metadata(path: PathLike) -> ResponseSet:
    """Read the metadata CSV holding variety, state and the six responses."""
    raw = _read_raw_csv(path)
    header = [str(h).strip() for h in raw.iloc[0]]
    missing = [c for c in METADATA_COLUMNS if c not in header]
    if missing:
        raise IngestionError(f"{path}: metadata is missing column(s) {', '.join(missing)}", row=0)
    body = raw.iloc[1:].reset_index(drop=True)
    body.columns = header
    sample_ids = tuple(str(s).strip() for s in body["sample_id"])
    if len(set(sample_ids)) != len(sample_ids):
        raise IngestionError(f"{path}: duplicate sample ids in metadata")
    numeric = _parse_numeric(body[list(RESPONSES)], list(RESPONSES), path)
    negative = np.argwhere(numeric < 0)
    if negative.size:
        row, col = negative[0]
        raise IngestionError(
            f"{path}: negative response at ({row + 1},{RESPONSES[col]})",
            row=row + 1,
            column=RESPONSES[col],
        )
    return ResponseSet(
        sample_ids=sample_ids,
        varieties=tuple(str(v).strip() for v in body["variety"]),
        values={name: numeric[:, j] for j, name in enumerate(RESPONSES)},
        states=tuple(str(s).strip() for s in body["state"]),
    )


def load_env_table(path: PathLike, group: Union[str, EnvGroup], strict: bool = True) -> EnvTable:
    """Read an environmental CSV (``sample_id`` plus named features)."""
    group = EnvGroup.parse(group)
    raw = _read_raw_csv(path)
    header = [str(h).strip() for h in raw.iloc[0]]
    if not header or header[0] != "sample_id":
        raise IngestionError(f"{path}: malformed header, first column must be 'sample_id'", row=0)
    names = header[1:]
    if strict and len(names) != group.width:
        raise IngestionError(
            f"{path}: {group.value} table must have {group.width} features, found {len(names)}"
        )
    body = raw.iloc[1:].reset_index(drop=True)
    values = _parse_numeric(body.iloc[:, 1:], names, path)
    return EnvTable(
        sample_ids=tuple(str(s).strip() for s in body.iloc[:, 0]),
        feature_names=tuple(names),
        values=values,
        group=group,
    )


def align(table: OtuTable, responses: ResponseSet) -> Tuple[OtuTable, ResponseSet]:
    """Keep samples present in both inputs, in table order, and attach varieties."""
    known = set(responses.sample_ids)
    rows = [i for i, sid in enumerate(table.sample_ids) if sid in known]
    dropped = table.n - len(rows)
    if dropped:
        logger.warning(f"dropping {dropped} sample(s) without metadata")
    if not rows:
        raise EmptyTableError("no sample of the OTU table has metadata")
    table = table.take(rows)
    responses = responses.reorder(table.sample_ids)
    return table.with_varieties(responses.varieties), responses


def filter_rare_otus(table: OtuTable, min_prevalence: int = 15) -> OtuTable:
    """Keep OTUs with a nonzero count in at least ``min_prevalence`` samples."""
    if min_prevalence < 1:
        raise DataError(f"min_prevalence must be >= 1, got {min_prevalence}")
    prevalence = (table.counts > 0).sum(axis=0)
    keep = np.flatnonzero(prevalence >= min_prevalence)
    if keep.size == 0:
        raise EmptyTableError(
            f"empty table: no OTU is present in at least {min_prevalence} samples"
        )
    filtered = table.select(keep)

    empty = filtered.depths <= 0
    if empty.any():
        dropped = [sid for sid, e in zip(filtered.sample_ids, empty) if e]
        logger.warning(
            f"dropping {len(dropped)} sample(s) with zero depth after filtering: "
            f"{', '.join(dropped[:5])}"
        )
        filtered = filtered.take(np.flatnonzero(~empty))
        if filtered.n == 0:
            raise EmptyTableError("empty table: every sample has zero depth after filtering")
    return filtered


def binarize_disease(values: Sequence[float], response: str = "disease") -> BinaryLabels:
    """Label 1 where any disease was recorded."""
    values = np.asarray(values, dtype=float)
    if (values < 0).any():
        raise DataError(f"{response}: disease values must be non-negative")
    return BinaryLabels(response, (values > 0.0).astype(int))


def binarize_yield(
    values: Sequence[float], varieties: Sequence[str], response: str = "yield"
) -> BinaryLabels:
    """Label 1 where yield exceeds the median of the sample's variety."""
    values = np.asarray(values, dtype=float)
    varieties = np.array([str(v).strip() for v in varieties], dtype=object)
    if values.shape[0] != varieties.shape[0]:
        raise DataError(f"{response}: {values.size} values for {varieties.size} varieties")
    labels = np.zeros(values.size, dtype=int)
    for variety in sorted(set(varieties)):
        members = varieties == variety
        median = np.median(values[members])
        labels[members] = (values[members] > median).astype(int)
    return BinaryLabels(response, labels)


def binarize(responses: ResponseSet, name: str) -> BinaryLabels:
    """Binarize a response with the rule matching its kind."""
    values = responses.response(name)
    if name in YIELD_RESPONSES:
        return binarize_yield(values, responses.varieties, response=name)
    return binarize_disease(values, response=name)
