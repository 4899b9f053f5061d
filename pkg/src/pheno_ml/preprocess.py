"""Zero replacement, count normalization and environmental scaling.

The 20 microbiome preprocessing options are every pairing of a zero-replacement
strategy with a normalization, numbered NM1 (TSS+none) to NM20 (clr+bayesMult).

CSS, COM and rarefy compare samples with each other. ``fit_spec`` freezes those
references on the training rows so that held-out rows are transformed without
influencing them.
"""

import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import ClassVar, Iterable, List, Optional, Union

import numpy as np
from sklearn import preprocessing
from skbio.stats.composition import clr

from .data import EnvTable, OtuTable
from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoReplacement:
    """Keep zeros as they are."""

    name: ClassVar[str] = "none"


@dataclass(frozen=True)
class Pseudo:
    """Replace every zero by a constant pseudo count."""

    pseudo_count: float = 1.0
    name: ClassVar[str] = "pseudo"

    def __post_init__(self) -> None:
        if self.pseudo_count <= 0:
            raise DataError(f"pseudo_count must be positive, got {self.pseudo_count}")


@dataclass(frozen=True)
class MultRepl:
    """Multiplicative simple replacement.

    Zeros become ``delta`` on the simplex and nonzero parts shrink so the row keeps its
    closure. With ``delta=None`` each row uses half its smallest nonzero proportion.
    """

    delta: Optional[float] = None
    name: ClassVar[str] = "multRepl"

    def __post_init__(self) -> None:
        if self.delta is not None and self.delta <= 0:
            raise DataError(f"delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class BayesMult:
    """Bayesian-multiplicative replacement under a symmetric Dirichlet prior."""

    prior_strength: float = 0.5
    name: ClassVar[str] = "bayesMult"

    def __post_init__(self) -> None:
        if self.prior_strength <= 0:
            raise DataError(f"prior_strength must be positive, got {self.prior_strength}")


ZeroReplacement = Union[NoReplacement, Pseudo, MultRepl, BayesMult]


@dataclass(frozen=True)
class TSS:
    name: ClassVar[str] = "TSS"


@dataclass(frozen=True)
class CSS:
    """Cumulative-sum scaling; ``reference`` defaults to the median factor of the table."""

    quantile: float = 0.5
    reference: Optional[float] = None
    name: ClassVar[str] = "CSS"

    def __post_init__(self) -> None:
        if not 0 < self.quantile < 1:
            raise DataError(f"CSS quantile must be in (0, 1), got {self.quantile}")
        if self.reference is not None and self.reference <= 0:
            raise DataError(f"CSS reference must be positive, got {self.reference}")


@dataclass(frozen=True)
class COM:
    """Common-sum scaling to ``depth``, or to the table's minimum depth."""

    depth: Optional[float] = None
    name: ClassVar[str] = "COM"

    def __post_init__(self) -> None:
        if self.depth is not None and self.depth <= 0:
            raise DataError(f"COM depth must be positive, got {self.depth}")


@dataclass(frozen=True)
class Rarefy:
    seed: int = 0
    depth: Optional[int] = None
    name: ClassVar[str] = "rarefy"

    def __post_init__(self) -> None:
        if self.depth is not None and self.depth < 1:
            raise DataError(f"rarefaction depth must be >= 1, got {self.depth}")


@dataclass(frozen=True)
class CLR:
    name: ClassVar[str] = "clr"


Normalization = Union[TSS, CSS, COM, Rarefy, CLR]


@dataclass(frozen=True)
class PreprocessSpec:
    """One of the 20 canonical zero-replacement x normalization pairings."""

    index: int
    zero: ZeroReplacement
    norm: Normalization

    @property
    def label(self) -> str:
        return f"NM{self.index}:{self.norm.name}+{self.zero.name}"

    def __str__(self) -> str:
        return self.label


def preprocess_grid(
    seed: int = 0,
    pseudo_count: float = 1.0,
    delta: Optional[float] = None,
    prior_strength: float = 0.5,
    css_quantile: float = 0.5,
) -> List[PreprocessSpec]:
    """The 20 specs in canonical NM order (normalization-major)."""
    zeros: List[ZeroReplacement] = [
        NoReplacement(),
        Pseudo(pseudo_count),
        MultRepl(delta),
        BayesMult(prior_strength),
    ]
    norms: List[Normalization] = [TSS(), CSS(css_quantile), COM(), Rarefy(seed), CLR()]
    specs = []
    for i, norm in enumerate(norms):
        for j, zero in enumerate(zeros):
            specs.append(PreprocessSpec(index=4 * i + j + 1, zero=zero, norm=norm))
    return specs


def parse_spec(text: Union[str, int], seed: int = 0) -> PreprocessSpec:
    """Resolve "NM6", "6" or "NM6:CSS+pseudo" to its spec."""
    match = re.match(r"^\s*(?:NM_?)?(\d+)", str(text), re.IGNORECASE)
    if not match:
        raise DataError(f"not a preprocessing spec: {text!r}")
    index = int(match.group(1))
    if not 1 <= index <= 20:
        raise DataError(f"NM index must be in 1..20, got {index}")
    return preprocess_grid(seed=seed)[index - 1]


def _row_totals(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    empty = np.flatnonzero(totals[:, 0] <= 0)
    if empty.size:
        raise DataError(f"row {empty[0] + 1} is entirely zero")
    return totals


def _mult_repl(counts: np.ndarray, delta: Optional[float]) -> np.ndarray:
    totals = _row_totals(counts)
    props = counts / totals
    zeros = counts == 0
    if delta is None:
        smallest = np.where(zeros, np.inf, props).min(axis=1, keepdims=True)
        delta_row = 0.5 * smallest
    else:
        delta_row = np.full_like(totals, delta)
    scale = 1.0 - zeros.sum(axis=1, keepdims=True) * delta_row
    bad = np.flatnonzero(scale[:, 0] <= 0)
    if bad.size:
        raise DataError(
            f"delta {float(delta_row[bad[0], 0])} too large for row {bad[0] + 1}: "
            f"nonzero parts would become non-positive"
        )
    return np.where(zeros, delta_row, props * scale) * totals


def _bayes_mult(counts: np.ndarray, prior_strength: float) -> np.ndarray:
    totals = _row_totals(counts)
    p = counts.shape[1]
    props = counts / totals
    zeros = counts == 0
    # posterior mean of a zero cell under Dirichlet(prior_strength / p)
    replaced = (prior_strength / p) / (totals + prior_strength)
    scale = 1.0 - zeros.sum(axis=1, keepdims=True) * replaced
    return np.where(zeros, replaced, props * scale) * totals


def replace_zeros(table: OtuTable, method: ZeroReplacement) -> OtuTable:
    """Apply a zero-replacement strategy; row totals are preserved except for Pseudo."""
    if isinstance(method, NoReplacement):
        return table
    counts = table.counts
    _row_totals(counts)
    if isinstance(method, Pseudo):
        out = np.where(counts == 0, method.pseudo_count, counts)
    elif isinstance(method, MultRepl):
        out = _mult_repl(counts, method.delta)
    elif isinstance(method, BayesMult):
        out = _bayes_mult(counts, method.prior_strength)
    else:
        raise DataError(f"unknown zero replacement {method!r}")
    return table.with_counts(out)


def _css_factors(counts: np.ndarray, quantile: float) -> np.ndarray:
    factors = np.empty(counts.shape[0])
    for k, row in enumerate(counts):
        positive = row[row > 0]
        if positive.size == 0:
            raise DataError(f"CSS: row {k + 1} has no positive entry")
        cutoff = np.quantile(positive, quantile)
        factors[k] = positive[positive <= cutoff].sum()
    return factors


def _css(counts: np.ndarray, quantile: float, reference: Optional[float]) -> np.ndarray:
    factors = _css_factors(counts, quantile)
    scale = np.median(factors) if reference is None else reference
    return counts / factors[:, None] * scale


def _integer_depths(counts: np.ndarray) -> np.ndarray:
    if not np.allclose(counts, np.round(counts)):
        raise DataError("rarefy needs integer counts; apply it before other transforms")
    return np.round(counts).astype(np.int64).sum(axis=1)


def _rarefy(counts: np.ndarray, seed: int, depth: Optional[int]) -> np.ndarray:
    depths = _integer_depths(counts)
    ints = np.round(counts).astype(np.int64)
    threshold = int(depths.min()) if depth is None else depth
    if threshold < 1:
        raise DataError(f"rarefy: sample {int(depths.argmin()) + 1} has depth < 1")
    shallow = np.flatnonzero(depths < threshold)
    if shallow.size:
        logger.warning(
            f"rarefy: {shallow.size} sample(s) below depth {threshold} kept unsubsampled"
        )
    rng = np.random.default_rng(seed)
    rows = [
        row if total < threshold else rng.multivariate_hypergeometric(row, threshold)
        for row, total in zip(ints, depths)
    ]
    return np.vstack(rows).astype(float)


def normalize(table: OtuTable, method: Normalization, pseudo_fallback: bool = False) -> OtuTable:
    """Normalize every sample.

    ``pseudo_fallback`` lets CLR substitute a pseudo count of 1 for zeros (the clr+none
    combination); without it CLR refuses non-positive entries.
    """
    counts = table.counts
    if isinstance(method, TSS):
        out = counts / _row_totals(counts)
    elif isinstance(method, COM):
        totals = _row_totals(counts)
        out = counts / totals * (totals.min() if method.depth is None else method.depth)
    elif isinstance(method, CSS):
        out = _css(counts, method.quantile, method.reference)
    elif isinstance(method, Rarefy):
        out = _rarefy(counts, method.seed, method.depth)
    elif isinstance(method, CLR):
        if (counts <= 0).any():
            if not pseudo_fallback or (counts < 0).any():
                raise DataError("clr needs strictly positive entries; replace zeros first")
            logger.warning("clr on a table with zeros: substituting a pseudo count of 1")
            counts = np.where(counts == 0, 1.0, counts)
        out = np.asarray(clr(counts), dtype=float).reshape(counts.shape)
    else:
        raise DataError(f"unknown normalization {method!r}")
    return table.with_counts(out, transform=method.name)


def apply_spec(table: OtuTable, spec: PreprocessSpec) -> OtuTable:
    """Run a full NM pipeline on a raw count table.

    Zero replacement runs first, except with rarefy, which needs integer counts and so
    subsamples first and replaces zeros in the rarefied table.
    """
    if isinstance(spec.norm, Rarefy):
        return replace_zeros(normalize(table, spec.norm), spec.zero)
    zeroed = replace_zeros(table, spec.zero)
    return normalize(zeroed, spec.norm, pseudo_fallback=isinstance(spec.zero, NoReplacement))


def fit_spec(table: OtuTable, spec: PreprocessSpec) -> PreprocessSpec:
    """Freeze the cross-sample references of ``spec`` on ``table``.

    ``apply_spec(table, fit_spec(table, spec))`` equals ``apply_spec(table, spec)``;
    applying the fitted spec to other rows reuses the references unchanged.
    """
    norm = spec.norm
    if isinstance(norm, Rarefy):
        depth = int(_integer_depths(table.counts).min())
        if depth < 1:
            raise DataError(f"rarefy: fit table has a sample of depth {depth}")
        return replace(spec, norm=replace(norm, depth=depth))
    if isinstance(norm, (COM, CSS)):
        zeroed = replace_zeros(table, spec.zero).counts
        if isinstance(norm, COM):
            depth = float(_row_totals(zeroed).min())
            return replace(spec, norm=replace(norm, depth=depth))
        reference = float(np.median(_css_factors(zeroed, norm.quantile)))
        return replace(spec, norm=replace(norm, reference=reference))
    return spec


def with_seed(spec: PreprocessSpec, seed: int) -> PreprocessSpec:
    if isinstance(spec.norm, Rarefy):
        return replace(spec, norm=replace(spec.norm, seed=seed))
    return spec


class EnvScaler(str, Enum):
    """Scaling methods for environmental predictors, in canonical order."""

    STANDARDIZE = "standardize"
    MINMAX = "minmax"
    MAXABS = "maxabs"
    ROBUST = "robust"
    QUANTILE_NORMAL = "quantile"
    UNIT_NORM = "unitnorm"

    @classmethod
    def parse(cls, value: Union[str, "EnvScaler"]) -> "EnvScaler":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        aliases = {
            "quantilenormal": "quantile",
            "unitnormal": "unitnorm",
            "standard": "standardize",
        }
        key = aliases.get(key, key)
        for scaler in cls:
            if scaler.value == key:
                return scaler
        raise DataError(f"unknown environmental scaler: {value!r}")


def _scaler(method: EnvScaler, n_fit: int):
    if method is EnvScaler.STANDARDIZE:
        return preprocessing.StandardScaler()
    if method is EnvScaler.MINMAX:
        return preprocessing.MinMaxScaler()
    if method is EnvScaler.MAXABS:
        return preprocessing.MaxAbsScaler()
    if method is EnvScaler.ROBUST:
        return preprocessing.RobustScaler()
    if method is EnvScaler.QUANTILE_NORMAL:
        return preprocessing.QuantileTransformer(
            n_quantiles=min(1000, n_fit), output_distribution="normal", random_state=0
        )
    return preprocessing.Normalizer(norm="l2")


def _degenerate(env: EnvTable, mask: np.ndarray, what: str, fallback: str) -> None:
    if mask.any():
        names = [env.feature_names[j] for j in np.flatnonzero(mask)]
        logger.warning(f"{what} for feature(s) {', '.join(names)}: {fallback}")


def scale_env(env: EnvTable, method: Union[str, EnvScaler], fit_rows: Iterable[int]) -> EnvTable:
    """Scale environmental features with statistics from ``fit_rows`` only.

    Standardize and minmax map a feature with no spread on the fit rows to 0; maxabs
    and robust divide it by 1.
    """
    method = EnvScaler.parse(method)
    fit_rows = np.asarray(list(fit_rows), dtype=int)
    if fit_rows.size == 0:
        raise DataError("scale_env needs at least one fit row")
    X = env.values
    F = X[fit_rows]

    out = _scaler(method, fit_rows.size).fit(F).transform(X)
    if method in (EnvScaler.STANDARDIZE, EnvScaler.MINMAX):
        flat = F.max(axis=0) == F.min(axis=0)
        what = "zero variance" if method is EnvScaler.STANDARDIZE else "zero range"
        _degenerate(env, flat, what, "mapped to 0")
        out[:, flat] = 0.0
    elif method is EnvScaler.MAXABS:
        _degenerate(env, np.abs(F).max(axis=0) == 0, "zero maximum", "divisor 1")
    elif method is EnvScaler.ROBUST:
        iqr = np.percentile(F, 75, axis=0) - np.percentile(F, 25, axis=0)
        _degenerate(env, iqr == 0, "zero IQR", "divisor 1")
    return replace(env, values=np.asarray(out, dtype=float))
