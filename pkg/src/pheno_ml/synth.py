"""Synthetic datasets with a planted signal, for desk-scale runs of the whole pipeline."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd

from .data import (
    DISEASE_RESPONSES,
    METADATA_COLUMNS,
    BinaryLabels,
    EnvGroup,
    EnvTable,
    OtuTable,
    ResponseSet,
    TaxonomicLevel,
)
from .errors import DataError

logger = logging.getLogger(__name__)

VARIETIES = ("V1", "V2", "V3", "V4")
STATES = ("MN", "ND")
PLANTED_RESPONSE = "Scab"
NB_DISPERSION = 2.0

ENV_FEATURES: Dict[EnvGroup, tuple] = {
    EnvGroup.SOIL: ("pH", "OM", "P", "K", "Ca", "Mg", "S", "Zn", "Mn", "Cu", "Fe", "B"),
    EnvGroup.DS: ("DS_Scab", "DS_Scabpit", "DS_Scabsuper", "DS_Black_Scurf"),
    EnvGroup.ALPHA: (
        "Observed",
        "Chao1",
        "ACE",
        "Shannon",
        "Simpson",
        "InvSimpson",
        "Fisher",
        "Pielou",
        "Goods",
    ),
}


@dataclass
class SynthData:
    table: OtuTable
    labels: BinaryLabels
    metadata: ResponseSet
    signal_otus: List[str]


def synth_generate(
    n: int = 200,
    p: int = 40,
    n_signal: int = 5,
    effect: float = 5.0,
    imbalance: float = 0.5,
    seed: int = 0,
) -> SynthData:
    """Negative-binomial counts where ``n_signal`` OTUs shift by (1 + effect) under label 1.

    ``imbalance`` is the probability of label 1. Varieties cycle over four names, and the
    labels are planted in the Scab response (positive severity exactly for label 1).
    """
    if n < 2 or p < 1:
        raise DataError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    if not 0 <= n_signal <= p:
        raise DataError(f"n_signal must be in 0..{p}, got {n_signal}")
    if effect < 0:
        raise DataError(f"effect must be non-negative, got {effect}")
    if not 0 < imbalance < 1:
        raise DataError(f"imbalance must be in (0, 1), got {imbalance}")

    rng = np.random.default_rng(seed)
    y = (rng.uniform(size=n) < imbalance).astype(int)
    base = rng.lognormal(mean=3.0, sigma=1.0, size=p)
    signal = np.sort(rng.choice(p, size=n_signal, replace=False))
    mu = np.tile(base, (n, 1))
    mu[np.ix_(y == 1, signal)] *= 1.0 + effect
    counts = rng.negative_binomial(NB_DISPERSION, NB_DISPERSION / (NB_DISPERSION + mu))

    empty = np.flatnonzero(counts.sum(axis=1) == 0)
    counts[empty, int(np.argmax(base))] = 1

    width = len(str(n))
    sample_ids = tuple(f"S{i + 1:0{width}d}" for i in range(n))
    otu_names = tuple(f"OTU_{j + 1:0{len(str(p))}d}" for j in range(p))
    varieties = tuple(VARIETIES[i % len(VARIETIES)] for i in range(n))
    table = OtuTable(
        sample_ids=sample_ids,
        otu_names=otu_names,
        counts=counts,
        level=TaxonomicLevel.GENUS,
        varieties=varieties,
    )

    values = {
        "Yield_Meter": rng.gamma(20.0, 0.5, size=n),
        "Yield_Plant": rng.gamma(10.0, 0.2, size=n),
    }
    for name in DISEASE_RESPONSES:
        if name == PLANTED_RESPONSE:
            values[name] = y * rng.uniform(0.05, 0.5, size=n)
        else:
            values[name] = (rng.uniform(size=n) < 0.3) * rng.uniform(0.05, 0.5, size=n)
    metadata = ResponseSet(
        sample_ids=sample_ids,
        varieties=varieties,
        values=values,
        states=tuple(STATES[i % len(STATES)] for i in range(n)),
    )
    return SynthData(
        table=table,
        labels=BinaryLabels(PLANTED_RESPONSE, y),
        metadata=metadata,
        signal_otus=[otu_names[j] for j in signal],
    )


def synth_levels(table: OtuTable) -> Dict[TaxonomicLevel, OtuTable]:
    """Tables at all five levels, collapsing the Genus table into nested coarser groups.

    Each step up halves the number of groups: Genus column j belongs to group
    j // 2**(5 - level) at a coarser level, and group counts are member sums.
    """
    levels: Dict[TaxonomicLevel, OtuTable] = {}
    for level in TaxonomicLevel:
        size = 2 ** (TaxonomicLevel.GENUS - level)
        n_groups = math.ceil(table.p / size)
        if level is TaxonomicLevel.GENUS:
            counts = table.counts
            names = table.otu_names
        else:
            group = np.arange(table.p) // size
            counts = np.zeros((table.n, n_groups))
            np.add.at(counts.T, group, table.counts.T)
            names = tuple(f"{level.label}_{g + 1:02d}" for g in range(n_groups))
        levels[level] = OtuTable(
            sample_ids=table.sample_ids,
            otu_names=names,
            counts=counts,
            level=level,
            varieties=table.varieties,
        )
    return levels


def synth_env(
    labels: BinaryLabels, sample_ids: tuple, shift: float = 0.5, seed: int = 0
) -> Dict[EnvGroup, EnvTable]:
    """Gaussian Soil, DS and Alpha blocks; every feature moves by ``shift`` under label 1."""
    out = {}
    for k, group in enumerate(EnvGroup):
        rng = np.random.default_rng([seed, 7, k])
        names = ENV_FEATURES[group]
        values = rng.normal(size=(len(sample_ids), len(names))) + shift * labels.labels[:, None]
        out[group] = EnvTable(
            sample_ids=tuple(sample_ids), feature_names=names, values=values, group=group
        )
    return out


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, encoding="utf-8")


def write_synth(
    out_dir: Union[str, Path],
    n: int = 200,
    p: int = 40,
    n_signal: int = 5,
    effect: float = 5.0,
    imbalance: float = 0.5,
    seed: int = 0,
) -> Path:
    """Write OTU tables per level, metadata, environmental tables and a run.cfg.

    Returns the path of the run config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = synth_generate(n, p, n_signal, effect, imbalance, seed)

    lines = [
        "# synthetic run; paths are relative to this file",
        f"# planted signal OTUs: {', '.join(data.signal_otus)}",
        "metadata = metadata.csv",
        f"response = {PLANTED_RESPONSE}",
        "predictors = ALL-OTU",
        "model = rf",
        f"seed = {seed}",
        "out = results",
        "filter.min_prevalence = 1",
        "split.folds = 5",
        "rf.n_estimators = 50",
        "rf.min_samples_split = 8",
        "rf.min_samples_leaf = 3",
        "rf.max_depth = 80",
        "rf.criterion = gini",
        "augment.target = 150",
        "bnn.chain = 200",
        "bnn.leapfrog = 20",
    ]
    for level, table in synth_levels(data.table).items():
        name = f"otu_{level.label}.csv"
        _write_csv(out_dir / name, table.to_frame())
        lines.append(f"otu.{level.label} = {name}")

    meta = data.metadata
    frame = pd.DataFrame(
        {"sample_id": meta.sample_ids, "variety": meta.varieties, "state": meta.states}
    )
    for name, values in meta.values.items():
        frame[name] = np.round(values, 4)
    _write_csv(out_dir / "metadata.csv", frame[list(METADATA_COLUMNS)])

    for group, env in synth_env(data.labels, meta.sample_ids, seed=seed).items():
        name = f"env_{group.value}.csv"
        env_frame = pd.DataFrame(env.values, columns=list(env.feature_names))
        env_frame.insert(0, "sample_id", env.sample_ids)
        _write_csv(out_dir / name, env_frame.round(6))
        lines.append(f"env.{group.value} = {name}")

    config = out_dir / "run.cfg"
    config.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"wrote synthetic dataset ({n} samples, {p} OTUs) to {out_dir}")
    return config
