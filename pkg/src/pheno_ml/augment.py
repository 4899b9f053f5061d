"""Variety- and label-stratified Gaussian augmentation of a training partition."""

import logging
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

from .data import BinaryLabels, EnvTable, OtuTable
from .errors import DataError
from .ranking import largest_remainder

logger = logging.getLogger(__name__)

SYNTHETIC_SUFFIX = "~aug"


@dataclass(frozen=True)
class AugmentSpec:
    """Target size per label and the noise scale.

    Noise for OTU j has mean mu_j / noise_divisor and sd sigma_j / noise_divisor, with
    mu and sigma taken over the source sample's (variety, label) subset.
    """

    target_per_label: int = 400
    noise_divisor: float = 100.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.target_per_label < 1:
            raise DataError(f"target_per_label must be >= 1, got {self.target_per_label}")
        if self.noise_divisor <= 0:
            raise DataError(f"noise_divisor must be positive, got {self.noise_divisor}")
        if self.seed < 0:
            raise DataError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class SubsetStats:
    mean: np.ndarray
    sd: np.ndarray
    size: int

    @classmethod
    def of(cls, block: np.ndarray) -> "SubsetStats":
        if block.shape[0] < 1:
            raise DataError("cannot summarize an empty subset")
        # population sd: a single-sample subset gets sd 0
        return cls(mean=block.mean(axis=0), sd=block.std(axis=0), size=block.shape[0])


def augment_training(
    train: OtuTable, labels: BinaryLabels, spec: AugmentSpec
) -> Tuple[OtuTable, BinaryLabels]:
    """Top up every label below ``spec.target_per_label`` with noisy copies.

    Only the training partition goes in, so synthetic rows can only descend from
    training samples. Original rows come first and are never altered; synthetic rows
    follow, label 0 before label 1.

    Synthetic entries are clamped at 0 on every scale except clr, whose log-ratios
    are signed.
    """
    if len(labels) != train.n:
        raise DataError(f"{len(labels)} labels for {train.n} samples")
    y = labels.labels
    varieties = np.array(train.varieties, dtype=object)
    clamp = train.transform != "clr"

    blocks: List[np.ndarray] = []
    ids: List[str] = []
    sources: List[str] = []
    new_varieties: List[str] = []
    new_labels: List[int] = []

    for label in (0, 1):
        members = np.flatnonzero(y == label)
        deficit = spec.target_per_label - members.size
        if deficit <= 0:
            continue
        if members.size == 0:
            raise DataError(f"subset (label={label}) is empty; nothing to augment from")
        names = sorted(set(varieties[members]))
        sizes = np.array([(varieties[members] == v).sum() for v in names])
        quotas = largest_remainder(deficit, sizes)
        logger.debug(f"label {label}: {deficit} synthetic samples over {len(names)} varieties")

        for idx, (variety, quota) in enumerate(zip(names, quotas)):
            if quota == 0:
                continue
            subset = members[varieties[members] == variety]
            if subset.size == 0:
                raise DataError(f"subset (variety={variety!r}, label={label}) is empty")
            block = train.counts[subset]
            stats = SubsetStats.of(block)
            rng = np.random.default_rng([spec.seed, label, idx])
            picks = rng.integers(0, subset.size, size=quota)
            noise = rng.normal(
                stats.mean / spec.noise_divisor,
                stats.sd / spec.noise_divisor,
                size=(quota, train.p),
            )
            synthetic = block[picks] + noise
            if clamp:
                synthetic = np.maximum(synthetic, 0.0)
            blocks.append(synthetic)
            for pick in picks:
                source = train.sample_ids[subset[pick]]
                ids.append(f"{source}{SYNTHETIC_SUFFIX}{len(ids) + 1}")
                sources.append(source)
            new_varieties.extend([variety] * quota)
            new_labels.extend([label] * quota)

    if not blocks:
        return train, labels

    extra = replace(
        train,
        sample_ids=tuple(ids),
        counts=np.vstack(blocks),
        varieties=tuple(new_varieties),
        provenance=tuple(sources),
    )
    augmented = BinaryLabels(labels.response, np.concatenate([y, new_labels]))
    logger.info(f"augmented {train.n} training samples to {train.n + len(ids)}")
    return train.concat(extra), augmented


def inherit_env(env: EnvTable, table: OtuTable) -> EnvTable:
    """Environmental rows for ``table``; synthetic samples copy their source's values."""
    keys = [src or sid for sid, src in zip(table.sample_ids, table.provenance)]
    return replace(env.reorder(keys), sample_ids=table.sample_ids)
