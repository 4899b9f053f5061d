"""Per-class association networks and degree-difference comparison.

Networks come from a rank-based latent correlation estimate: Kendall's tau, mapped
through sin(pi*tau/2), projected to the nearest positive definite correlation matrix
and inverted with a ridge. Partial correlations at or above ``threshold`` in absolute
value are edges.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from .errors import DataError
from .ranking import rank_desc, top_count

logger = logging.getLogger(__name__)

MIN_SAMPLES = 4


@dataclass(frozen=True, eq=False)
class AssociationNetwork:
    nodes: Tuple[str, ...]
    partial: np.ndarray
    threshold: float = 0.2

    @classmethod
    def from_edges(
        cls, nodes: Sequence[str], edges: Iterable[Tuple[int, int]], weight: float = 0.5
    ) -> "AssociationNetwork":
        """Build a network directly from an edge list (every edge gets ``weight``)."""
        p = len(nodes)
        partial = np.eye(p)
        for i, j in edges:
            if i == j:
                raise DataError(f"self-edge on node {nodes[i]!r}")
            partial[i, j] = partial[j, i] = weight
        return cls(tuple(nodes), partial, threshold=min(abs(weight), 0.2))

    @property
    def p(self) -> int:
        return len(self.nodes)

    @property
    def adjacency(self) -> np.ndarray:
        adj = np.abs(self.partial) >= self.threshold
        np.fill_diagonal(adj, False)
        return adj

    @property
    def edges(self) -> List[Tuple[int, int]]:
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(rows.tolist(), cols.tolist()))

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(int)

    @property
    def distance(self) -> np.ndarray:
        """Signed distance sqrt(2(1 - rho)), 0 for rho = 1 and 2 for rho = -1."""
        return signed_distance(self.partial)

    @property
    def similarity(self) -> np.ndarray:
        return 1.0 - self.distance / 2.0


def signed_distance(rho: np.ndarray) -> np.ndarray:
    return np.sqrt(np.clip(2.0 * (1.0 - np.asarray(rho, dtype=float)), 0.0, 4.0))


def kendall_tau(X: np.ndarray) -> np.ndarray:
    """Kendall tau-b between all column pairs.

    Each row of the sign matrix is one sample pair; tied pairs contribute zero, so
    S^T S holds concordant minus discordant counts off the diagonal and the untied pair
    counts on it.
    """
    X = np.asarray(X, dtype=float)
    a, b = np.triu_indices(X.shape[0], k=1)
    signs = np.sign(X[a] - X[b]).astype(np.float32)
    counts = (signs.T @ signs).astype(float)
    untied = np.sqrt(np.diag(counts))
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = counts / np.outer(untied, untied)
    tau[~np.isfinite(tau)] = 0.0
    np.fill_diagonal(tau, 1.0)
    return np.clip(tau, -1.0, 1.0)


def nearest_correlation(R: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and rescale back to a unit diagonal."""
    R = (R + R.T) / 2.0
    values, vectors = linalg.eigh(R)
    if values.min() >= floor:
        return R
    projected = (vectors * np.maximum(values, floor)) @ vectors.T
    scale = 1.0 / np.sqrt(np.diag(projected))
    projected = projected * np.outer(scale, scale)
    np.fill_diagonal(projected, 1.0)
    return projected


def infer_network(
    X: np.ndarray,
    names: Optional[Sequence[str]] = None,
    threshold: float = 0.2,
    ridge: float = 0.1,
) -> AssociationNetwork:
    """Estimate the partial-correlation network of the columns of ``X``.

    Constant columns are left out of the estimate and stay in the network as isolated
    nodes, so networks inferred on different subsets of samples share a node set.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {X.shape}")
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"V{j + 1}" for j in range(p))
    if len(names) != p:
        raise DataError(f"{len(names)} names for {p} columns")
    if n < MIN_SAMPLES:
        raise DataError(f"insufficient samples: need n >= {MIN_SAMPLES}, got {n}")
    if ridge < 0:
        raise DataError(f"ridge must be non-negative, got {ridge}")

    varying = np.flatnonzero(np.ptp(X, axis=0) > 0)
    if varying.size < p:
        dropped = [names[j] for j in range(p) if j not in set(varying.tolist())]
        logger.warning(f"constant column(s) left out of network inference: {', '.join(dropped)}")

    partial = np.eye(p)
    if varying.size >= 2:
        tau = kendall_tau(X[:, varying])
        latent = nearest_correlation(np.sin(np.pi * tau / 2.0))
        try:
            omega = linalg.inv(latent + ridge * np.eye(varying.size))
        except linalg.LinAlgError as e:
            raise DataError(f"singular latent correlation matrix (ridge={ridge}): {e}") from e
        if not np.isfinite(omega).all():
            raise DataError(f"singular latent correlation matrix (ridge={ridge})")
        d = np.sqrt(np.diag(omega))
        rho = np.clip(-omega / np.outer(d, d), -1.0, 1.0)
        np.fill_diagonal(rho, 1.0)
        partial[np.ix_(varying, varying)] = rho
    return AssociationNetwork(names, partial, threshold)


@dataclass(frozen=True, eq=False)
class NetworkComparison:
    nodes: Tuple[str, ...]
    degree0: np.ndarray
    degree1: np.ndarray

    @property
    def difference(self) -> np.ndarray:
        return np.abs(self.degree0 - self.degree1)

    @property
    def order(self) -> List[int]:
        """Node indices by descending degree difference, ties by name."""
        return rank_desc(self.difference, self.nodes)

    def rows(self) -> List[Tuple[str, int, int, int]]:
        diff = self.difference
        return [
            (self.nodes[j], int(self.degree0[j]), int(self.degree1[j]), int(diff[j]))
            for j in self.order
        ]

    def difference_of(self, node: str) -> int:
        return int(self.difference[self.nodes.index(node)])


def compare_networks(net0: AssociationNetwork, net1: AssociationNetwork) -> NetworkComparison:
    if net0.nodes != net1.nodes:
        if set(net0.nodes) != set(net1.nodes):
            raise DataError("cannot compare networks with different node sets")
        raise DataError("cannot compare networks whose nodes are in different orders")
    return NetworkComparison(net0.nodes, net0.degrees, net1.degrees)


def select_by_degree_diff(cmp: NetworkComparison, fraction: float = 0.3) -> List[str]:
    """Names of the top ceil(fraction * p) nodes by degree difference, in rank order."""
    k = top_count(fraction, len(cmp.nodes))
    return [cmp.nodes[j] for j in cmp.order[:k]]


def class_networks(
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    threshold: float = 0.2,
    ridge: float = 0.1,
    n_jobs: int = 1,
) -> Tuple[AssociationNetwork, AssociationNetwork]:
    """Infer the label-0 and label-1 networks over a shared node set."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    nets = Parallel(n_jobs=n_jobs)(
        delayed(infer_network)(X[y == label], names, threshold, ridge) for label in (0, 1)
    )
    return nets[0], nets[1]
