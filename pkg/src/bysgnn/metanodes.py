"""Aggregated series generation: per-category and global meta-node rows.

Node order is fixed for a run: POIs 0..N-1, categories N..N+K-1, then the
global node at index N+K.  Aggregation is summation over raw counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PoiMetadata
from .errors import ConfigurationError

GLOBAL_LABEL = "global"


@dataclass
class CategoryIndex:
    """Maps POIs to categories and defines the total node ordering."""
    n_pois: int
    categories: list[str]               # ordered, unique
    membership: np.ndarray              # (N,) category index per POI

    def __post_init__(self):
        self.membership = np.asarray(self.membership, dtype=np.intp)
        if self.membership.shape != (self.n_pois,):
            raise ConfigurationError("membership must cover every POI exactly once")
        if self.n_pois and (self.membership.min() < 0
                            or self.membership.max() >= len(self.categories)):
            raise ConfigurationError("membership references an unknown category")

    @classmethod
    def from_metadata(cls, metadata: list[PoiMetadata]) -> "CategoryIndex":
        categories = sorted({m.top_category for m in metadata})
        lookup = {name: i for i, name in enumerate(categories)}
        membership = np.array([lookup[m.top_category] for m in metadata], dtype=np.intp)
        return cls(n_pois=len(metadata), categories=categories, membership=membership)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_nodes(self) -> int:
        return self.n_pois + self.n_categories + 1

    def node_labels(self, poi_ids: list[str]) -> list[str]:
        if len(poi_ids) != self.n_pois:
            raise ConfigurationError("poi_ids length does not match index")
        return (list(poi_ids)
                + [f"category:{name}" for name in self.categories]
                + [GLOBAL_LABEL])

    def members_of(self, category_idx: int) -> np.ndarray:
        return np.flatnonzero(self.membership == category_idx)


@dataclass
class AugmentedSeries:
    """POI rows plus appended category-sum and global-sum rows."""
    values: np.ndarray  # (N + K + 1, T)
    index: CategoryIndex


def aggregate_by_category(x: np.ndarray, index: CategoryIndex) -> AugmentedSeries:
    """Append per-category sums and the all-POI sum to the POI rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != index.n_pois:
        raise ConfigurationError(
            f"expected {index.n_pois} POI rows, got shape {x.shape}")
    k = index.n_categories
    out = np.zeros((index.n_nodes, x.shape[1]))
    out[:index.n_pois] = x
    for c in range(k):
        out[index.n_pois + c] = x[index.members_of(c)].sum(axis=0)
    out[index.n_pois + k] = x.sum(axis=0)
    return AugmentedSeries(values=out, index=index)
