"""Statistical outlier removal: flag points whose neighborhoods are sparse.

For every point, the mean distance to its k nearest neighbors is computed;
points whose mean distance exceeds the global mean by more than ``sigma``
standard deviations are labeled outliers. One-sided by design: an unusually
DENSE neighborhood is signal, not noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Label, NeighborIndex, PointCloud
from .errors import InsufficientNeighbors, LengthMismatch, OutOfRange


@dataclass(frozen=True)
class SorParams:
    """k = neighbor count, sigma = standard-deviation multiplier."""

    k: int = 20
    sigma: float = 1.2

    def __post_init__(self):
        if self.k < 1:
            raise OutOfRange(f"sor k must be >= 1, got {self.k}")
        if not self.sigma > 0:
            raise OutOfRange(f"sor sigma must be > 0, got {self.sigma}")


def mean_knn_distances(cloud: PointCloud, k: int, workers: int = 1) -> np.ndarray:
    """Per point, the mean distance to its k nearest other points."""
    index = NeighborIndex(cloud)
    return index.knn_distances_excluding_self(k, workers=workers).mean(axis=1)


def statistical_outlier_removal(
    cloud: PointCloud, params: SorParams = SorParams(), workers: int = 1
) -> np.ndarray:
    """Label mask over the cloud: OUTLIER where d_i > mu + sigma*s, else UNLABELED.

    d_i is the mean distance from point i to its k nearest neighbors (self
    excluded); mu and s are the mean and population standard deviation of all
    d_i. The comparison is strict, so d_i exactly at the threshold is kept.
    """
    n = len(cloud)
    if n <= params.k:
        raise InsufficientNeighbors(
            f"statistical outlier removal with k={params.k} needs more than {params.k} points, got {n}"
        )
    d = mean_knn_distances(cloud, params.k, workers=workers)
    mu = d.mean()
    s = d.std()  # population std: every point contributes, no sampling here
    labels = np.full(n, int(Label.UNLABELED), dtype=np.uint8)
    labels[d > mu + params.sigma * s] = int(Label.OUTLIER)
    return labels


def apply_mask(cloud: PointCloud, mask: np.ndarray, keep) -> tuple[PointCloud, np.ndarray]:
    """Subcloud of points whose label is in ``keep``, plus new-to-old index map."""
    codes = np.asarray(mask)
    if codes.shape != (len(cloud),):
        raise LengthMismatch(
            f"mask has shape {codes.shape} for a cloud of {len(cloud)} points"
        )
    wanted = np.isin(codes, [int(v) for v in keep])
    index_map = np.flatnonzero(wanted)
    return cloud.select(index_map), index_map
