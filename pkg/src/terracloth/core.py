"""Geometry primitives and exact nearest-neighbor search shared by all stages."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, InsufficientNeighbors, LengthMismatch, NonFiniteCoordinate


class Label(enum.IntEnum):
    """Per-point classification codes used in masks and in saved files."""

    UNLABELED = 0
    GROUND = 1
    NON_GROUND = 2
    OUTLIER = 7


# Written into file headers so saved classification columns are self-describing.
LABEL_COMMENT = "classification codes: 0=unlabeled 1=ground 2=non-ground 7=outlier"


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class PointCloud:
    """Immutable ordered collection of 3D points (meters, right-handed, z-up).

    Index i refers to the same point for the lifetime of the object; filter
    stages return label masks over these indices and never reorder or mutate
    the cloud. Optional per-point attributes (intensity, classification) ride
    along with the coordinates.
    """

    __slots__ = ("xyz", "intensity", "classification")

    def __init__(self, xyz, intensity=None, classification=None):
        pts = np.array(xyz, dtype=np.float64, copy=True, order="C")
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected an (N, 3) array of points, got shape {pts.shape}")
        finite = np.isfinite(pts).all(axis=1)
        if not finite.all():
            raise NonFiniteCoordinate(
                f"{int((~finite).sum())} of {len(pts)} points have non-finite coordinates"
            )
        self.xyz = _readonly(pts)
        self.intensity = None
        self.classification = None
        if intensity is not None:
            vals = np.array(intensity, dtype=np.float64, copy=True)
            if vals.shape != (len(pts),):
                raise LengthMismatch("intensity length does not match point count")
            self.intensity = _readonly(vals)
        if classification is not None:
            codes = np.array(classification, dtype=np.uint8, copy=True)
            if codes.shape != (len(pts),):
                raise LengthMismatch("classification length does not match point count")
            self.classification = _readonly(codes)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __repr__(self) -> str:
        attrs = [name for name in ("intensity", "classification") if getattr(self, name) is not None]
        extra = f" +{'+'.join(attrs)}" if attrs else ""
        return f"PointCloud({len(self)} points{extra})"

    def with_classification(self, labels: np.ndarray) -> "PointCloud":
        """New cloud with the same points and the given classification codes."""
        return PointCloud(self.xyz, intensity=self.intensity, classification=labels)

    def select(self, indices: np.ndarray) -> "PointCloud":
        """Subcloud at the given indices, attributes carried along."""
        return PointCloud(
            self.xyz[indices],
            intensity=None if self.intensity is None else self.intensity[indices],
            classification=None if self.classification is None else self.classification[indices],
        )


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box; mins[i] <= maxs[i] on every axis."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        if np.any(self.mins > self.maxs):
            raise ValueError("Aabb mins must not exceed maxs")

    def extent(self) -> np.ndarray:
        return self.maxs - self.mins

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.logical_and(p >= self.mins, p <= self.maxs).all(axis=1)


def bounding_box(cloud: PointCloud) -> Aabb:
    """Tight axis-aligned bounds of a non-empty cloud."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot bound an empty cloud")
    return Aabb(cloud.xyz.min(axis=0), cloud.xyz.max(axis=0))


class NeighborIndex:
    """Exact k-nearest-neighbor index over a point cloud.

    Queries are exact (never approximate) and distance ties are broken by
    ascending point index, so results are deterministic across platforms and
    runs. The index is immutable after construction and safe to query from
    many threads concurrently.
    """

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyCloud("cannot build a neighbor index over an empty cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.xyz)

    def knn(self, query, k: int, exclude_self: bool = False):
        """The k nearest cloud points to ``query``.

        Returns (indices, distances), sorted ascending by Euclidean distance
        with ties broken by ascending point index. With ``exclude_self`` one
        zero-distance hit (the query point itself, when it is a cloud point)
        is dropped before the k results are taken.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        n = len(self.cloud)
        needed = k + 1 if exclude_self else k
        if needed > n:
            raise InsufficientNeighbors(
                f"need {needed} points for k={k} (exclude_self={exclude_self}), cloud has {n}"
            )
        # Enlarge the candidate set until every point tied with the selection
        # boundary distance is included, so index tie-breaking is exact.
        kk = min(n, needed + 1)
        while True:
            dist, idx = self._tree.query(q, k=kk)
            dist = np.atleast_1d(dist)
            idx = np.atleast_1d(idx)
            if kk == n or dist[-1] > dist[needed - 1]:
                break
            kk = min(n, kk * 2)
        order = np.lexsort((idx, dist))
        dist = dist[order]
        idx = idx[order]
        if exclude_self and dist.size and dist[0] == 0.0:
            dist = dist[1:]
            idx = idx[1:]
        return idx[:k].copy(), dist[:k].copy()

    def radius(self, query, r: float):
        """All cloud points within distance r of ``query``, sorted like knn."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        idx = np.asarray(self._tree.query_ball_point(q, r), dtype=np.intp)
        if idx.size == 0:
            return idx, np.empty(0)
        dist = np.sqrt(((self.cloud.xyz[idx] - q) ** 2).sum(axis=1))
        order = np.lexsort((idx, dist))
        return idx[order], dist[order]

    def knn_distances_excluding_self(self, k: int, workers: int = 1) -> np.ndarray:
        """Per cloud point, distances to its k nearest *other* points.

        Row i excludes point i itself (by index, so coincident duplicates
        still count as neighbors). Rows are sorted ascending. Only distances
        are returned; the distance multiset is unaffected by how equidistant
        candidates are ordered, so no tie resolution is needed here.
        ``workers`` threads split the queries; results do not depend on it.
        """
        n = len(self.cloud)
        if n <= k:
            raise InsufficientNeighbors(f"k={k} requires at least {k + 1} points, cloud has {n}")
        dist, idx = self._tree.query(self.cloud.xyz, k=k + 1, workers=workers)
        rows = np.arange(n)
        self_mask = idx == rows[:, None]
        has_self = self_mask.any(axis=1)
        # Rows missing their own index are drowned in zero-distance duplicates;
        # dropping the last column is then equivalent.
        drop = np.where(has_self, self_mask.argmax(axis=1), k)
        keep = np.ones_like(dist, dtype=bool)
        keep[rows, drop] = False
        return dist[keep].reshape(n, k)
