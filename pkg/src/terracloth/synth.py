"""Synthetic forest scenes with exact ground truth, plus filter-quality metrics.

Scenes imitate the survey setting the pipeline targets: a terrain sheet
sampled at a fixed areal density, conifer-like crowns floating on trunks,
and a sprinkle of gross outliers. Every point carries a truth label, so a
filtering run can be scored exactly.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import Label, PointCloud
from .errors import InvalidSpec, LengthMismatch

GROUND_NOISE_SIGMA = 0.02
CROWN_JITTER_SIGMA = 0.05
CROWN_VERTICAL_RATIO = 1.3


@dataclass(frozen=True)
class Flat:
    """Horizontal plane at elevation z0."""

    z0: float = 0.0

    def height(self, x, y, extent):
        return np.full_like(np.asarray(x, dtype=float), self.z0)


@dataclass(frozen=True)
class Ramp:
    """Plane tilted along x: z = slope * x."""

    slope: float = 0.1

    def height(self, x, y, extent):
        return self.slope * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Ravine:
    """V-shaped valley of the given depth running along y at x = extent_x / 2.

    Elevation is 0 on the plateaus and -depth on the centerline; the walls
    span width/2 on each side.
    """

    depth: float = 40.0
    width: float = 56.0

    def __post_init__(self):
        if self.depth < 0:
            raise InvalidSpec("ravine depth must be >= 0")
        if self.width <= 0:
            raise InvalidSpec("ravine width must be > 0")

    def height(self, x, y, extent):
        off = np.abs(np.asarray(x, dtype=float) - extent[0] / 2.0)
        return -self.depth * np.clip(1.0 - off / (self.width / 2.0), 0.0, None)


@dataclass(frozen=True)
class GaussianHills:
    """Sum of `count` Gaussian bumps; centers are drawn from the scene seed."""

    count: int = 5
    amplitude: float = 8.0
    radius: float = 12.0

    def __post_init__(self):
        if self.count < 0:
            raise InvalidSpec("hill count must be >= 0")
        if self.amplitude < 0 or self.radius <= 0:
            raise InvalidSpec("hill amplitude must be >= 0 and radius > 0")


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to regenerate a scene bit for bit."""

    extent: tuple = (100.0, 100.0)
    ground: object = Flat(0.0)
    density: float = 1.0
    tree_count: int = 0
    trunk_height: tuple = (3.0, 8.0)
    crown_radius: tuple = (1.2, 2.5)
    crown_density: float = 20.0
    outlier_count: int = 0
    outlier_margin: float = 20.0
    seed: int = 0

    def __post_init__(self):
        ex, ey = self.extent
        if not (ex > 0 and ey > 0):
            raise InvalidSpec("extent must be positive in both axes")
        if self.density < 0:
            raise InvalidSpec("density must be >= 0")
        if self.tree_count < 0:
            raise InvalidSpec("tree_count must be >= 0")
        lo, hi = self.trunk_height
        if not (0 <= lo <= hi):
            raise InvalidSpec("trunk_height range must satisfy 0 <= lo <= hi")
        rlo, rhi = self.crown_radius
        if not (0 < rlo <= rhi):
            raise InvalidSpec("crown_radius range must satisfy 0 < lo <= hi")
        if self.crown_density < 0:
            raise InvalidSpec("crown_density must be >= 0")
        if self.outlier_count < 0:
            raise InvalidSpec("outlier_count must be >= 0")
        if self.outlier_margin < 0:
            raise InvalidSpec("outlier_margin must be >= 0")
        if self.tree_count > 0 and 2 * rhi >= min(ex, ey):
            raise InvalidSpec("crown diameter exceeds the scene extent")


@dataclass(frozen=True)
class SceneTruth:
    cloud: PointCloud
    truth: np.ndarray  # uint8 labels per point

    def count(self, label):
        return int((self.truth == int(label)).sum())


def crown_point_budget(radius, crown_density):
    """Points allotted to one crown shell: density times the nominal
    ellipsoid area 4*pi*r*rv."""
    rv = CROWN_VERTICAL_RATIO * radius
    return max(1, int(round(crown_density * 4.0 * math.pi * radius * rv)))


def _height_function(spec, rng):
    model = spec.ground
    if isinstance(model, GaussianHills):
        centers = rng.uniform([0.0, 0.0], list(spec.extent), size=(model.count, 2))

        def height(x, y, extent=None):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            z = np.zeros_like(x)
            for cx, cy in centers:
                d2 = (x - cx) ** 2 + (y - cy) ** 2
                z += model.amplitude * np.exp(-d2 / (2.0 * model.radius**2))
            return z

        return height
    if not hasattr(model, "height"):
        raise InvalidSpec(f"unknown ground model {model!r}")
    return lambda x, y: model.height(x, y, spec.extent)


def _sample_sphere(rng, n):
    u = rng.normal(size=(n, 3))
    norm = np.sqrt((u**2).sum(axis=1, keepdims=True))
    norm[norm == 0] = 1.0
    return u / norm


def generate_scene(spec):
    """Build the scene: ground sheet, then trees, then outliers, in that order.

    The draw order from the single seeded stream is fixed, so one seed pins
    the whole cloud. Ground points get N(0, 0.02 m) vertical noise; crowns
    are ellipsoidal shells (vertical semi-axis 1.3x the horizontal) sitting
    on top of their trunks; outliers are uniform in the structure bounding
    box inflated by `outlier_margin` on every side.
    """
    rng = np.random.default_rng(spec.seed)
    ground_height = _height_function(spec, rng)
    ex, ey = spec.extent

    n_ground = int(round(spec.density * ex * ey))
    gx = rng.uniform(0.0, ex, n_ground)
    gy = rng.uniform(0.0, ey, n_ground)
    gz = ground_height(gx, gy) + rng.normal(0.0, GROUND_NOISE_SIGMA, n_ground)
    chunks = [np.column_stack([gx, gy, gz])]
    labels = [np.full(n_ground, int(Label.GROUND), dtype=np.uint8)]

    for _ in range(spec.tree_count):
        radius = rng.uniform(*spec.crown_radius)
        trunk = rng.uniform(*spec.trunk_height)
        for _ in range(10000):
            tx = rng.uniform(0.0, ex)
            ty = rng.uniform(0.0, ey)
            if radius <= tx <= ex - radius and radius <= ty <= ey - radius:
                break
        else:
            raise InvalidSpec("could not place a tree inside the extent")
        rv = CROWN_VERTICAL_RATIO * radius
        center = np.array([tx, ty, float(ground_height(tx, ty)) + trunk + rv])
        n = crown_point_budget(radius, spec.crown_density)
        u = _sample_sphere(rng, n)
        jitter = rng.normal(0.0, CROWN_JITTER_SIGMA, (n, 1))
        pts = center + u * [radius, radius, rv] + u * jitter
        chunks.append(pts)
        labels.append(np.full(n, int(Label.NON_GROUND), dtype=np.uint8))

    if spec.outlier_count:
        structure = np.vstack(chunks)
        if structure.size:
            lo = structure.min(axis=0) - spec.outlier_margin
            hi = structure.max(axis=0) + spec.outlier_margin
        else:
            lo = np.array([-spec.outlier_margin] * 3)
            hi = np.array([ex, ey, 0.0]) + spec.outlier_margin
        chunks.append(rng.uniform(lo, hi, size=(spec.outlier_count, 3)))
        labels.append(np.full(spec.outlier_count, int(Label.OUTLIER), dtype=np.uint8))

    xyz = np.vstack(chunks)
    truth = np.concatenate(labels)
    return SceneTruth(cloud=PointCloud(xyz), truth=truth)


@dataclass(frozen=True)
class ErrorMetrics:
    """Ground-filter quality on truth-labeled points, outliers excluded.

    type1: true ground not labeled Ground.
    type2: true non-ground labeled Ground.
    total: misclassified fraction of all non-outlier points.
    """

    type1: float
    type2: float
    total: float
    ground_total: int
    non_ground_total: int

    def as_keyvalues(self):
        return "\n".join(
            [
                f"type1={self.type1:.6f}",
                f"type2={self.type2:.6f}",
                f"total={self.total:.6f}",
                f"ground_total={self.ground_total}",
                f"non_ground_total={self.non_ground_total}",
            ]
        )


def evaluate(truth, predicted):
    """Score a predicted label mask against scene truth.

    Points whose truth is Outlier are left out of every denominator; a
    predicted label other than Ground counts against a true ground point
    whatever that label is.
    """
    predicted = np.asarray(predicted)
    if len(predicted) != len(truth.truth):
        raise LengthMismatch(
            f"predicted mask has {len(predicted)} entries for {len(truth.truth)} points"
        )
    is_ground = truth.truth == int(Label.GROUND)
    is_non_ground = truth.truth == int(Label.NON_GROUND)
    pred_ground = predicted == int(Label.GROUND)

    n_g = int(is_ground.sum())
    n_ng = int(is_non_ground.sum())
    miss_g = int((is_ground & ~pred_ground).sum())
    miss_ng = int((is_non_ground & pred_ground).sum())

    type1 = miss_g / n_g if n_g else 0.0
    type2 = miss_ng / n_ng if n_ng else 0.0
    total = (miss_g + miss_ng) / (n_g + n_ng) if (n_g + n_ng) else 0.0
    return ErrorMetrics(type1, type2, total, n_g, n_ng)
