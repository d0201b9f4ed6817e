"""Ground extraction by cloth simulation.

The cloud is turned upside down and a rectangular grid of cloth particles is
dropped onto it from above. Each iteration applies gravity (Verlet, vertical
motion only), clamps particles against the terrain measurement below them
(freezing the ones that touch), and relaxes internal spring constraints
between 4-connected neighbors. After the cloth settles, points close to the
cloth surface are ground; the rest are vegetation and structures.

All steps are double-buffered array operations, so results are deterministic
and independent of traversal order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Label, PointCloud, bounding_box
from .errors import DegenerateExtent, EmptyCloud, OutOfRange, PointOutsideCloth

# Correction fraction of a constraint: each pass moves a movable particle
# half the height difference toward its neighbor (split when both move).
_CORRECTION_FRACTION = 0.5


@dataclass(frozen=True)
class CsfParams:
    """Tuning knobs of the cloth simulation.

    grid_resolution   particle spacing in meters (>= 0.1 unless allow_fine_grid)
    time_step         Verlet time step; displacement per step is gravity*time_step^2
    rigidness         constraint passes per iteration, 1..3; higher = stiffer cloth
    steep_slope_fit   run the slope post-processing after the simulation settles
    class_threshold   point-to-cloth distance below which a point is ground
    max_iterations    simulation iteration cap
    gravity           downward acceleration constant
    height_convergence  stop early when no particle moved more than this
    slope_threshold   override for the slope post-processing tolerance
                      (defaults to class_threshold when unset)
    allow_fine_grid   expert flag lifting the 0.1 m floor on grid_resolution
    """

    grid_resolution: float = 0.1
    time_step: float = 0.65
    rigidness: int = 2
    steep_slope_fit: bool = True
    class_threshold: float = 0.6
    max_iterations: int = 500
    gravity: float = 0.2
    height_convergence: float = 0.00005
    slope_threshold: float | None = None
    allow_fine_grid: bool = False

    def __post_init__(self):
        if not self.grid_resolution > 0:
            raise OutOfRange(f"grid_resolution must be > 0, got {self.grid_resolution}")
        if self.grid_resolution < 0.1 and not self.allow_fine_grid:
            raise OutOfRange(
                f"grid_resolution {self.grid_resolution} is below the 0.1 m floor "
                "(set allow_fine_grid to override)"
            )
        if not self.time_step > 0:
            raise OutOfRange(f"time_step must be > 0, got {self.time_step}")
        if self.rigidness not in (1, 2, 3):
            raise OutOfRange(f"rigidness must be 1, 2 or 3, got {self.rigidness}")
        if not self.class_threshold > 0:
            raise OutOfRange(f"class_threshold must be > 0, got {self.class_threshold}")
        if self.max_iterations < 0:
            raise OutOfRange(f"max_iterations must be >= 0, got {self.max_iterations}")
        if not self.gravity > 0:
            raise OutOfRange(f"gravity must be > 0, got {self.gravity}")
        if not self.height_convergence > 0:
            raise OutOfRange(f"height_convergence must be > 0, got {self.height_convergence}")
        if self.slope_threshold is not None and not self.slope_threshold > 0:
            raise OutOfRange(f"slope_threshold must be > 0, got {self.slope_threshold}")

    @property
    def effective_slope_threshold(self) -> float:
        return self.class_threshold if self.slope_threshold is None else self.slope_threshold


@dataclass
class ClothState:
    """Particle grid state, all heights in the inverted (z-negated) frame.

    Particle (r, c) sits at xy (origin[0] + c*spacing, origin[1] + r*spacing).
    ``ihv`` is the intersection height value: the inverted z of the terrain
    measurement nearest (in xy) to the particle, i.e. the floor it may not
    fall through. Unmovable particles have landed: height == ihv, forever.
    """

    rows: int
    cols: int
    origin: np.ndarray
    spacing: float
    height: np.ndarray
    prev_height: np.ndarray
    movable: np.ndarray
    ihv: np.ndarray
    iterations_used: int = 0
    max_last_displacement: float = math.inf

    def particle_positions(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) grids of particle x and y coordinates."""
        x = self.origin[0] + np.arange(self.cols) * self.spacing
        y = self.origin[1] + np.arange(self.rows) * self.spacing
        return np.meshgrid(x, y)

    def to_point_cloud(self) -> PointCloud:
        """Particles as a cloud in the original (upright) frame, for debugging.

        The classification column marks landed particles with 1 (they sit on a
        terrain measurement) and still-moving ones with 0.
        """
        px, py = self.particle_positions()
        return PointCloud(
            np.column_stack([px.ravel(), py.ravel(), -self.height.ravel()]),
            classification=np.where(self.movable.ravel(), 0, 1).astype(np.uint8),
        )


@dataclass(frozen=True)
class CsfResult:
    """Ground/non-ground labels plus the settled cloth that produced them."""

    labels: np.ndarray
    cloth: ClothState
    iterations_used: int
    max_last_displacement: float


def invert_cloud(cloud: PointCloud) -> PointCloud:
    """Flip the cloud upside down: (x, y, z) -> (x, y, -z), order preserved."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot invert an empty cloud")
    flipped = cloud.xyz.copy()
    flipped[:, 2] = -flipped[:, 2]
    return PointCloud(flipped, intensity=cloud.intensity, classification=cloud.classification)


def init_cloth(inverted: PointCloud, params: CsfParams, workers: int = 1) -> ClothState:
    """Build the particle grid over the inverted cloud, everything airborne.

    The grid covers the xy bounding box plus a one-spacing margin on every
    side, and all particles start a height h0 = 0.05 * z_extent + spacing
    above the highest inverted point.
    """
    box = bounding_box(inverted)
    ext = box.extent()
    if ext[0] == 0.0 or ext[1] == 0.0:
        raise DegenerateExtent(
            f"cloud xy extent {ext[0]} x {ext[1]} m cannot support a cloth grid"
        )
    gr = params.grid_resolution
    cols = math.ceil(ext[0] / gr) + 1 + 2
    rows = math.ceil(ext[1] / gr) + 1 + 2
    start = box.maxs[2] + 0.05 * ext[2] + gr
    height = np.full((rows, cols), start, dtype=np.float64)
    cloth = ClothState(
        rows=rows,
        cols=cols,
        origin=np.array([box.mins[0] - gr, box.mins[1] - gr]),
        spacing=gr,
        height=height,
        prev_height=height.copy(),
        movable=np.ones((rows, cols), dtype=bool),
        ihv=np.empty((rows, cols), dtype=np.float64),
    )
    compute_ihv(inverted, cloth, workers=workers)
    return cloth


def compute_ihv(inverted: PointCloud, cloth: ClothState, workers: int = 1) -> ClothState:
    """Fill each particle's ihv with the inverted z of its xy-nearest point.

    The search is global (a particle far from any point still finds the
    nearest one) and ties are broken by lowest point index. Near-ties within
    a relative 1e-12 are resolved exactly by re-measuring the candidates, so
    the result matches an exhaustive scan bit for bit.
    """
    xy = np.ascontiguousarray(inverted.xyz[:, :2])
    z = inverted.xyz[:, 2]
    px, py = cloth.particle_positions()
    queries = np.column_stack([px.ravel(), py.ravel()])
    if len(inverted) == 1:
        cloth.ihv[:] = z[0]
        return cloth
    tree = cKDTree(xy)
    dist, idx = tree.query(queries, k=2, workers=workers)
    best = idx[:, 0].copy()
    ambiguous = dist[:, 1] <= dist[:, 0] * (1.0 + 1e-12)
    for j in np.flatnonzero(ambiguous):
        r = dist[j, 0] * (1.0 + 1e-9)
        cand = np.asarray(tree.query_ball_point(queries[j], r), dtype=np.intp)
        dc = ((xy[cand] - queries[j]) ** 2).sum(axis=1)
        best[j] = cand[dc == dc.min()].min()
    cloth.ihv[:] = z[best].reshape(cloth.rows, cloth.cols)
    return cloth


def gravity_step(cloth: ClothState, params: CsfParams) -> ClothState:
    """One Verlet step: h' = 2h - h_prev - gravity*time_step^2 for movables."""
    drop = params.gravity * params.time_step * params.time_step
    m = cloth.movable
    new = 2.0 * cloth.height - cloth.prev_height - drop
    np.copyto(cloth.prev_height, cloth.height, where=m)
    np.copyto(cloth.height, new, where=m)
    return cloth


def collision_clamp(cloth: ClothState) -> ClothState:
    """Land every particle that fell through its terrain measurement.

    Particles with height < ihv are set to exactly ihv (height and history)
    and become unmovable for the rest of the simulation.
    """
    below = cloth.height < cloth.ihv
    if below.any():
        cloth.height[below] = cloth.ihv[below]
        cloth.prev_height[below] = cloth.ihv[below]
        cloth.movable[below] = False
    return cloth


class _ConstraintKernel:
    """One constraint pass with the pair weights cached.

    Weights depend only on which particles are movable, so they are rebuilt
    only when a collision freezes something; between freezes every pass
    reuses the same arrays and preallocated scratch buffers.
    """

    def __init__(self, cloth: ClothState):
        rows, cols = cloth.height.shape
        self._dr = np.empty((rows, cols - 1))
        self._tr = np.empty((rows, cols - 1))
        self._dd = np.empty((rows - 1, cols))
        self._td = np.empty((rows - 1, cols))
        self._acc = np.empty((rows, cols))
        # Per-pair corrections are averaged over the pairs touching a
        # particle. Summing them instead lets a particle ringed by frozen
        # neighbors overshoot (4 pairs at half strength reflect it about the
        # ring height), which pumps Verlet velocity until the particle
        # crashes through gaps the cloth is supposed to bridge.
        degree = np.zeros((rows, cols))
        if cols > 1:
            degree += 2.0
            degree[:, 0] -= 1.0
            degree[:, -1] -= 1.0
        if rows > 1:
            degree += 2.0
            degree[0, :] -= 1.0
            degree[-1, :] -= 1.0
        self._inv_degree = 1.0 / np.maximum(degree, 1.0)
        self.refresh(cloth)

    def refresh(self, cloth: ClothState) -> None:
        half = _CORRECTION_FRACTION / 2.0
        m = cloth.movable
        ma, mb = m[:, :-1], m[:, 1:]
        both = ma & mb
        self._wra = both * half + (ma & ~mb) * _CORRECTION_FRACTION
        self._wrb = both * half + (~ma & mb) * _CORRECTION_FRACTION
        ma, mb = m[:-1, :], m[1:, :]
        both = ma & mb
        self._wda = both * half + (ma & ~mb) * _CORRECTION_FRACTION
        self._wdb = both * half + (~ma & mb) * _CORRECTION_FRACTION

    def pass_once(self, cloth: ClothState) -> None:
        # Height differences of all pairs are read before any update lands,
        # which is what makes the pass traversal-order independent.
        h = cloth.height
        acc = self._acc
        acc[:] = 0.0
        np.subtract(h[:, 1:], h[:, :-1], out=self._dr)
        np.subtract(h[1:, :], h[:-1, :], out=self._dd)
        np.multiply(self._dr, self._wra, out=self._tr)
        acc[:, :-1] += self._tr
        np.multiply(self._dr, self._wrb, out=self._tr)
        acc[:, 1:] -= self._tr
        np.multiply(self._dd, self._wda, out=self._td)
        acc[:-1, :] += self._td
        np.multiply(self._dd, self._wdb, out=self._td)
        acc[1:, :] -= self._td
        acc *= self._inv_degree
        h += acc


def internal_constraint_step(cloth: ClothState, params: CsfParams | None = None) -> ClothState:
    """One spring-constraint pass over all 4-connected neighbor pairs.

    For a pair with height difference D: two movable ends each receive a
    D/4 correction toward each other; a single movable end receives the
    full D/2; frozen ends never move. Corrections are computed from the
    pre-pass heights, averaged over the pairs touching each particle, and
    applied simultaneously, so the result is traversal-order independent.
    """
    _ConstraintKernel(cloth).pass_once(cloth)
    return cloth


def slope_postprocess(cloth: ClothState, params: CsfParams) -> ClothState:
    """Pull the cloth down steep faces whose feet already landed.

    Sweeps until stable: a movable particle 4-adjacent to a landed one is
    itself landed at its own ihv when the two terrain measurements differ by
    at most the slope threshold. Landing only ever happens at measured
    heights, so the rule cannot invent terrain.
    """
    if not params.steep_slope_fit:
        return cloth
    thr = params.effective_slope_threshold
    ihv = cloth.ihv
    near_lr = np.abs(ihv[:, 1:] - ihv[:, :-1]) <= thr
    near_ud = np.abs(ihv[1:, :] - ihv[:-1, :]) <= thr
    while True:
        m = cloth.movable
        landed = ~m
        freeze = np.zeros_like(m)
        freeze[:, :-1] |= m[:, :-1] & landed[:, 1:] & near_lr
        freeze[:, 1:] |= m[:, 1:] & landed[:, :-1] & near_lr
        freeze[:-1, :] |= m[:-1, :] & landed[1:, :] & near_ud
        freeze[1:, :] |= m[1:, :] & landed[:-1, :] & near_ud
        if not freeze.any():
            return cloth
        cloth.height[freeze] = ihv[freeze]
        cloth.prev_height[freeze] = ihv[freeze]
        cloth.movable[freeze] = False


def simulate(
    inverted: PointCloud, params: CsfParams, on_iteration=None, workers: int = 1
) -> ClothState:
    """Drop the cloth and relax it until it settles or the budget runs out.

    One iteration: gravity, collision clamp, ``rigidness`` constraint passes,
    collision clamp. Stops early once no particle moved by at least
    ``height_convergence`` over a whole iteration. Runs the slope
    post-processing afterwards when enabled. ``on_iteration(i, cloth)`` is
    called after each iteration for instrumentation.
    """
    cloth = init_cloth(inverted, params, workers=workers)
    kernel = _ConstraintKernel(cloth)
    start_heights = np.empty_like(cloth.height)
    frozen_count = 0
    for it in range(params.max_iterations):
        np.copyto(start_heights, cloth.height)
        gravity_step(cloth, params)
        collision_clamp(cloth)
        now_frozen = int((~cloth.movable).sum())
        if now_frozen != frozen_count:
            frozen_count = now_frozen
            kernel.refresh(cloth)
        for _ in range(params.rigidness):
            kernel.pass_once(cloth)
        collision_clamp(cloth)
        now_frozen = int((~cloth.movable).sum())
        if now_frozen != frozen_count:
            frozen_count = now_frozen
            kernel.refresh(cloth)
        cloth.iterations_used = it + 1
        cloth.max_last_displacement = float(np.abs(cloth.height - start_heights).max())
        if on_iteration is not None:
            on_iteration(it + 1, cloth)
        if cloth.max_last_displacement < params.height_convergence:
            break
    if params.steep_slope_fit:
        slope_postprocess(cloth, params)
    return cloth


def classify(cloud: PointCloud, cloth: ClothState, params: CsfParams) -> CsfResult:
    """Split the original cloud into ground and non-ground by cloth distance.

    The cloth height under each point comes from bilinear interpolation of
    the 4 surrounding particles, negated back into the upright frame. A point
    strictly closer than ``class_threshold`` to that surface is ground.
    """
    gx = (cloud.xyz[:, 0] - cloth.origin[0]) / cloth.spacing
    gy = (cloud.xyz[:, 1] - cloth.origin[1]) / cloth.spacing
    c0 = np.floor(gx).astype(np.intp)
    r0 = np.floor(gy).astype(np.intp)
    outside = (c0 < 0) | (r0 < 0) | (c0 + 1 >= cloth.cols) | (r0 + 1 >= cloth.rows)
    if outside.any():
        # The init_cloth margin makes this unreachable for the cloud the
        # cloth was built over; it guards against mismatched inputs.
        raise PointOutsideCloth(f"{int(outside.sum())} points fall outside the cloth grid")
    fx = gx - c0
    fy = gy - r0
    h = cloth.height
    interp = (
        h[r0, c0] * (1 - fx) * (1 - fy)
        + h[r0, c0 + 1] * fx * (1 - fy)
        + h[r0 + 1, c0] * (1 - fx) * fy
        + h[r0 + 1, c0 + 1] * fx * fy
    )
    ground = np.abs(cloud.xyz[:, 2] - (-interp)) < params.class_threshold
    labels = np.where(ground, int(Label.GROUND), int(Label.NON_GROUND)).astype(np.uint8)
    return CsfResult(
        labels=labels,
        cloth=cloth,
        iterations_used=cloth.iterations_used,
        max_last_displacement=cloth.max_last_displacement,
    )


def csf_filter(
    cloud: PointCloud, params: CsfParams = CsfParams(), on_iteration=None, workers: int = 1
) -> CsfResult:
    """End to end: invert, simulate the cloth, classify the original points."""
    cloth = simulate(invert_cloud(cloud), params, on_iteration=on_iteration, workers=workers)
    return classify(cloud, cloth, params)
