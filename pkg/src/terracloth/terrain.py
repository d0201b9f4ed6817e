"""Terrain products from ground-labeled points.

Normals by neighborhood PCA, an inverse-distance-weighted DTM raster, a grid
mesh over the raster, corridor cross-section profiles, and the class-count
report. Raster NoData is NaN in memory and the NODATA_value sentinel in ESRI
ASCII files.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Label, PointCloud, bounding_box
from .errors import (
    AllNoData,
    EmptyCloud,
    EmptyCorridor,
    InsufficientNeighbors,
    InvalidCellSize,
    InvalidSpec,
    IoFailure,
    LengthMismatch,
    MalformedHeader,
    OutOfRange,
    UnlabeledPointsRemain,
)


class DegenerateNeighborhood(UserWarning):
    """A point's whole neighborhood is coincident; its normal defaults to +z."""


# ---------------------------------------------------------------------------
# Normals

def estimate_normals(ground: PointCloud, k: int = 100, workers: int = 1) -> np.ndarray:
    """Unit normals per point from PCA over the point plus its k neighbors.

    The normal is the smallest-variance direction of the k+1 neighborhood,
    oriented upward (z >= 0; exact-zero z falls back to x >= 0, then y >= 0).
    A fully coincident neighborhood gets (0, 0, 1) and a
    DegenerateNeighborhood warning instead of an error.
    """
    n = len(ground)
    if k < 1:
        raise OutOfRange(f"normal estimation k must be >= 1, got {k}")
    if n < k + 1:
        raise InsufficientNeighbors(f"normal estimation with k={k} needs {k + 1} points, got {n}")
    tree = cKDTree(ground.xyz)
    normals = np.empty((n, 3))
    degenerate_total = 0
    chunk = 20_000  # bounds the (chunk, k+1, 3) gather below
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        _, idx = tree.query(ground.xyz[lo:hi], k=k + 1, workers=workers)
        hood = ground.xyz[idx]  # (m, k+1, 3)
        centered = hood - hood.mean(axis=1, keepdims=True)
        cov = np.einsum("mki,mkj->mij", centered, centered) / (k + 1)
        degenerate = np.einsum("mii->m", cov) == 0.0
        # eigh returns eigenvalues ascending; column 0 is the plane normal.
        _, vecs = np.linalg.eigh(cov)
        nrm = vecs[:, :, 0]
        flip = (nrm[:, 2] < 0) | (
            (nrm[:, 2] == 0) & ((nrm[:, 0] < 0) | ((nrm[:, 0] == 0) & (nrm[:, 1] < 0)))
        )
        nrm[flip] = -nrm[flip]
        nrm[degenerate] = (0.0, 0.0, 1.0)
        degenerate_total += int(degenerate.sum())
        normals[lo:hi] = nrm
    if degenerate_total:
        warnings.warn(
            f"{degenerate_total} points have fully coincident neighborhoods; "
            "their normals default to (0, 0, 1)",
            DegenerateNeighborhood,
            stacklevel=2,
        )
    return normals


# ---------------------------------------------------------------------------
# DTM raster

@dataclass
class DtmRaster:
    """Regular elevation grid; row 0 is the southernmost row, NaN = NoData."""

    origin: np.ndarray  # (x, y) of the lower-left raster corner
    cell_size: float
    width: int
    height: int
    elevation: np.ndarray  # (height, width)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(height, width) grids of cell-center x and y coordinates."""
        x = self.origin[0] + (np.arange(self.width) + 0.5) * self.cell_size
        y = self.origin[1] + (np.arange(self.height) + 0.5) * self.cell_size
        return np.meshgrid(x, y)

    @property
    def nodata_mask(self) -> np.ndarray:
        return np.isnan(self.elevation)


def build_dtm(
    ground: PointCloud,
    cell_size: float,
    idw_power: float = 2.0,
    search_radius: float | None = None,
    workers: int = 1,
) -> DtmRaster:
    """Rasterize ground points by inverse-distance weighting.

    Each cell takes the IDW mean (weights 1/d^power) of the ground z values
    within ``search_radius`` of its center; a point within 1e-9 of the center
    supplies its z outright (nearest such point, ties to the lowest index).
    Cells with nothing in radius are NoData. ``search_radius`` defaults to 3
    cell sizes and must be at least one.
    """
    if len(ground) == 0:
        raise EmptyCloud("cannot rasterize an empty ground cloud")
    if not cell_size > 0:
        raise InvalidCellSize(f"cell_size must be > 0, got {cell_size}")
    if search_radius is None:
        search_radius = 3.0 * cell_size
    if search_radius < cell_size:
        raise OutOfRange(
            f"search_radius {search_radius} is smaller than cell_size {cell_size}"
        )
    box = bounding_box(ground)
    ext = box.extent()
    width = max(1, math.ceil(ext[0] / cell_size))
    height = max(1, math.ceil(ext[1] / cell_size))
    raster = DtmRaster(
        origin=box.mins[:2].copy(),
        cell_size=cell_size,
        width=width,
        height=height,
        elevation=np.full((height, width), np.nan),
    )

    cx, cy = raster.cell_centers()
    centers = np.column_stack([cx.ravel(), cy.ravel()])
    hits = cKDTree(centers).query_ball_point(ground.xyz[:, :2], search_radius, workers=workers)
    lens = np.fromiter((len(h) for h in hits), dtype=np.intp, count=len(ground))
    point_of_pair = np.repeat(np.arange(len(ground)), lens)
    cell_of_pair = np.concatenate([np.asarray(h, dtype=np.intp) for h in hits]) if lens.sum() else np.empty(0, np.intp)
    if cell_of_pair.size == 0:
        return raster  # radius reaches nothing: everything stays NoData

    z = ground.xyz[:, 2]
    delta = ground.xyz[point_of_pair, :2] - centers[cell_of_pair]
    dist = np.sqrt((delta**2).sum(axis=1))

    ncells = width * height
    # IDW relative to each cell's local minimum: a constant field reproduces
    # exactly, and every value stays a convex combination of neighbors.
    ref = np.full(ncells, np.inf)
    np.minimum.at(ref, cell_of_pair, z[point_of_pair])
    exact = dist <= 1e-9
    idw = ~exact
    w = np.zeros_like(dist)
    w[idw] = 1.0 / dist[idw] ** idw_power
    num = np.zeros(ncells)
    den = np.zeros(ncells)
    np.add.at(num, cell_of_pair[idw], w[idw] * (z[point_of_pair[idw]] - ref[cell_of_pair[idw]]))
    np.add.at(den, cell_of_pair[idw], w[idw])
    flat = raster.elevation.ravel()
    covered = den > 0
    flat[covered] = ref[covered] + num[covered] / den[covered]

    if exact.any():
        # Nearest on-center point wins; ties go to the lowest point index.
        order = np.lexsort((point_of_pair[exact], dist[exact], cell_of_pair[exact]))
        cells = cell_of_pair[exact][order]
        first = np.unique(cells, return_index=True)[1]
        flat[cells[first]] = z[point_of_pair[exact][order][first]]
    raster.elevation = flat.reshape(height, width)
    return raster


NODATA_SENTINEL = -9999.0


def save_esri_ascii(raster: DtmRaster, path, nodata: float = NODATA_SENTINEL) -> None:
    """Write the raster as an ESRI ASCII grid (rows north to south)."""
    rows = []
    for r in range(raster.height - 1, -1, -1):
        vals = raster.elevation[r]
        rows.append(" ".join("%.6g" % nodata if np.isnan(v) else "%.6g" % v for v in vals))
    header = (
        f"ncols {raster.width}\n"
        f"nrows {raster.height}\n"
        f"xllcorner {raster.origin[0]:.6g}\n"
        f"yllcorner {raster.origin[1]:.6g}\n"
        f"cellsize {raster.cell_size:.6g}\n"
        f"NODATA_value {nodata:.6g}\n"
    )
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(header)
            fh.write("\n".join(rows) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_esri_ascii(path) -> DtmRaster:
    """Read an ESRI ASCII grid written by save_esri_ascii."""
    try:
        with open(path, encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    tokens = text.split()
    keys = {}
    i = 0
    while i + 1 < len(tokens) and tokens[i].lower() in (
        "ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value",
    ):
        keys[tokens[i].lower()] = tokens[i + 1]
        i += 2
    for need in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if need not in keys:
            raise MalformedHeader(f"{path}: ESRI grid header lacks {need}")
    width = int(keys["ncols"])
    height = int(keys["nrows"])
    nodata = float(keys.get("nodata_value", NODATA_SENTINEL))
    body = np.asarray(tokens[i:], dtype=np.float64)
    if body.size != width * height:
        raise MalformedHeader(
            f"{path}: expected {width * height} cells, found {body.size}"
        )
    grid = body.reshape(height, width)[::-1].copy()  # back to south-first rows
    grid[grid == nodata] = np.nan
    return DtmRaster(
        origin=np.array([float(keys["xllcorner"]), float(keys["yllcorner"])]),
        cell_size=float(keys["cellsize"]),
        width=width,
        height=height,
        elevation=grid,
    )


# ---------------------------------------------------------------------------
# Mesh

@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle soup: vertices (N, 3), faces (M, 3) into vertices."""

    vertices: np.ndarray
    faces: np.ndarray


def dtm_to_mesh(dtm: DtmRaster) -> TriangleMesh:
    """Triangulate the raster: two triangles per fully-valid 2x2 cell block.

    Vertices are the non-NoData cell centers at their elevations; any block
    touching NoData contributes nothing.
    """
    valid = ~dtm.nodata_mask
    if not valid.any():
        raise AllNoData("raster has no valid cells to mesh")
    vid = np.full(dtm.elevation.shape, -1, dtype=np.intp)
    vid[valid] = np.arange(int(valid.sum()))
    cx, cy = dtm.cell_centers()
    vertices = np.column_stack([cx[valid], cy[valid], dtm.elevation[valid]])

    blocks = valid[:-1, :-1] & valid[:-1, 1:] & valid[1:, :-1] & valid[1:, 1:]
    r, c = np.nonzero(blocks)
    a = vid[r, c]
    b = vid[r, c + 1]
    d = vid[r + 1, c + 1]
    e = vid[r + 1, c]
    # Counter-clockwise seen from above (+z).
    faces = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, e])])
    return TriangleMesh(vertices=vertices, faces=faces.astype(np.intp))


def save_mesh_ply(mesh: TriangleMesh, path, binary: bool = False) -> None:
    """Write the mesh as a PLY file (double vertices, int face indices)."""
    n, m = len(mesh.vertices), len(mesh.faces)
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {m}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                fh.write(mesh.vertices.astype("<f8").tobytes())
                rec = np.empty(m, dtype=np.dtype([("n", "u1"), ("v", "<i4", (3,))]))
                rec["n"] = 3
                rec["v"] = mesh.faces
                fh.write(rec.tobytes())
            else:
                np.savetxt(fh, mesh.vertices, fmt="%.6g")
                np.savetxt(
                    fh, np.column_stack([np.full(m, 3, dtype=np.intp), mesh.faces]), fmt="%d"
                )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Profiles

@dataclass(frozen=True)
class Profile:
    """Ground envelope along a cut: per-bin minimum elevation vs distance."""

    distances: np.ndarray
    elevations: np.ndarray
    cut: np.ndarray  # (2, 2): xy endpoints
    half_width: float
    bin_size: float

    @property
    def delta(self) -> float:
        """Spread between the highest and lowest binned elevation."""
        return float(self.elevations.max() - self.elevations.min())


def extract_profile(
    ground: PointCloud, cut, half_width: float, bin_size: float = 1.0
) -> Profile:
    """Bin the corridor around a cut segment into a min-z elevation profile.

    Points within ``half_width`` of the segment (and between its endpoints
    along it) are projected onto the cut axis and grouped into ``bin_size``
    bins; each bin reports its minimum z so vegetation remnants cannot lift
    the ground line. Bin centers are the sample distances; empty bins are
    dropped.
    """
    if not half_width > 0:
        raise OutOfRange(f"half_width must be > 0, got {half_width}")
    if not bin_size > 0:
        raise OutOfRange(f"bin size must be > 0, got {bin_size}")
    seg = np.asarray(cut, dtype=np.float64).reshape(2, 2)
    direction = seg[1] - seg[0]
    length = float(np.sqrt((direction**2).sum()))
    if length == 0.0:
        raise InvalidSpec("cut endpoints coincide; the cut needs a direction")
    direction = direction / length

    rel = ground.xyz[:, :2] - seg[0]
    along = rel @ direction
    across = rel[:, 0] * (-direction[1]) + rel[:, 1] * direction[0]
    inside = (along >= 0.0) & (along <= length) & (np.abs(across) <= half_width)
    if not inside.any():
        raise EmptyCorridor(
            f"no points within {half_width} m of the cut; widen the corridor or move the cut"
        )
    u = along[inside]
    z = ground.xyz[inside, 2]
    nbins = max(1, math.ceil(length / bin_size))
    bins = np.minimum((u / bin_size).astype(np.intp), nbins - 1)
    lowest = np.full(nbins, np.inf)
    np.minimum.at(lowest, bins, z)
    occupied = np.flatnonzero(np.isfinite(lowest))
    return Profile(
        distances=(occupied + 0.5) * bin_size,
        elevations=lowest[occupied],
        cut=seg,
        half_width=half_width,
        bin_size=bin_size,
    )


def save_profile(profile: Profile, path) -> None:
    """Two columns (distance_m, elevation_m) and a final delta_m= line."""
    try:
        with open(path, "w", encoding="ascii") as fh:
            for d, e in zip(profile.distances, profile.elevations):
                fh.write("%.6g %.6g\n" % (d, e))
            fh.write("delta_m=%.6g\n" % profile.delta)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Report

@dataclass(frozen=True)
class ClassificationReport:
    """Point counts by class with raw-relative percentages."""

    raw_count: int
    outlier_count: int
    ground_count: int
    non_ground_count: int

    @property
    def denoised_count(self) -> int:
        return self.ground_count + self.non_ground_count

    def percent(self, count: int) -> float:
        return 100.0 * count / self.raw_count if self.raw_count else 0.0

    @property
    def ground_share_of_classified(self) -> float:
        """Ground percentage among the points that survived denoising."""
        return 100.0 * self.ground_count / self.denoised_count if self.denoised_count else 0.0

    def as_text(self) -> str:
        rows = [
            ("raw points", self.raw_count, 100.0),
            ("outliers", self.outlier_count, self.percent(self.outlier_count)),
            ("without outliers", self.denoised_count, self.percent(self.denoised_count)),
            ("ground", self.ground_count, self.percent(self.ground_count)),
            ("non-ground", self.non_ground_count, self.percent(self.non_ground_count)),
        ]
        width = max(len(name) for name, _, _ in rows)
        count_width = max(len(f"{count:,}") for _, count, _ in rows)
        lines = [f"{'class':<{width}}  {'points':>{count_width}}  percent"]
        for name, count, pct in rows:
            lines.append(f"{name:<{width}}  {count:>{count_width},}  {pct:7.2f}")
        lines.append(f"{self.ground_share_of_classified:.2f}% Ground among classified points")
        return "\n".join(lines)

    def as_keyvalues(self) -> str:
        pairs = [
            ("raw_count", self.raw_count),
            ("outlier_count", self.outlier_count),
            ("denoised_count", self.denoised_count),
            ("ground_count", self.ground_count),
            ("non_ground_count", self.non_ground_count),
            ("outlier_pct", f"{self.percent(self.outlier_count):.2f}"),
            ("denoised_pct", f"{self.percent(self.denoised_count):.2f}"),
            ("ground_pct", f"{self.percent(self.ground_count):.2f}"),
            ("non_ground_pct", f"{self.percent(self.non_ground_count):.2f}"),
        ]
        return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"


def report(raw_count: int, mask) -> ClassificationReport:
    """Count outlier/ground/non-ground labels over the full raw cloud."""
    codes = np.asarray(mask)
    if codes.shape != (raw_count,):
        raise LengthMismatch(f"mask has shape {codes.shape} for raw count {raw_count}")
    outliers = int((codes == int(Label.OUTLIER)).sum())
    ground = int((codes == int(Label.GROUND)).sum())
    non_ground = int((codes == int(Label.NON_GROUND)).sum())
    leftover = raw_count - outliers - ground - non_ground
    if leftover:
        bad = sorted(set(np.unique(codes)) - {int(Label.OUTLIER), int(Label.GROUND), int(Label.NON_GROUND)})
        raise UnlabeledPointsRemain(
            f"{leftover} points carry labels outside outlier/ground/non-ground: {bad}"
        )
    return ClassificationReport(
        raw_count=raw_count,
        outlier_count=outliers,
        ground_count=ground,
        non_ground_count=non_ground,
    )
