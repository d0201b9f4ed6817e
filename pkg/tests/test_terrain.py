"""Normals, DTM rasters, meshes, profiles, and the class report."""

import numpy as np
import pytest

from terracloth.core import Label, PointCloud
from terracloth.errors import (
    AllNoData,
    EmptyCloud,
    EmptyCorridor,
    InsufficientNeighbors,
    InvalidCellSize,
    InvalidSpec,
    LengthMismatch,
    OutOfRange,
    UnlabeledPointsRemain,
)
from terracloth.io import load_cloud
from terracloth.terrain import (
    ClassificationReport,
    DegenerateNeighborhood,
    DtmRaster,
    build_dtm,
    dtm_to_mesh,
    estimate_normals,
    extract_profile,
    load_esri_ascii,
    report,
    save_esri_ascii,
    save_mesh_ply,
    save_profile,
)


def plane_cloud(nx=60, ny=60, spacing=0.2, slope=(0.0, 0.0), noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    gx, gy = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
    x = gx.ravel()
    y = gy.ravel()
    z = slope[0] * x + slope[1] * y
    if noise:
        z = z + rng.normal(0.0, noise, size=x.size)
    return PointCloud(np.column_stack([x, y, z]))


class TestNormals:
    def test_horizontal_plane(self):
        normals = estimate_normals(plane_cloud(), k=100)
        assert np.allclose(normals, [0.0, 0.0, 1.0], atol=1e-9)

    def test_unit_length(self):
        cloud = plane_cloud(slope=(0.3, -0.2), noise=0.05, seed=1)
        normals = estimate_normals(cloud, k=50)
        assert np.allclose(np.sqrt((normals**2).sum(axis=1)), 1.0, atol=1e-9)
        assert np.all(normals[:, 2] >= 0)

    def test_forty_five_degree_plane(self):
        normals = estimate_normals(plane_cloud(slope=(1.0, 0.0)), k=100)
        expect = np.array([-np.sqrt(2) / 2, 0.0, np.sqrt(2) / 2])
        assert np.allclose(normals, expect, atol=1e-6)

    def test_noisy_plane_interior_angles(self):
        cloud = plane_cloud(slope=(0.2, -0.1), noise=0.01, seed=2)
        normals = estimate_normals(cloud, k=100)
        true_n = np.array([-0.2, 0.1, 1.0])
        true_n /= np.sqrt((true_n**2).sum())
        # Interior points only: a 2 m margin inside the 12 m plane.
        xy = cloud.xyz[:, :2]
        interior = np.all((xy > 2.0) & (xy < 9.8), axis=1)
        cos = np.clip(normals[interior] @ true_n, -1.0, 1.0)
        angles = np.degrees(np.arccos(cos))
        assert angles.max() < 2.0

    def test_rotation_about_z_equivariant(self):
        cloud = plane_cloud(slope=(0.4, 0.15), noise=0.02, seed=3)
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        base = estimate_normals(cloud, k=40)
        turned = estimate_normals(PointCloud(cloud.xyz @ rot.T), k=40)
        assert np.allclose(turned, base @ rot.T, atol=1e-7)

    def test_insufficient_points(self):
        with pytest.raises(InsufficientNeighbors):
            estimate_normals(plane_cloud(nx=5, ny=5), k=100)

    def test_coincident_neighborhood_warns(self):
        cloud = PointCloud(np.tile([[1.0, 2.0, 3.0]], (12, 1)))
        with pytest.warns(DegenerateNeighborhood):
            normals = estimate_normals(cloud, k=11)
        assert np.array_equal(normals, np.tile([[0.0, 0.0, 1.0]], (12, 1)))


class TestBuildDtm:
    def test_single_point(self):
        raster = build_dtm(PointCloud([[3.0, 4.0, 7.5]]), cell_size=1.0)
        assert raster.width == 1 and raster.height == 1
        assert raster.elevation[0, 0] == 7.5

    def test_horizontal_plane_exact(self):
        raster = build_dtm(plane_cloud(nx=30, ny=30), cell_size=0.5)
        valid = ~raster.nodata_mask
        assert valid.all()
        assert np.all(raster.elevation[valid] == 0.0)

        lifted = PointCloud(plane_cloud(nx=30, ny=30).xyz + [0.0, 0.0, 12.25])
        raster = build_dtm(lifted, cell_size=0.5)
        assert np.all(raster.elevation[~raster.nodata_mask] == 12.25)

    def test_tilted_plane_within_slope_bound(self):
        slope = 0.3
        cloud = plane_cloud(nx=80, ny=80, spacing=0.1, slope=(slope, 0.0))
        raster = build_dtm(cloud, cell_size=0.4)
        cx, _ = raster.cell_centers()
        valid = ~raster.nodata_mask
        err = np.abs(raster.elevation[valid] - slope * cx[valid])
        assert err.max() <= raster.cell_size * slope + 1e-9

    def test_convex_combination_bound_and_nodata(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(0, 10, size=(400, 3))
        pts[:, 2] = rng.uniform(-5, 5, size=400)
        # Cut a hole so some cells really have no points in radius.
        keep = ~(((pts[:, 0] - 5) ** 2 + (pts[:, 1] - 5) ** 2) < 9.0)
        cloud = PointCloud(pts[keep])
        raster = build_dtm(cloud, cell_size=0.5, search_radius=0.75)
        cx, cy = raster.cell_centers()
        for r in range(raster.height):
            for c in range(raster.width):
                d = np.sqrt((cloud.xyz[:, 0] - cx[r, c]) ** 2 + (cloud.xyz[:, 1] - cy[r, c]) ** 2)
                near = d <= 0.75
                if not near.any():
                    assert np.isnan(raster.elevation[r, c])
                else:
                    z = cloud.xyz[near, 2]
                    assert z.min() - 1e-9 <= raster.elevation[r, c] <= z.max() + 1e-9

    def test_exact_center_hit_wins(self):
        # One point exactly on a cell center, another slightly off: the cell
        # takes the centered point's z outright.
        pts = PointCloud([[0.0, 0.0, 0.0], [4.0, 4.0, 0.0], [0.5, 0.5, 42.0], [0.9, 0.5, -3.0]])
        raster = build_dtm(pts, cell_size=1.0, search_radius=1.5)
        assert raster.elevation[0, 0] == 42.0

    def test_parameter_validation(self):
        cloud = plane_cloud(nx=4, ny=4)
        with pytest.raises(InvalidCellSize):
            build_dtm(cloud, cell_size=0.0)
        with pytest.raises(OutOfRange):
            build_dtm(cloud, cell_size=1.0, search_radius=0.5)
        with pytest.raises(EmptyCloud):
            build_dtm(PointCloud(np.zeros((0, 3))), cell_size=1.0)


class TestEsriAscii:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        pts = rng.uniform(0, 8, size=(500, 3))
        raster = build_dtm(PointCloud(pts), cell_size=0.5, search_radius=0.6)
        path = tmp_path / "dtm.asc"
        save_esri_ascii(raster, path)
        back = load_esri_ascii(path)
        assert back.width == raster.width and back.height == raster.height
        assert np.allclose(back.origin, raster.origin, rtol=5e-6)
        assert back.cell_size == raster.cell_size
        assert np.array_equal(back.nodata_mask, raster.nodata_mask)
        both = ~raster.nodata_mask
        assert np.allclose(back.elevation[both], raster.elevation[both], rtol=5e-6, atol=1e-9)

    def test_rows_written_north_to_south(self, tmp_path):
        raster = DtmRaster(
            origin=np.array([0.0, 0.0]),
            cell_size=1.0,
            width=1,
            height=2,
            elevation=np.array([[1.0], [2.0]]),  # row 0 = south
        )
        path = tmp_path / "tiny.asc"
        save_esri_ascii(raster, path)
        lines = path.read_text().splitlines()
        assert lines[0].split() == ["ncols", "1"]
        assert lines[-2:] == ["2", "1"]  # north first


class TestMesh:
    @staticmethod
    def full_raster(rows, cols):
        return DtmRaster(
            origin=np.zeros(2),
            cell_size=1.0,
            width=cols,
            height=rows,
            elevation=np.arange(rows * cols, dtype=float).reshape(rows, cols),
        )

    def test_two_by_two(self):
        mesh = dtm_to_mesh(self.full_raster(2, 2))
        assert len(mesh.vertices) == 4
        assert len(mesh.faces) == 2

    def test_nodata_blocks_triangles(self):
        raster = self.full_raster(2, 2)
        raster.elevation[0, 0] = np.nan
        mesh = dtm_to_mesh(raster)
        assert len(mesh.vertices) == 3
        assert len(mesh.faces) == 0

    def test_triangle_count_formula(self):
        for rows, cols in ((2, 3), (5, 4), (7, 7)):
            mesh = dtm_to_mesh(self.full_raster(rows, cols))
            assert len(mesh.faces) == 2 * (rows - 1) * (cols - 1)
            assert len(mesh.vertices) == rows * cols
            assert mesh.faces.min() >= 0
            assert mesh.faces.max() < len(mesh.vertices)

    def test_faces_wind_counter_clockwise_from_above(self):
        mesh = dtm_to_mesh(self.full_raster(3, 3))
        v = mesh.vertices
        for f in mesh.faces:
            a, b, c = v[f]
            cross_z = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            assert cross_z > 0

    def test_all_nodata(self):
        raster = self.full_raster(2, 2)
        raster.elevation[:] = np.nan
        with pytest.raises(AllNoData):
            dtm_to_mesh(raster)

    def test_ply_export_vertices_reload(self, tmp_path):
        mesh = dtm_to_mesh(self.full_raster(4, 5))
        path = tmp_path / "mesh.ply"
        save_mesh_ply(mesh, path)
        text = path.read_text()
        assert f"element face {len(mesh.faces)}" in text
        cloud = load_cloud(path)  # vertex element only; face data is ignored
        assert np.allclose(cloud.xyz, mesh.vertices, rtol=5e-6)

    def test_ply_export_binary(self, tmp_path):
        mesh = dtm_to_mesh(self.full_raster(3, 4))
        path = tmp_path / "mesh_b.ply"
        save_mesh_ply(mesh, path, binary=True)
        cloud = load_cloud(path)
        assert np.array_equal(cloud.xyz, mesh.vertices)


class TestProfile:
    def test_flat_ground_constant(self):
        rng = np.random.default_rng(6)
        pts = np.column_stack([rng.uniform(0, 20, size=(800, 2)), np.full(800, 3.25)])
        profile = extract_profile(PointCloud(pts), [(0, 10), (20, 10)], half_width=2.0, bin_size=1.0)
        assert np.all(profile.elevations == 3.25)
        assert profile.delta == 0.0

    def test_ramp_delta_about_forty(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 100, size=6000)
        y = rng.uniform(-3, 3, size=6000)
        cloud = PointCloud(np.column_stack([x, y, 0.4 * x]))
        profile = extract_profile(cloud, [(0, 0), (100, 0)], half_width=2.0, bin_size=0.5)
        assert abs(profile.delta - 40.0) < 0.5
        assert np.all(np.diff(profile.distances) > 0)

    def test_monotone_ramp_monotone_profile(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(0, 50, size=3000)
        y = rng.uniform(-1, 1, size=3000)
        cloud = PointCloud(np.column_stack([x, y, 0.8 * x]))
        profile = extract_profile(cloud, [(0, 0), (50, 0)], half_width=1.0, bin_size=1.0)
        assert np.all(np.diff(profile.elevations) >= 0)

    def test_corridor_bounds_inclusive(self):
        pts = PointCloud(
            [
                [5.0, 2.0, 1.0],    # across = +2.0, on the corridor edge
                [5.0, -2.0, 2.0],   # across = -2.0, on the edge
                [5.0, 2.0001, 9.0], # just outside
                [-0.5, 0.0, 9.0],   # before the segment start
                [10.5, 0.0, 9.0],   # past the end
            ]
        )
        profile = extract_profile(pts, [(0, 0), (10, 0)], half_width=2.0, bin_size=10.0)
        assert profile.elevations.tolist() == [1.0]

    def test_uses_minimum_not_mean(self):
        pts = PointCloud([[5.0, 0.0, 1.0], [5.2, 0.0, 30.0]])  # tree remnant above ground
        profile = extract_profile(pts, [(0, 0), (10, 0)], half_width=1.0, bin_size=10.0)
        assert profile.elevations.tolist() == [1.0]

    def test_empty_corridor(self):
        pts = PointCloud([[100.0, 100.0, 0.0], [101.0, 101.0, 0.0]])
        with pytest.raises(EmptyCorridor):
            extract_profile(pts, [(0, 0), (10, 0)], half_width=1.0, bin_size=1.0)

    def test_degenerate_cut(self):
        pts = PointCloud([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        with pytest.raises(InvalidSpec):
            extract_profile(pts, [(3, 3), (3, 3)], half_width=1.0, bin_size=1.0)

    def test_validation(self):
        pts = PointCloud([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        with pytest.raises(OutOfRange):
            extract_profile(pts, [(0, 0), (1, 0)], half_width=0.0, bin_size=1.0)
        with pytest.raises(OutOfRange):
            extract_profile(pts, [(0, 0), (1, 0)], half_width=1.0, bin_size=0.0)

    def test_save_format(self, tmp_path):
        rng = np.random.default_rng(9)
        pts = np.column_stack([rng.uniform(0, 10, size=(200, 2)), rng.uniform(0, 1, size=200)])
        profile = extract_profile(PointCloud(pts), [(0, 5), (10, 5)], half_width=5.0, bin_size=1.0)
        path = tmp_path / "profile.txt"
        save_profile(profile, path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(profile.distances) + 1
        assert lines[-1].startswith("delta_m=")
        d0, e0 = lines[0].split()
        assert float(d0) == profile.distances[0]
        assert float(e0) == pytest.approx(profile.elevations[0], rel=5e-6)


class TestReport:
    def test_reference_percentages(self):
        raw = 22_193_143
        mask = np.concatenate(
            [
                np.full(1_387_160, int(Label.OUTLIER), dtype=np.uint8),
                np.full(4_480_098, int(Label.GROUND), dtype=np.uint8),
                np.full(16_325_885, int(Label.NON_GROUND), dtype=np.uint8),
            ]
        )
        rep = report(raw, mask)
        assert rep.outlier_count == 1_387_160
        assert rep.ground_count == 4_480_098
        assert rep.non_ground_count == 16_325_885
        assert rep.denoised_count == 20_805_983
        assert f"{rep.percent(rep.outlier_count):.2f}" == "6.25"
        assert f"{rep.percent(rep.ground_count):.2f}" == "20.19"
        assert f"{rep.percent(rep.non_ground_count):.2f}" == "73.56"
        assert f"{rep.percent(rep.denoised_count):.2f}" == "93.75"

    def test_all_ground(self):
        rep = report(10, np.full(10, int(Label.GROUND), dtype=np.uint8))
        assert rep.percent(rep.outlier_count) == 0.0
        assert rep.percent(rep.ground_count) == 100.0
        assert rep.percent(rep.non_ground_count) == 0.0

    def test_random_masks_count_exactly(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            n = int(rng.integers(1, 5000))
            mask = rng.choice([1, 2, 7], size=n).astype(np.uint8)
            rep = report(n, mask)
            assert rep.outlier_count + rep.ground_count + rep.non_ground_count == n
            total_pct = (
                rep.percent(rep.outlier_count)
                + rep.percent(rep.ground_count)
                + rep.percent(rep.non_ground_count)
            )
            assert abs(total_pct - 100.0) < 0.01

    def test_unlabeled_rejected(self):
        with pytest.raises(UnlabeledPointsRemain):
            report(3, np.array([1, 2, 0], dtype=np.uint8))
        with pytest.raises(UnlabeledPointsRemain):
            report(3, np.array([1, 2, 5], dtype=np.uint8))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            report(4, np.array([1, 2, 7], dtype=np.uint8))

    def test_text_table_mentions_every_row(self):
        rep = ClassificationReport(100, 10, 30, 60)
        text = rep.as_text()
        for needle in ("raw points", "outliers", "without outliers", "ground", "non-ground"):
            assert needle in text
        kv = rep.as_keyvalues()
        assert "ground_count=30" in kv
        assert "outlier_pct=10.00" in kv
