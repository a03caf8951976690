import numpy as np
import pytest

from geomfix import blob_mask, cube_mesh, icosphere, punch_holes
from oracles import sphere_area, sphere_volume

from mitoforge.errors import ConfigError, InputError, NumericError
from mitoforge.mesh import (
    EmitterSet,
    TriangleMesh,
    is_watertight,
    load_emitters,
    load_mesh,
    make_watertight,
    marching_cubes,
    mesh_volume,
    normalize_unit_cube,
    denormalize,
    point_in_mesh,
    points_in_mesh,
    rotate,
    sample_surface,
    save_emitters,
    save_mesh,
    surface_area,
    watertight_audit,
)
from mitoforge.volume import VoxelVolume


class TestMarchingCubes:
    def test_single_voxel_is_closed_octahedron(self):
        # coarse limit of midpoint interpolation: the one-voxel surface is the
        # octahedron through the 6 face centers, volume exactly voxel^3 / 6
        data = np.zeros((3, 3, 3), np.uint8)
        data[1, 1, 1] = 1
        vol = VoxelVolume(data, 24.0)
        mesh = marching_cubes(vol)
        assert is_watertight(mesh)
        v = mesh_volume(mesh, "native")
        assert abs(v - 24.0**3 / 6.0) < 1e-9 * 24.0**3

    def test_ball_volume_within_5_percent(self, ball_volume, ball_mesh):
        analytic = sphere_volume(10 * 24.0)
        measured = mesh_volume(ball_mesh, "native")
        assert abs(measured - analytic) / analytic < 0.05

    def test_vertices_in_physical_coordinates(self):
        data = np.zeros((3, 3, 3), np.uint8)
        data[1, 1, 1] = 1
        vol = VoxelVolume(data, 24.0, origin=np.array([100.0, 0.0, -50.0]))
        mesh = marching_cubes(vol)
        center = mesh.vertices.mean(axis=0)
        np.testing.assert_allclose(center, [100.0 + 24.0, 24.0, -50.0 + 24.0], atol=1e-9)

    @pytest.mark.parametrize("seed", range(8))
    def test_random_blobs_watertight(self, seed):
        vol = blob_mask(shape=(20, 20, 20), fill=0.3, smooth=1.8, seed=seed)
        if vol.foreground_count() == 0:
            pytest.skip("empty blob draw")
        mesh = marching_cubes(vol)
        audit = watertight_audit(mesh)
        assert audit["watertight"], audit
        assert mesh_volume(mesh, "native") > 0

    def test_empty_mask_rejected(self):
        vol = VoxelVolume(np.zeros((3, 3, 3), np.uint8), 24.0)
        with pytest.raises(InputError):
            marching_cubes(vol)

    def test_nonbinary_rejected(self):
        vol = VoxelVolume(np.full((3, 3, 3), 2, np.uint8), 24.0)
        with pytest.raises(ConfigError):
            marching_cubes(vol)


class TestWatertightRepair:
    def test_already_watertight_unchanged(self, sphere_mesh):
        out = make_watertight(sphere_mesh)
        assert out.n_vertices == sphere_mesh.n_vertices
        assert out.n_triangles == sphere_mesh.n_triangles

    def test_cube_with_missing_face(self):
        cube = cube_mesh(side=1000.0)
        broken = TriangleMesh(cube.vertices.copy(), cube.triangles[2:])
        assert not is_watertight(broken)
        fixed = make_watertight(broken)
        assert is_watertight(fixed)
        assert abs(mesh_volume(fixed, "native") - 1000.0**3) / 1000.0**3 < 0.01

    def test_sphere_with_three_holes(self):
        sphere = icosphere(radius=500.0, subdivisions=3)
        reference = mesh_volume(sphere, "native")
        holed = punch_holes(sphere, 3, seed=4)
        assert not is_watertight(holed)
        fixed = make_watertight(holed)
        assert is_watertight(fixed)
        assert abs(mesh_volume(fixed, "native") - reference) / reference < 0.02

    def test_orientation_consistent_after_fill(self):
        cube = cube_mesh(side=10.0)
        broken = TriangleMesh(cube.vertices.copy(), cube.triangles[:-2])
        fixed = make_watertight(broken)
        audit = watertight_audit(fixed)
        assert audit["watertight"]
        assert audit["same_direction_pairs"] == 0
        assert mesh_volume(fixed, "native") > 0

    def test_non_orientable_rejected(self):
        cube = cube_mesh(side=1.0)
        tris = cube.triangles.copy()
        tris[0] = tris[0][::-1]  # flip one face: two same-direction edge traversals
        bad = TriangleMesh(cube.vertices.copy(), tris)
        with pytest.raises(NumericError):
            make_watertight(bad)


class TestNormalization:
    def test_unit_cube_identity(self, unit_cube):
        norm, record = normalize_unit_cube(unit_cube)
        assert record.scale == 1.0
        np.testing.assert_allclose(record.translation, 0.0, atol=1e-12)
        np.testing.assert_allclose(norm.vertices, unit_cube.vertices, atol=1e-12)

    def test_aspect_ratios_preserved(self):
        verts = np.array([
            [0, 0, 0], [2000, 0, 0], [0, 1000, 0], [0, 0, 500],
        ], dtype=float)
        tris = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
        mesh = TriangleMesh(verts, tris)
        norm, record = normalize_unit_cube(mesh)
        lo, hi = norm.bounds()
        extent = hi - lo
        assert extent.max() == 1.0
        np.testing.assert_allclose(extent, [1.0, 0.5, 0.25], rtol=1e-9)
        center = (hi + lo) / 2
        np.testing.assert_allclose(center, 0.0, atol=1e-12)

    def test_round_trip(self, blob_mesh):
        norm, record = normalize_unit_cube(blob_mesh)
        back = denormalize(norm, record)
        scale = np.abs(blob_mesh.vertices).max()
        assert np.abs(back.vertices - blob_mesh.vertices).max() / scale < 1e-6

    def test_degenerate_bbox_rejected(self):
        flat = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(ConfigError):
            normalize_unit_cube(flat)


class TestPointInMesh:
    def test_sphere_centroid_and_outside(self, sphere_mesh):
        assert point_in_mesh(sphere_mesh, [0.0, 0.0, 0.0])
        assert not point_in_mesh(sphere_mesh, [0.7, 0.0, 0.0])

    def test_on_vertex_counts_inside(self, sphere_mesh):
        for idx in (0, 17, 101):
            assert point_in_mesh(sphere_mesh, sphere_mesh.vertices[idx])

    def test_voxel_lookup_parity(self, ball_volume, ball_mesh):
        rng = np.random.default_rng(42)
        # uniform over the raster's full physical extent (voxel supports)
        lo = ball_volume.origin - ball_volume.voxel_size / 2
        hi = ball_volume.origin + (np.array(ball_volume.dims) - 0.5) * ball_volume.voxel_size
        pts = rng.uniform(lo, hi, size=(10_000, 3))
        inside = points_in_mesh(ball_mesh, pts)
        idx = np.rint((pts - ball_volume.origin) / ball_volume.voxel_size).astype(int)
        ok = (idx >= 0).all(axis=1) & (idx < np.array(ball_volume.dims)).all(axis=1)
        voxel = np.zeros(len(pts), dtype=bool)
        voxel[ok] = ball_volume.data[idx[ok, 0], idx[ok, 1], idx[ok, 2]] > 0
        agree = inside == voxel
        assert agree.mean() >= 0.99
        # disagreements confined to within one voxel of the surface
        center = ball_volume.origin + (np.array(ball_volume.dims) - 1) / 2 * ball_volume.voxel_size
        r = np.linalg.norm(pts[~agree] - center, axis=1)
        assert np.all(np.abs(r - 10 * ball_volume.voxel_size) <= 1.5 * ball_volume.voxel_size)

    def test_voxel_lookup_parity_on_blob(self, blob_volume, blob_mesh):
        rng = np.random.default_rng(7)
        lo = blob_volume.origin - blob_volume.voxel_size / 2
        hi = blob_volume.origin + (np.array(blob_volume.dims) - 0.5) * blob_volume.voxel_size
        pts = rng.uniform(lo, hi, size=(10_000, 3))
        inside = points_in_mesh(blob_mesh, pts)
        idx = np.rint((pts - blob_volume.origin) / blob_volume.voxel_size).astype(int)
        ok = (idx >= 0).all(axis=1) & (idx < np.array(blob_volume.dims)).all(axis=1)
        voxel = np.zeros(len(pts), dtype=bool)
        voxel[ok] = blob_volume.data[idx[ok, 0], idx[ok, 1], idx[ok, 2]] > 0
        assert (inside == voxel).mean() >= 0.95  # rougher surface than the ball

    def test_requires_watertight(self):
        open_mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
        with pytest.raises(ConfigError):
            point_in_mesh(open_mesh, [0.1, 0.1, 0.1])

    def test_grid_aligned_queries_on_cube(self):
        # worst case for ray casting: axis-aligned faces and grid-aligned points
        cube = cube_mesh(side=1.0)
        axis = np.linspace(-0.75, 0.75, 7)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        inside = points_in_mesh(cube, pts)
        expect = (np.abs(pts) <= 0.5 + 1e-12).all(axis=1)
        np.testing.assert_array_equal(inside, expect)


class TestAreaVolume:
    def test_unit_micron_cube(self):
        cube = cube_mesh(side=1000.0)  # 1 um in nm
        assert abs(surface_area(cube) - 6.0) < 1e-12
        assert abs(mesh_volume(cube) - 1.0) < 1e-12

    def test_icosphere_close_to_analytic(self):
        r = 800.0
        sph = icosphere(radius=r, subdivisions=4)
        assert abs(surface_area(sph, "native") - sphere_area(r)) / sphere_area(r) < 0.01
        assert abs(mesh_volume(sph, "native") - sphere_volume(r)) / sphere_volume(r) < 0.01

    def test_inverted_orientation_negative_volume(self, sphere_mesh):
        flipped = TriangleMesh(sphere_mesh.vertices.copy(),
                               sphere_mesh.triangles[:, [0, 2, 1]])
        v = mesh_volume(sphere_mesh, "native")
        assert abs(mesh_volume(flipped, "native") + v) < 1e-9 * abs(v)

    def test_volume_requires_watertight(self):
        open_mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
        with pytest.raises(ConfigError):
            mesh_volume(open_mesh)


class TestSampleSurface:
    def test_poisson_count_law(self):
        # 2 um^2 surface at 30 /um^2 -> mean 60
        side = np.sqrt(2e6 / 6.0)
        cube = cube_mesh(side=side)
        counts = [len(sample_surface(cube, 30.0, seed=s)) for s in range(200)]
        mean = np.mean(counts)
        assert abs(mean - 60.0) <= 3.0 * np.sqrt(60.0) / np.sqrt(200) * 10  # generous
        assert abs(mean - 60.0) <= 3.0 * np.sqrt(60.0)

    def test_tiny_density_gives_zero(self):
        cube = cube_mesh(side=1000.0)
        assert len(sample_surface(cube, 1e-9, seed=1)) == 0

    def test_area_proportional_triangle_choice(self):
        # two triangles, area ratio 9:1
        verts = np.array([
            [0, 0, 0], [9, 0, 0], [0, 2, 0],   # area 9
            [10, 0, 0], [11, 0, 0], [10, 2, 0],  # area 1
        ], dtype=float)
        mesh = TriangleMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
        pts = sample_surface(mesh, 10_000 / surface_area(mesh), seed=3).positions
        n = len(pts)
        frac_big = np.mean(pts[:, 0] < 9.5)
        sigma = np.sqrt(0.9 * 0.1 / n)
        assert abs(frac_big - 0.9) <= 3 * sigma

    def test_positions_lie_on_surface(self, sphere_mesh):
        emitters = sample_surface(sphere_mesh, 2000.0, seed=2)
        r = np.linalg.norm(emitters.positions, axis=1)
        # every sample sits on some triangle plane; for the icosphere all
        # triangle planes are within a thin shell below the radius
        assert (r <= 0.35 + 1e-9).all()
        assert (r >= 0.33).all()

    def test_determinism(self, sphere_mesh):
        a = sample_surface(sphere_mesh, 100.0, seed=9)
        b = sample_surface(sphere_mesh, 100.0, seed=9)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_zero_area_rejected(self):
        degenerate = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(ConfigError):
            sample_surface(degenerate, 10.0, seed=0)


class TestRotate:
    def test_identity(self, rng):
        pts = rng.normal(size=(20, 3))
        np.testing.assert_allclose(rotate(pts, 0, 0, 0, origin=(0, 0, 0)), pts)

    def test_quarter_turn_about_x(self):
        out = rotate(np.array([[0.0, 1.0, 0.0]]), np.pi / 2, 0, 0, origin=(0, 0, 0))
        np.testing.assert_allclose(out, [[0.0, 0.0, 1.0]], atol=1e-12)

    def test_isometry(self, rng):
        pts = rng.normal(size=(30, 3)) * 100
        angles = rng.uniform(0, 2 * np.pi, 3)
        out = rotate(pts, *angles)
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        d_out = np.linalg.norm(out[:, None] - out[None, :], axis=-1)
        np.testing.assert_allclose(d_out, d_in, rtol=1e-9, atol=1e-9)

    def test_inverse_composition(self, rng):
        pts = rng.normal(size=(10, 3))
        a, b, g = rng.uniform(0, 2 * np.pi, 3)
        fwd = rotate(pts, a, b, g, origin=(0, 0, 0))
        # undo: inverse of Rz Ry Rx is Rx(-a) Ry(-b) Rz(-g), applied as separate steps
        back = rotate(fwd, 0, 0, -g, origin=(0, 0, 0))
        back = rotate(back, 0, -b, 0, origin=(0, 0, 0))
        back = rotate(back, -a, 0, 0, origin=(0, 0, 0))
        np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_default_origin_is_centroid(self, rng):
        pts = rng.normal(size=(15, 3)) + 5.0
        out = rotate(pts, 0.3, 0.2, 0.1)
        np.testing.assert_allclose(out.mean(axis=0), pts.mean(axis=0), atol=1e-9)


class TestMeshIO:
    @pytest.mark.parametrize("ext", ["off", "obj"])
    def test_round_trip(self, tmp_path, sphere_mesh, ext):
        path = tmp_path / f"m.{ext}"
        save_mesh(sphere_mesh, path)
        back = load_mesh(path)
        np.testing.assert_array_equal(back.triangles, sphere_mesh.triangles)
        np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, rtol=0, atol=0)

    def test_unsupported_format(self, tmp_path, sphere_mesh):
        with pytest.raises(ConfigError):
            save_mesh(sphere_mesh, tmp_path / "m.stl")

    def test_malformed_off(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n")
        with pytest.raises(InputError):
            load_mesh(path)


class TestEmitterIO:
    def test_csv_round_trip(self, tmp_path, rng):
        em = EmitterSet(rng.normal(size=(10, 3)) * 500, density=30.0, seed=4)
        path = tmp_path / "e.csv"
        save_emitters(em, path)
        back = load_emitters(path)
        np.testing.assert_allclose(back.positions, em.positions, rtol=0, atol=0)

    def test_binary_round_trip(self, tmp_path, rng):
        em = EmitterSet(rng.normal(size=(25, 3)) * 500, density=30.0, seed=4)
        path = tmp_path / "e.emit"
        save_emitters(em, path)
        back = load_emitters(path)
        np.testing.assert_array_equal(back.positions, em.positions)
        assert back.density == 30.0
        assert back.seed == 4

    def test_truncated_binary_rejected(self, tmp_path, rng):
        em = EmitterSet(rng.normal(size=(25, 3)), density=1.0)
        path = tmp_path / "e.emit"
        save_emitters(em, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(InputError):
            load_emitters(path)

    def test_corrupted_checksum_rejected(self, tmp_path, rng):
        em = EmitterSet(rng.normal(size=(5, 3)), density=1.0)
        path = tmp_path / "e.emit"
        save_emitters(em, path)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(InputError):
            load_emitters(path)
