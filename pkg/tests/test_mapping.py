import os
import tempfile
import unittest

import numpy as np

from knitply.errors import BadMagicError, EmptyMeshError, OverlappingChartError, UnmappedUVError
from knitply.mapping import (MappingGrid, build_grid, default_resolution, locate_many, locate_triangle,
                             locate_triangle_bruteforce, map_point, read_mapped, read_mgb, transform_plies,
                             write_mapped, write_mgb)
from knitply.mesh import BaseMesh, make_cylinder_mesh, make_icosphere, make_quad_mesh, make_random_chart_mesh
from knitply.plygen import PlyCurve


def cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def flat_ply(points, radius=0.01, normal=(0.0, 0.0, 1.0)):
    points = np.asarray(points, dtype=float)
    arclen = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))))
    return PlyCurve(points, np.tile(normal, (len(points), 1)), arclen, radius)


def wavy_ply(rng, count=40, radius=0.01):
    t = np.linspace(0, 1, count)
    start, end = rng.uniform(0.05, 0.95, 2), rng.uniform(0.05, 0.95, 2)
    uv = start + (end - start) * t[:, None]
    uv[:, 1] = np.clip(uv[:, 1] + 0.02 * np.sin(12 * t), 0.01, 0.99)
    h = 0.01 * np.cos(9 * t)
    return flat_ply(np.column_stack((uv, h)), radius)


class TestBuildGrid(unittest.TestCase):
    def test_quad_two_cells(self):
        mesh = make_quad_mesh()
        grid = build_grid(mesh, [flat_ply([[0.1, 0.25, 0], [0.9, 0.25, 0]])], (2, 2), margin=0.0)
        for cell in range(4):
            np.testing.assert_array_equal(grid.triangles_in(cell), [0, 1])
        self.assertEqual([len(grid.segments_in(c)) for c in range(4)], [1, 1, 0, 0])

    def test_segment_in_one_cell(self):
        grid = build_grid(make_quad_mesh(), [flat_ply([[0.6, 0.6, 0], [0.7, 0.8, 0]])], (2, 2), margin=0.0)
        self.assertEqual([len(grid.segments_in(c)) for c in range(4)], [0, 0, 0, 1])

    def test_default_resolution(self):
        self.assertEqual(default_resolution(2), (8, 8))
        self.assertEqual(default_resolution(200), (20, 20))
        self.assertEqual(default_resolution(10 ** 9), (4096, 4096))

    def test_conservative_triangles(self):
        rng = np.random.default_rng(1)
        mesh = make_random_chart_mesh(50, seed=1)
        plies = [flat_ply(np.column_stack((rng.uniform(0, 1, (2, 2)), np.zeros(2)))) for _ in range(500)]
        grid = build_grid(mesh, plies, (16, 16))
        self.assertEqual(grid.segment_count, 500)
        queries = rng.uniform(0, 1, (1000, 2))
        tri_uv = mesh.triangle_uvs()
        for query in queries:
            listed = set(grid.triangles_in(int(grid.lookup(query))).tolist())
            for k, (a, b, c) in enumerate(tri_uv):
                d = cross2(b - a, c - a)
                alpha = cross2(b - query, c - query) / d
                beta = cross2(c - query, a - query) / d
                if alpha >= 0 and beta >= 0 and 1 - alpha - beta >= 0:
                    self.assertIn(k, listed)

    def test_segments_listed_where_they_pass(self):
        rng = np.random.default_rng(2)
        plies = [wavy_ply(rng) for _ in range(5)]
        grid = build_grid(make_quad_mesh(), plies, (10, 10))
        segment = 0
        for ply in plies:
            for a, b in zip(ply.positions[:-1, :2], ply.positions[1:, :2]):
                for point in (a, b, (a + b) / 2):
                    self.assertIn(segment, grid.segments_in(int(grid.lookup(point))))
                segment += 1

    def test_empty_mesh(self):
        mesh = BaseMesh(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3)))
        with self.assertRaises(EmptyMeshError):
            build_grid(mesh, [])

    def test_overlapping_chart(self):
        positions = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, 0], [1.2, 0.2, 0], [0.2, 1.2, 0]], float)
        mesh = BaseMesh(positions, np.tile([0, 0, 1.0], (6, 1)), positions[:, :2], [[0, 1, 2], [3, 4, 5]])
        with self.assertRaises(OverlappingChartError):
            build_grid(mesh, [])

    def test_mgb_round_trip(self):
        rng = np.random.default_rng(3)
        grid = build_grid(make_random_chart_mesh(30, seed=4), [wavy_ply(rng) for _ in range(3)])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'grid.mgb')
            write_mgb(grid, path)
            loaded = read_mgb(path)
            with open(path, 'r+b') as f:
                f.write(b'MGB2')
            with self.assertRaises(BadMagicError):
                read_mgb(path)
        self.assertIsInstance(loaded, MappingGrid)
        self.assertEqual(loaded.resolution, grid.resolution)
        self.assertEqual(loaded.bounds, grid.bounds)
        self.assertEqual(loaded.segment_count, grid.segment_count)
        for name in ('tri_offsets', 'tri_indices', 'seg_offsets', 'seg_indices'):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(grid, name))


class TestLocate(unittest.TestCase):
    def setUp(self):
        self.mesh = make_random_chart_mesh(50, seed=5)
        self.grid = build_grid(self.mesh, [], (16, 16))

    def test_vertex(self):
        corner = self.mesh.uvs[self.mesh.triangles[0, 0]]
        triangle, bary = locate_triangle(self.grid, self.mesh, corner)
        self.assertEqual(triangle, 0)
        np.testing.assert_array_equal(bary, [1.0, 0.0, 0.0])

    def test_centroid(self):
        k = 7
        centroid = self.mesh.triangle_uvs()[k].mean(axis=0)
        triangle, bary = locate_triangle(self.grid, self.mesh, centroid)
        self.assertEqual(triangle, k)
        np.testing.assert_allclose(bary, [1 / 3] * 3, atol=1e-9)

    def test_matches_bruteforce(self):
        queries = np.random.default_rng(6).uniform(0, 1, (1000, 2))
        grid_tri, grid_bary = locate_many(self.grid, self.mesh, queries)
        brute_tri, brute_bary = locate_many(None, self.mesh, queries)
        np.testing.assert_array_equal(grid_tri, brute_tri)
        np.testing.assert_array_equal(grid_bary, brute_bary)
        self.assertTrue(np.all(grid_tri >= 0))
        triangle, bary = locate_triangle_bruteforce(self.mesh, queries[0])
        self.assertEqual(triangle, grid_tri[0])

    def test_outside_chart(self):
        with self.assertRaises(UnmappedUVError):
            locate_triangle(self.grid, self.mesh, [1.5, 0.5])


class TestMapPoint(unittest.TestCase):
    def test_flat_extrusion(self):
        mesh = make_quad_mesh()
        position, normal = map_point(mesh, 0, [0.2, 0.3, 0.5], 0.1)
        surface = 0.2 * mesh.positions[0] + 0.3 * mesh.positions[1] + 0.5 * mesh.positions[2]
        np.testing.assert_allclose(position, [surface[0], surface[1], 0.1])
        np.testing.assert_allclose(normal, [0, 0, 1])
        position, _ = map_point(mesh, 1, [0.2, 0.3, 0.5], 0.0)
        self.assertEqual(position[2], 0.0)

    def test_sphere_radius(self):
        mesh = make_icosphere(3)
        rng = np.random.default_rng(7)
        for _ in range(200):
            triangle = int(rng.integers(mesh.triangle_count))
            bary = rng.dirichlet([1, 1, 1])
            position, _ = map_point(mesh, triangle, bary, 0.05)
            corners = mesh.positions[mesh.triangles[triangle]]
            surface = bary @ corners
            self.assertAlmostEqual(np.linalg.norm(position), np.linalg.norm(surface) + 0.05, delta=2e-3)


class TestTransformPlies(unittest.TestCase):
    def test_identity_chart(self):
        rng = np.random.default_rng(8)
        plies = [wavy_ply(rng) for _ in range(4)]
        mesh = make_quad_mesh()
        mapped = transform_plies(build_grid(mesh, plies), mesh, plies, shell_base=0.0)
        for ply, result in zip(plies, mapped):
            np.testing.assert_allclose(result.positions, ply.positions, atol=1e-9)
            np.testing.assert_allclose(result.normals, ply.normals, atol=1e-9)
            np.testing.assert_allclose(result.arclen, ply.arclen, atol=1e-9)
            np.testing.assert_array_equal(result.uvh, ply.positions)

    def test_translated_chart(self):
        rng = np.random.default_rng(9)
        plies = [wavy_ply(rng) for _ in range(3)]
        shifted = [flat_ply(p.positions + [0.5, 0.25, 0.0]) for p in plies]
        identity = transform_plies(None, make_quad_mesh(), plies)
        mesh = make_quad_mesh(uv_offset=(0.5, 0.25))
        moved = transform_plies(build_grid(mesh, shifted), mesh, shifted)
        for a, b in zip(identity, moved):
            np.testing.assert_allclose(b.positions, a.positions, atol=1e-9)

    def test_shell_base_lifts(self):
        ply = flat_ply([[0.2, 0.5, 0.0], [0.8, 0.5, 0.0]])
        mapped, = transform_plies(None, make_quad_mesh(), [ply], shell_base=0.015)
        np.testing.assert_allclose(mapped.positions[:, 2], 0.015)

    def test_cylinder_stretch(self):
        radius, height = 0.5, 0.02
        mesh = make_cylinder_mesh(radius=radius, length=1.0, segments=128, rings=4)
        u = np.linspace(0.05, 0.95, 400)
        ply = flat_ply(np.column_stack((u, np.full_like(u, 0.5), np.full_like(u, height))))
        mapped, = transform_plies(build_grid(mesh, [ply]), mesh, [ply])
        expected = ply.arclen[-1] * 2 * np.pi * (radius + height)
        self.assertLess(abs(mapped.arclen[-1] - expected) / expected, 0.01)

    def test_grid_equals_bruteforce(self):
        rng = np.random.default_rng(10)
        mesh = make_random_chart_mesh(80, seed=11)
        plies = [wavy_ply(rng, count=200) for _ in range(20)]
        grid = build_grid(mesh, plies)
        fast = transform_plies(grid, mesh, plies, shell_base=0.02, threads=4)
        slow = transform_plies(None, mesh, plies, shell_base=0.02)
        for a, b in zip(fast, slow):
            np.testing.assert_array_equal(a.positions, b.positions)
            np.testing.assert_array_equal(a.normals, b.normals)
            np.testing.assert_array_equal(a.triangles, b.triangles)

    def test_unmapped_vertex(self):
        ply = flat_ply([[0.5, 0.5, 0], [0.9, 0.5, 0], [1.3, 0.5, 0]])
        mesh = make_quad_mesh()
        with self.assertRaises(UnmappedUVError) as ctx:
            transform_plies(build_grid(mesh, [ply]), mesh, [ply])
        self.assertEqual(ctx.exception.vertex_index, 2)
        self.assertEqual(ctx.exception.ply_index, 0)

    def test_wrapped_tiling_folds(self):
        mesh = make_quad_mesh()
        ply = flat_ply([[0.8, 0.5, 0], [1.1, 0.5, 0], [1.4, 0.5, 0]])
        mapped, = transform_plies(build_grid(mesh, [ply], uv_period=(1.0, 0.0)), mesh, [ply])
        np.testing.assert_allclose(mapped.positions[:, 0], [0.8, 0.1, 0.4], atol=1e-12)

    def test_mapped_files(self):
        rng = np.random.default_rng(12)
        plies = [wavy_ply(rng) for _ in range(3)]
        mapped = transform_plies(None, make_quad_mesh(), plies, shell_base=0.01)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'mapped.plb')
            write_mapped(mapped, path)
            loaded = read_mapped(path)
        self.assertEqual(len(loaded), 3)
        for a, b in zip(mapped, loaded):
            np.testing.assert_array_equal(a.uvh, b.uvh)
            np.testing.assert_array_equal(a.positions.astype(np.float32), b.positions)


if __name__ == '__main__':
    unittest.main()
