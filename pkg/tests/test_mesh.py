import os
import tempfile
import unittest

import numpy as np

from knitply.errors import InvariantError, ParseError
from knitply.mesh import (BaseMesh, load_obj, make_cylinder_mesh, make_grid_mesh, make_icosphere, make_quad_mesh,
                          make_random_chart_mesh, write_obj)

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'data', 'meshes')


class TestObj(unittest.TestCase):
    def test_shipped_quad(self):
        mesh = load_obj(os.path.join(DATA_DIR, 'quad.obj'))
        self.assertEqual(mesh.triangle_count, 2)
        self.assertEqual(len(mesh.positions), 4)
        self.assertEqual(mesh.uv_bounds(), (0.0, 0.0, 1.0, 1.0))

    def test_fan_triangulation(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'poly.obj')
            with open(path, 'w') as f:
                f.write('# pentagon\n')
                for k in range(5):
                    angle = 2 * np.pi * k / 5
                    f.write(f'v {np.cos(angle)} {np.sin(angle)} 0\nvt {np.cos(angle)} {np.sin(angle)}\n')
                f.write('vn 0 0 2\n')
                f.write('f 1/1/1 2/2/1 3/3/1 4/4/1 5/5/1\n')
            mesh = load_obj(path)
        self.assertEqual(mesh.triangle_count, 3)
        np.testing.assert_array_equal(mesh.triangles, [[0, 1, 2], [0, 2, 3], [0, 3, 4]])
        # normals are normalized on load
        np.testing.assert_allclose(mesh.normals, np.tile([0, 0, 1.0], (5, 1)))

    def test_corners_unified(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'seam.obj')
            with open(path, 'w') as f:
                f.write('v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvt 0.5 0.5\nvn 0 0 1\n')
                f.write('f 1/1/1 2/2/1 3/3/1\nf 1/4/1 3/3/1 2/2/1\n')
            mesh = load_obj(path)
        # vertex 1 appears with two texture coordinates
        self.assertEqual(len(mesh.positions), 4)

    def test_missing_texcoord(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'bad.obj')
            with open(path, 'w') as f:
                f.write('v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n')
            with self.assertRaises(ParseError):
                load_obj(path)

    def test_write_read(self):
        mesh = make_grid_mesh(3, 2, height=lambda x, y: 0.1 * x * y)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'grid.obj')
            write_obj(mesh, path)
            loaded = load_obj(path)
        np.testing.assert_array_equal(loaded.positions, mesh.positions)
        np.testing.assert_array_equal(loaded.uvs, mesh.uvs)
        np.testing.assert_array_equal(loaded.triangles, mesh.triangles)
        np.testing.assert_allclose(loaded.normals, mesh.normals, atol=1e-15)


class TestProceduralMeshes(unittest.TestCase):
    def test_quad(self):
        mesh = make_quad_mesh(uv_offset=(0.5, 0.25))
        self.assertEqual(mesh.uv_bounds(), (0.5, 0.25, 1.5, 1.25))
        self.assertTrue(np.all(mesh.uv_areas() > 0))

    def test_cylinder(self):
        mesh = make_cylinder_mesh(radius=2.0, length=1.0, segments=16, rings=2)
        np.testing.assert_allclose(np.linalg.norm(mesh.positions[:, :2], axis=1), 2.0)
        self.assertEqual(mesh.uv_bounds(), (0.0, 0.0, 1.0, 1.0))
        self.assertTrue(np.all(mesh.uv_areas() > 0))

    def test_icosphere(self):
        mesh = make_icosphere(2)
        self.assertEqual(mesh.triangle_count, 320)
        np.testing.assert_allclose(np.linalg.norm(mesh.positions, axis=1), 1.0)

    def test_random_chart_orientation(self):
        mesh = make_random_chart_mesh(50, seed=3)
        self.assertTrue(np.all(mesh.uv_areas() > 0))

    def test_invalid_index(self):
        with self.assertRaises(InvariantError):
            BaseMesh(np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)), np.zeros((3, 2)), [[0, 1, 3]])


if __name__ == '__main__':
    unittest.main()
