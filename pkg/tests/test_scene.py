import os
import tempfile
import unittest

import numpy as np

from knitply.errors import InvariantError, ParseError
from knitply.mapping import build_grid, transform_plies, write_mapped, write_mgb
from knitply.mesh import make_cylinder_mesh, make_quad_mesh, write_obj
from knitply.plygen import PlyCurve
from knitply.scene import (AreaLight, Camera, Environment, Scene, ShellPrisms, build_swatch_scene, load_scene,
                           shell_bounds)
from knitply.shading import BsdfParams, FiberTexture
from knitply.validate import swatch_plies


def straight_ply(y=0.5, h=0.02, radius=0.01, count=17):
    points = np.column_stack((np.linspace(0.1, 0.9, count), np.full(count, y), np.full(count, h)))
    arclen = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))))
    return PlyCurve(points, np.tile([0.0, 0.0, 1.0], (count, 1)), arclen, radius)


def straight_parts():
    mesh = make_quad_mesh()
    plies = [straight_ply()]
    grid = build_grid(mesh, plies, (16, 16))
    return mesh, grid, transform_plies(grid, mesh, plies)


def overhead_camera(width=8, height=8):
    return Camera(np.array([0.5, 0.5, 0.5]), np.array([0.5, 0.5, 0.0]), np.array([0.0, 1.0, 0.0]), 30.0, width, height)


SCENE_INI = """
[scene]
mesh = quad.obj
plies = mapped.plb
grid = grid.mgb

[camera]
position = 0.5, 0.5, 0.5
look_at = 0.5, 0.5, 0.0
up = 0, 1, 0
fov = 30
width = 8
height = 6

[light.key]
corner = 0.0, 0.0, 1.0
edge_u = 0, 1, 0
edge_v = 1, 0, 0
radiance = 4, 4, 4

[environment]
type = constant
radiance = 0.1, 0.2, 0.3

[fiber]
fiber_count = 8
shadow_depth = 0.0

[bsdf]
albedo_r = 0.5
spec_weight = 0.1
"""


class TestShellPrisms(unittest.TestCase):
    def setUp(self):
        self.prisms = ShellPrisms(make_quad_mesh(), -0.1, 0.2)

    def test_vertical_clip(self):
        hit, t_in, t_out = self.prisms.clip(np.array([0, 1]), np.array([0.7, 0.2, 1.0]), np.array([0.0, 0.0, -1.0]))
        # (0.7, 0.2) lies in triangle 0 only
        np.testing.assert_array_equal(hit, [True, False])
        self.assertAlmostEqual(t_in[0], 0.8, places=6)
        self.assertAlmostEqual(t_out[0], 1.1, places=6)

    def test_contains(self):
        inside = self.prisms.contains(np.array([[0.7, 0.2, 0.0], [0.7, 0.2, 0.19], [0.7, 0.2, 0.25], [0.2, 0.7, -0.05]]))
        np.testing.assert_array_equal(inside, [[True, False], [True, False], [False, False], [False, True]])

    def test_flat_uv(self):
        np.testing.assert_allclose(self.prisms.surface_uv(0, np.array([0.7, 0.2, 0.13])), [0.7, 0.2], atol=1e-12)
        uvs = self.prisms.surface_uv(1, np.array([[0.1, 0.6, 0.0], [0.3, 0.9, -0.05]]))
        np.testing.assert_allclose(uvs, [[0.1, 0.6], [0.3, 0.9]], atol=1e-12)

    def test_curved_uv(self):
        mesh = make_cylinder_mesh(segments=32)
        prisms = ShellPrisms(mesh, -0.05, 0.05)
        rng = np.random.default_rng(0)
        for triangle in rng.integers(0, mesh.triangle_count, 20):
            bary = rng.dirichlet((2.0, 2.0, 2.0))
            tri = mesh.triangles[triangle]
            normal = bary @ mesh.normals[tri]
            normal /= np.linalg.norm(normal)
            point = bary @ mesh.positions[tri] + 0.04 * normal
            np.testing.assert_allclose(prisms.surface_uv(int(triangle), point), bary @ mesh.uvs[tri], atol=1e-4)

    def test_flat_bounds(self):
        with self.assertRaises(InvariantError):
            ShellPrisms(make_quad_mesh(), 0.1, 0.1)

    def test_bvh_covers_prisms(self):
        self.assertEqual(len(self.prisms), 2)
        found = self.prisms.bvh.traverse(np.array([0.7, 0.2, 1.0]), np.array([0.0, 0.0, -1.0]))
        self.assertIn(0, [item for item, _, _ in found])


class TestShellBounds(unittest.TestCase):
    def test_straight_ply(self):
        mesh, grid, plies = straight_parts()
        h_min, h_max = shell_bounds(mesh, grid, plies)
        self.assertAlmostEqual(h_min, 0.0, places=9)
        self.assertAlmostEqual(h_max, 0.04, places=9)

    def test_swatch_covers_surface_points(self):
        scene = build_swatch_scene(swatch_plies(n=2, m=2), resolution=(32, 32))
        h_min, h_max = scene.shell
        radius = scene.max_radius
        for ply in scene.plies:
            h = ply.positions[:, 2]
            self.assertTrue(np.all(h - radius >= h_min))
            self.assertTrue(np.all(h + radius <= h_max))


class TestLights(unittest.TestCase):
    def setUp(self):
        self.light = AreaLight(np.array([-0.5, -0.5, 2.0]), np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]),
                               np.array([2.0, 2.0, 2.0]))

    def test_geometry(self):
        np.testing.assert_allclose(self.light.normal, [0, 0, -1])
        self.assertAlmostEqual(self.light.area, 1.0)
        self.assertAlmostEqual(self.light.intersect(np.zeros(3), np.array([0, 0, 1.0])), 2.0)
        self.assertIsNone(self.light.intersect(np.zeros(3), np.array([0, 0, -1.0])))
        self.assertIsNone(self.light.intersect(np.array([2.0, 0, 0]), np.array([0, 0, 1.0])))
        self.assertIsNone(self.light.intersect(np.zeros(3), np.array([0, 0, 1.0]), t_max=1.5))

    def test_one_sided(self):
        np.testing.assert_array_equal(self.light.emitted(np.array([0, 0, 1.0])), [2, 2, 2])
        np.testing.assert_array_equal(self.light.emitted(np.array([0, 0, -1.0])), [0, 0, 0])

    def test_sample_pdf(self):
        rng = np.random.default_rng(0)
        reference = np.array([0.1, -0.2, 0.0])
        for u in rng.random((50, 2)):
            w, dist, pdf, radiance = self.light.sample(u, reference)
            self.assertAlmostEqual(self.light.pdf(reference, w), pdf, places=9)
            self.assertAlmostEqual(self.light.intersect(reference, w), dist, places=9)

    def test_solid_angle(self):
        # E[1 / pdf] over light samples is the solid angle subtended by the quad
        rng = np.random.default_rng(1)
        estimate = np.mean([1.0 / self.light.sample(u, np.zeros(3))[2] for u in rng.random((20000, 2))])
        a, b, d = 0.5, 0.5, 2.0
        exact = 4 * np.arcsin(a * b / np.sqrt((a * a + d * d) * (b * b + d * d)))
        self.assertAlmostEqual(estimate, exact, delta=0.01 * exact)


class TestEnvironment(unittest.TestCase):
    def test_constant(self):
        env = Environment((0.5, 1.0, 2.0))
        n = np.array([0.0, 0.0, 1.0])
        w, pdf, radiance = env.sample((0.3, 0.7), n)
        self.assertGreaterEqual(w @ n, 0)
        self.assertAlmostEqual(pdf, env.pdf(w, n))
        np.testing.assert_array_equal(radiance, [0.5, 1.0, 2.0])
        np.testing.assert_array_equal(env.eval(-n), [0.5, 1.0, 2.0])

    def test_latlong_lookup(self):
        image = np.zeros((4, 8, 3))
        image[0] = 1.0
        env = Environment(image=image, scale=2.0)
        np.testing.assert_allclose(env.eval(np.array([0.0, 0.0, 1.0])), 2.0)
        np.testing.assert_allclose(env.eval(np.array([0.0, 0.0, -1.0])), 0.0)
        # +y is a quarter turn in azimuth: column 2 of 8
        image = np.zeros((4, 8, 3))
        image[2, 2] = 1.0
        env = Environment(image=image)
        w = np.array([0.0, np.cos(0.1), -np.sin(0.1)])
        np.testing.assert_allclose(env.eval(w), 1.0)

    def test_latlong_sampling(self):
        rng = np.random.default_rng(2)
        image = rng.random((8, 16, 3)) + 0.1
        env = Environment(image=image)
        n = np.array([0.0, 0.0, 1.0])
        for u in rng.random((100, 2)):
            w, pdf, radiance = env.sample(u, n)
            self.assertAlmostEqual(np.linalg.norm(w), 1.0)
            self.assertAlmostEqual(pdf, env.pdf(w, n), places=6)
            np.testing.assert_allclose(radiance, env.eval(w))

    def test_latlong_pdf_integrates(self):
        env = Environment(image=np.random.default_rng(3).random((8, 16, 3)) + 0.1)
        n_theta, n_phi = 200, 400
        theta = (np.arange(n_theta) + 0.5) / n_theta * np.pi
        phi = (np.arange(n_phi) + 0.5) / n_phi * 2 * np.pi
        total = 0.0
        for t in theta:
            for p in phi[::4]:
                w = np.array([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)])
                total += env.pdf(w, None) * np.sin(t)
        total *= (np.pi / n_theta) * (2 * np.pi / (n_phi / 4))
        self.assertAlmostEqual(total, 1.0, delta=0.02)


class TestCamera(unittest.TestCase):
    def test_center_and_fov(self):
        camera = Camera(np.zeros(3), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), 60.0, 4, 2)
        origin, direction = camera.generate_ray(2, 1, (0.0, 0.0))
        np.testing.assert_allclose(direction, [0, 1, 0], atol=1e-12)
        _, top = camera.generate_ray(2, 0, (0.0, 0.0))
        self.assertAlmostEqual(np.degrees(np.arccos(top @ [0, 1, 0])), 30.0, places=9)
        self.assertGreater(top[2], 0)
        _, right = camera.generate_ray(3, 1, (1.0, 0.0))
        self.assertGreater(right[0], 0)
        # square pixels: the horizontal half-angle follows the aspect ratio
        self.assertAlmostEqual(right[0] / right[1], 2 * np.tan(np.radians(30.0)), places=9)


class TestScene(unittest.TestCase):
    def test_needs_light(self):
        mesh, grid, plies = straight_parts()
        with self.assertRaises(InvariantError):
            Scene(mesh, grid, plies, overhead_camera())

    def test_grid_mismatch(self):
        mesh, grid, plies = straight_parts()
        with self.assertRaises(InvariantError):
            Scene(mesh, grid, plies + plies, overhead_camera(), environment=Environment())

    def test_with_bsdf_shares_geometry(self):
        mesh, grid, plies = straight_parts()
        scene = Scene(mesh, grid, plies, overhead_camera(), environment=Environment())
        other = scene.with_bsdf(scene.bsdf.replace(albedo_r=0.1))
        self.assertIs(other.table, scene.table)
        self.assertEqual(other.bsdf.albedo[0], 0.1)
        self.assertNotEqual(scene.bsdf.albedo[0], 0.1)


class TestLoadScene(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        mesh, grid, plies = straight_parts()
        write_obj(mesh, self.path('quad.obj'))
        write_mgb(grid, self.path('grid.mgb'))
        write_mapped(plies, self.path('mapped.plb'))

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def write(self, text):
        with open(self.path('scene.ini'), 'w', encoding='utf-8') as f:
            f.write(text)
        return self.path('scene.ini')

    def test_load(self):
        scene = load_scene(self.write(SCENE_INI))
        self.assertEqual(len(scene.plies), 1)
        self.assertEqual(len(scene.lights), 1)
        self.assertEqual(scene.lights[0].name, 'key')
        np.testing.assert_allclose(scene.environment.eval(np.array([0, 0, 1.0])), [0.1, 0.2, 0.3])
        self.assertEqual((scene.camera.width, scene.camera.height), (8, 6))
        self.assertEqual(scene.fiber.fiber_count, 8)
        self.assertEqual(scene.bsdf.albedo[0], 0.5)
        self.assertEqual(scene.bsdf.spec_weight, 0.1)

    def test_overrides(self):
        text = SCENE_INI.replace('plies = mapped.plb', 'plies =')
        with self.assertRaises(ParseError):
            load_scene(self.write(text))
        scene = load_scene(self.write(text), {'plies': self.path('mapped.plb')})
        self.assertEqual(len(scene.table), 16)

    def test_sections_layer_over_defaults(self):
        fiber = FiberTexture(fiber_count=4, amplitude=0.1, shadow_depth=0.9)
        bsdf = BsdfParams((0.2, 0.2, 0.2), 0.3, 0.1)
        bare = SCENE_INI.split('[fiber]')[0]
        scene = load_scene(self.write(bare), bsdf=bsdf, fiber=fiber)
        self.assertEqual(scene.fiber, fiber)
        self.assertEqual(scene.bsdf, bsdf)
        scene = load_scene(self.write(SCENE_INI), bsdf=bsdf, fiber=fiber)
        self.assertEqual((scene.fiber.fiber_count, scene.fiber.amplitude, scene.fiber.shadow_depth), (8, 0.1, 0.0))
        self.assertEqual(scene.bsdf.albedo, (0.5, 0.2, 0.2))
        self.assertEqual((scene.bsdf.spec_weight, scene.bsdf.trans_weight), (0.1, 0.1))

    def test_bad_entries(self):
        with self.assertRaises(ParseError):
            load_scene(self.write(SCENE_INI.replace('type = constant', 'type = sky')))
        with self.assertRaises(ParseError):
            load_scene(self.write(SCENE_INI.replace('position = 0.5, 0.5, 0.5', 'position = 0.5, 0.5')))
        with self.assertRaises(ParseError):
            load_scene(self.path('missing.ini'))


if __name__ == '__main__':
    unittest.main()
