import contextlib
import io
import os
import tempfile
import unittest

import pandas as pd

from knitply.main import main
from knitply.pattern import read_yarns
from knitply.plygen import read_plb
from knitply.validate import REPO_DATA

SMALL_SCENE = """
[scene]
mesh = {mesh}

[camera]
position = 0.08, 0.03, 0.15
look_at = 0.08, 0.08, 0.0
up = 0, 1, 0
fov = 45
width = 8
height = 6

[light.key]
corner = -0.05, -0.05, 0.3
edge_u = 0, 0.2, 0
edge_v = 0.2, 0, 0
radiance = 6, 6, 6

[environment]
type = constant
radiance = 0.05, 0.05, 0.05
"""


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


class TestCli(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.out, name)

    def test_tile_straight(self):
        code, stdout, _ = run('--output-dir', self.out, 'tile', os.path.join(REPO_DATA, 'patterns', 'straight.kcf'),
                              '-n', '3', '-m', '1')
        self.assertEqual(code, 0)
        yarns = read_yarns(self.path('yarns.yrn'))
        self.assertEqual(len(yarns), 1)
        self.assertEqual(yarns[0].vertex_count, 4)
        self.assertIn('1 yarns, 4 vertices', stdout)
        self.assertTrue(os.path.isfile(self.path('tile.effective.ini')))

    def test_missing_pattern(self):
        missing = os.path.join(self.out, 'nowhere.kcf')
        code, _, stderr = run('--output-dir', self.out, 'tile', missing)
        self.assertEqual(code, 2)
        self.assertIn(missing, stderr)
        self.assertIn("error in stage 'tile'", stderr)

    def test_usage_errors(self):
        for argv in (['unknown'], ['tile'], ['render', 'scene.ini', '--spp', 'many']):
            with self.assertRaises(SystemExit) as caught, contextlib.redirect_stderr(io.StringIO()):
                main(argv)
            self.assertEqual(caught.exception.code, 1)

    def test_missing_config(self):
        code, _, _ = run('--config', self.path('nope.ini'), '--output-dir', self.out, 'stats')
        self.assertEqual(code, 2)

    def test_bad_magic(self):
        with open(self.path('bad.plb'), 'wb') as f:
            f.write(b'NOPE' + bytes(16))
        code, _, stderr = run('--output-dir', self.out, 'map', '--mesh', os.path.join(REPO_DATA, 'meshes', 'quad.obj'),
                              '--plies', self.path('bad.plb'))
        self.assertEqual(code, 2)
        self.assertIn('bad magic', stderr)
        self.assertIn("stage 'map'", stderr)

    def test_pipeline(self):
        common = ['--output-dir', self.out, '--threads', '2', '--quiet']
        swatch = os.path.join(REPO_DATA, 'meshes', 'swatch.obj')
        self.assertEqual(run(*common, 'tile', os.path.join(REPO_DATA, 'patterns', 'stockinette.kcf'),
                             '-n', '2', '-m', '2')[0], 0)
        self.assertEqual(run(*common, 'plies', self.path('yarns.yrn'), '--num-plies', '2')[0], 0)
        plies = read_plb(self.path('plies.plb'))
        self.assertEqual({p.ply_index for p in plies}, {0, 1})
        self.assertEqual(run(*common, 'grid', '--mesh', swatch, '--plies', self.path('plies.plb'),
                             '--resolution', '24,24')[0], 0)
        self.assertEqual(run(*common, 'map', '--mesh', swatch, '--plies', self.path('plies.plb'),
                             '--grid', self.path('grid.mgb'))[0], 0)

        with open(self.path('scene.ini'), 'w') as f:
            f.write(SMALL_SCENE.format(mesh=swatch))
        renders = []
        for stem in ('first', 'second'):
            code, _, _ = run(*common, '--seed', '3', 'render', self.path('scene.ini'), '--plies',
                             self.path('mapped.plb'), '--grid', self.path('grid.mgb'), '--spp', '1', '-o', stem)
            self.assertEqual(code, 0)
            self.assertTrue(os.path.getsize(self.path(f"{stem}.png")) > 0)
            with open(self.path(f"{stem}.pfm"), 'rb') as f:
                renders.append(f.read())
        self.assertEqual(renders[0], renders[1])

        with open(self.path('fiber.ini'), 'w') as f:
            f.write("[fiber]\nshadow_depth = 1.0\namplitude = 0.6\n")
        code, _, _ = run('--config', self.path('fiber.ini'), *common, '--seed', '3', 'render', self.path('scene.ini'),
                         '--plies', self.path('mapped.plb'), '--grid', self.path('grid.mgb'), '--spp', '1',
                         '-o', 'shadowed')
        self.assertEqual(code, 0)
        with open(self.path('shadowed.pfm'), 'rb') as f:
            self.assertNotEqual(f.read(), renders[0])

        code, stdout, _ = run(*common, 'stats', '--yarns', self.path('yarns.yrn'), '--plies', self.path('plies.plb'),
                              '--grid', self.path('grid.mgb'), '--heatmap', 'heatmap.png')
        self.assertEqual(code, 0)
        self.assertIn('grid_segments', stdout)
        self.assertTrue(os.path.isfile(self.path('heatmap.png')))
        summary = pd.read_csv(self.path('stats.csv')).set_index('metric')['value']
        self.assertEqual(summary['segments'], summary['grid_segments'])

    def test_stats_heatmap_needs_grid(self):
        code, _, stderr = run('--output-dir', self.out, 'stats', '--heatmap', 'h.png')
        self.assertEqual(code, 2)
        self.assertIn("stage 'stats'", stderr)

    def test_validate(self):
        code, stdout, _ = run('--output-dir', self.out, '--quiet', 'validate', '--rays', '40', '--bsdf-draws', '1',
                              '--bsdf-samples', '20000', '--direct-samples', '200', '--furnace-spp', '2', '--nee-spp', '2',
                              '--render-size', '4')
        report = pd.read_csv(self.path('validation.csv'))
        self.assertEqual(len(report), 11)
        self.assertEqual(code, 0 if report['passed'].all() else 2)
        self.assertIn('stitch_conservation', stdout)


if __name__ == '__main__':
    unittest.main()
