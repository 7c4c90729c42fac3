import os
import tempfile
import unittest

import numpy as np

from knitply.mapping import build_grid
from knitply.mesh import make_quad_mesh
from knitply.pattern import YarnCurve
from knitply.plygen import PlyCurve
from knitply.stats import occupancy_frame, render_heatmap, summarize


def flat_ply(points, radius=0.01):
    points = np.asarray(points, dtype=float)
    arclen = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))))
    return PlyCurve(points, np.tile([0.0, 0.0, 1.0], (len(points), 1)), arclen, radius)


class TestStats(unittest.TestCase):
    def setUp(self):
        self.plies = [flat_ply([[0.1, 0.25, 0], [0.3, 0.25, 0], [0.9, 0.25, 0]]),
                      flat_ply([[0.1, 0.75, 0], [0.4, 0.75, 0]], radius=0.02)]
        self.grid = build_grid(make_quad_mesh(), self.plies, (2, 2), margin=0.0)

    def test_occupancy(self):
        frame = occupancy_frame(self.grid)
        self.assertEqual(list(frame['segments']), [2, 1, 1, 0])
        self.assertEqual(list(frame['triangles']), [2, 2, 2, 2])
        self.assertEqual(list(zip(frame['i'], frame['j'])), [(0, 0), (1, 0), (0, 1), (1, 1)])

    def test_summary(self):
        yarns = [YarnCurve(np.zeros((4, 3)), False), YarnCurve(np.ones((3, 3)), True)]
        summary = summarize(yarns, self.plies, self.grid).set_index('metric')['value']
        self.assertEqual(summary['yarns'], 2)
        self.assertEqual(summary['closed_yarns'], 1)
        self.assertEqual(summary['yarn_vertices'], 7)
        self.assertEqual(summary['plies'], 2)
        self.assertEqual(summary['ply_vertices'], 5)
        self.assertEqual(summary['segments'], 3)
        self.assertEqual(summary['grid_segments'], 3)
        self.assertEqual(summary['occupied_cells'], 3)
        self.assertEqual(summary['segments_per_cell_max'], 2)
        self.assertAlmostEqual(summary['ply_radius_max'], 0.02)

    def test_partial_summary(self):
        summary = summarize(plies=self.plies)
        self.assertNotIn('yarns', set(summary['metric']))
        self.assertNotIn('grid_cells', set(summary['metric']))
        self.assertEqual(summarize().shape, (0, 2))

    def test_heatmap(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'heatmap.png')
            render_heatmap(self.grid, path)
            self.assertGreater(os.path.getsize(path), 0)


if __name__ == '__main__':
    unittest.main()
