import unittest

import numpy as np

from knitply.bvh import Bvh, slab_test


def random_boxes(rng, count):
    centers = rng.uniform(-1, 1, (count, 3))
    half = rng.uniform(0.01, 0.1, (count, 3))
    return centers - half, centers + half


class TestSlab(unittest.TestCase):
    def test_hit_and_miss(self):
        lo, hi = np.zeros(3), np.ones(3)
        origin = np.array([0.5, 0.5, -1.0])
        hit, t_near, t_far = slab_test(lo, hi, origin, 1.0 / np.array([1e-300, 1e-300, 1.0]), np.inf)
        self.assertTrue(hit)
        self.assertAlmostEqual(t_near, 1.0)
        self.assertAlmostEqual(t_far, 2.0)
        hit, _, _ = slab_test(lo, hi, origin, 1.0 / np.array([1e-300, 1e-300, -1.0]), np.inf)
        self.assertFalse(hit)

    def test_axis_parallel_on_face(self):
        # the ray runs inside the x = 0 face plane
        with np.errstate(divide='ignore'):
            inv = 1.0 / np.array([0.0, 0.0, 1.0])
        hit, _, _ = slab_test(np.zeros(3), np.ones(3), np.array([0.0, 0.5, -1.0]), inv, np.inf)
        self.assertTrue(hit)

    def test_t_max(self):
        inv = 1.0 / np.array([1e-300, 1e-300, 1.0])
        hit, _, _ = slab_test(np.zeros(3), np.ones(3), np.array([0.5, 0.5, -5.0]), inv, 2.0)
        self.assertFalse(hit)


class TestBvh(unittest.TestCase):
    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        lo, hi = random_boxes(rng, 300)
        bvh = Bvh(lo, hi)
        for _ in range(200):
            origin = rng.uniform(-2, 2, 3)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            with np.errstate(divide='ignore'):
                inv = 1.0 / direction
            expected, _, _ = slab_test(lo, hi, origin, inv, np.inf)
            found = bvh.traverse(origin, direction)
            self.assertEqual(sorted(item for item, _, _ in found), np.nonzero(expected)[0].tolist())
            nears = [t for _, t, _ in found]
            self.assertEqual(nears, sorted(nears))

    def test_structure(self):
        rng = np.random.default_rng(1)
        lo, hi = random_boxes(rng, 100)
        bvh = Bvh(lo, hi, leaf_size=4)
        self.assertEqual(sorted(bvh.order.tolist()), list(range(100)))
        leaves = bvh.left < 0
        self.assertEqual(int(bvh.count[leaves].sum()), 100)
        self.assertTrue(np.all(bvh.count[leaves] <= 4))
        # every node bounds its children
        for node in np.nonzero(~leaves)[0]:
            for child in (bvh.left[node], bvh.right[node]):
                self.assertTrue(np.all(bvh.node_lo[node] <= bvh.node_lo[child]))
                self.assertTrue(np.all(bvh.node_hi[node] >= bvh.node_hi[child]))

    def test_empty(self):
        bvh = Bvh(np.zeros((0, 3)), np.zeros((0, 3)))
        self.assertEqual(bvh.node_count, 0)
        self.assertEqual(bvh.traverse(np.zeros(3), np.array([0, 0, 1.0])), [])


if __name__ == '__main__':
    unittest.main()
