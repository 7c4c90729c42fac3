import unittest

import numpy as np

from knitply.sampling import (Distribution1D, Distribution2D, PixelSampler, balance_heuristic, cosine_hemisphere,
                              cosine_hemisphere_pdf, orthonormal_basis)


class TestPixelSampler(unittest.TestCase):
    def test_same_stream(self):
        a, b = PixelSampler(7, 123), PixelSampler(7, 123)
        self.assertEqual([a.next_1d() for _ in range(10)], [b.next_1d() for _ in range(10)])

    def test_streams_differ(self):
        first = [PixelSampler(7, k).next_1d() for k in range(50)]
        self.assertEqual(len(set(first)), 50)
        self.assertNotEqual(PixelSampler(7, 0).next_2d(), PixelSampler(8, 0).next_2d())

    def test_order_independent(self):
        forward = {k: PixelSampler(3, k).next_2d() for k in range(20)}
        backward = {k: PixelSampler(3, k).next_2d() for k in reversed(range(20))}
        self.assertEqual(forward, backward)

    def test_uniform_range(self):
        sampler = PixelSampler(0, 5)
        values = np.array([sampler.next_1d() for _ in range(2000)])
        self.assertTrue(np.all((values >= 0) & (values < 1)))
        self.assertAlmostEqual(values.mean(), 0.5, delta=0.03)


class TestWarps(unittest.TestCase):
    def test_basis(self):
        for n in (np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), np.array([1.0, 2.0, -3.0]) / np.sqrt(14)):
            s, t = orthonormal_basis(n)
            m = np.column_stack((s, t, n))
            np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-12)
            self.assertAlmostEqual(np.linalg.det(m), 1.0, places=12)

    def test_cosine_hemisphere_moments(self):
        rng = np.random.default_rng(0)
        n = np.array([0.0, 0.6, 0.8])
        w = np.array([cosine_hemisphere(u, n) for u in rng.random((20000, 2))])
        cos = w @ n
        self.assertTrue(np.all(cos >= 0))
        np.testing.assert_allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-12)
        # E[cos] = 2/3 under a cosine-weighted density
        self.assertAlmostEqual(cos.mean(), 2.0 / 3.0, delta=0.01)
        self.assertAlmostEqual(cosine_hemisphere_pdf(n, n), 1 / np.pi)
        self.assertEqual(cosine_hemisphere_pdf(-n, n), 0.0)

    def test_balance_heuristic(self):
        self.assertAlmostEqual(balance_heuristic(1.0, 3.0) + balance_heuristic(3.0, 1.0), 1.0)
        # linear in the pdfs, not squared
        self.assertAlmostEqual(balance_heuristic(1.0, 3.0), 0.25)
        self.assertEqual(balance_heuristic(0.0, 0.0), 0.0)


class TestDistributions(unittest.TestCase):
    def test_1d_density(self):
        weights = np.array([1.0, 3.0, 0.0, 4.0])
        dist = Distribution1D(weights)
        rng = np.random.default_rng(2)
        bins = np.zeros(4)
        for u in rng.random(40000):
            x, pdf, index = dist.sample(u)
            self.assertAlmostEqual(pdf, dist.pdf(x))
            bins[index] += 1
        np.testing.assert_allclose(bins / bins.sum(), weights / weights.sum(), atol=0.01)
        self.assertEqual(bins[2], 0)

    def test_1d_integral(self):
        dist = Distribution1D(np.array([2.0, 1.0, 5.0]))
        xs = (np.arange(300) + 0.5) / 300
        self.assertAlmostEqual(np.mean([dist.pdf(x) for x in xs]), 1.0, places=9)

    def test_1d_all_zero(self):
        dist = Distribution1D(np.zeros(5))
        self.assertEqual(dist.integral, 0.0)
        x, pdf, _ = dist.sample(0.3)
        self.assertAlmostEqual(x, 0.3)
        self.assertAlmostEqual(pdf, 1.0)

    def test_2d_skips_empty_rows(self):
        weights = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 2.0]])
        dist = Distribution2D(weights)
        rng = np.random.default_rng(3)
        for u in rng.random((2000, 2)):
            x, y, pdf = dist.sample(u)
            self.assertNotEqual(int(y * 3), 1)
            self.assertGreater(pdf, 0)
            self.assertAlmostEqual(pdf, dist.pdf(x, y))

    def test_2d_integral(self):
        rng = np.random.default_rng(4)
        dist = Distribution2D(rng.random((6, 9)))
        xs = (np.arange(90) + 0.5) / 90
        ys = (np.arange(60) + 0.5) / 60
        total = np.mean([[dist.pdf(x, y) for x in xs] for y in ys])
        self.assertAlmostEqual(total, 1.0, places=9)


if __name__ == '__main__':
    unittest.main()
