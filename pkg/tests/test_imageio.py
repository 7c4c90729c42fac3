import os
import tempfile
import unittest

import numpy as np

from knitply.errors import ParseError
from knitply.imageio import box_downscale, from_srgb8, read_image, read_pfm, to_srgb8, write_pfm, write_png


class TestPfm(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'image.pfm')

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        image = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
        write_pfm(image, self.path)
        np.testing.assert_array_equal(read_pfm(self.path), image)

    def test_layout(self):
        image = np.zeros((2, 3, 3), dtype=np.float32)
        image[0, :, 0] = 1.0
        write_pfm(image, self.path)
        with open(self.path, 'rb') as f:
            data = f.read()
        self.assertTrue(data.startswith(b"PF\n3 2\n-1.0\n"))
        rows = np.frombuffer(data[len(b"PF\n3 2\n-1.0\n"):], dtype='<f4').reshape(2, 3, 3)
        # bottom-up: the top (red) row is stored last
        np.testing.assert_array_equal(rows[1, :, 0], 1.0)
        np.testing.assert_array_equal(rows[0], 0.0)

    def test_bad_magic(self):
        with open(self.path, 'wb') as f:
            f.write(b"Pf\n1 1\n-1.0\n" + b"\0" * 4)
        with self.assertRaises(ParseError):
            read_pfm(self.path)

    def test_truncated(self):
        with open(self.path, 'wb') as f:
            f.write(b"PF\n2 2\n-1.0\n" + b"\0" * 12)
        with self.assertRaises(ParseError):
            read_pfm(self.path)

    def test_missing(self):
        with self.assertRaises(ParseError):
            read_pfm(os.path.join(self.tmp.name, 'none.pfm'))


class TestSrgb(unittest.TestCase):
    def test_known_values(self):
        pixels = to_srgb8(np.array([[[0.0, 0.5, 1.0]]]))
        np.testing.assert_array_equal(pixels, [[[0, 188, 255]]])

    def test_exposure_and_clamp(self):
        np.testing.assert_array_equal(to_srgb8(np.array([[[0.25, 2.0, -1.0]]]), exposure=4.0), [[[255, 255, 0]]])

    def test_inverse(self):
        values = np.arange(256, dtype=np.uint8)
        np.testing.assert_array_equal(to_srgb8(from_srgb8(values)[None, :, None].repeat(3, axis=2))[0, :, 0], values)

    def test_png_round_trip(self):
        image = np.random.default_rng(1).random((4, 6, 3))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'image.png')
            write_png(image, path)
            decoded = read_image(path)
        self.assertEqual(decoded.shape, (4, 6, 3))
        np.testing.assert_allclose(to_srgb8(decoded), to_srgb8(image))


class TestDownscale(unittest.TestCase):
    def test_constant(self):
        image = np.full((20, 30, 3), 0.7)
        small = box_downscale(image, 0.1)
        self.assertEqual(small.shape, (2, 3, 3))
        np.testing.assert_allclose(small, 0.7)

    def test_block_means(self):
        image = np.arange(16, dtype=float).reshape(4, 4)
        np.testing.assert_allclose(box_downscale(image, 0.5), [[2.5, 4.5], [10.5, 12.5]])

    def test_uneven_preserves_mean(self):
        image = np.random.default_rng(2).random((10, 7, 3))
        small = box_downscale(image, 0.3)
        self.assertEqual(small.shape, (3, 2, 3))
        self.assertEqual(box_downscale(image, 0.01).shape, (1, 1, 3))
        np.testing.assert_allclose(box_downscale(image, 0.01)[0, 0], image.mean(axis=(0, 1)))


if __name__ == '__main__':
    unittest.main()
