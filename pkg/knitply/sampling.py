"""
Random streams and sample warps for the path tracer.

Every pixel owns a counter-based Philox stream keyed by the render seed; the pixel index selects a
disjoint block of the counter space, so an image does not depend on how pixels are scheduled.
"""
from typing import Tuple

import numpy as np

PIXEL_STREAM_SHIFT = 128


class PixelSampler:
    """Uniform numbers for one pixel, drawn from its own Philox counter block."""

    def __init__(self, seed: int, pixel_index: int):
        self.seed = int(seed)
        self.pixel_index = int(pixel_index)
        bit_generator = np.random.Philox(key=self.seed, counter=self.pixel_index << PIXEL_STREAM_SHIFT)
        self.generator = np.random.Generator(bit_generator)

    def next_1d(self) -> float:
        return float(self.generator.random())

    def next_2d(self) -> Tuple[float, float]:
        u = self.generator.random(2)
        return float(u[0]), float(u[1])

    def __repr__(self):
        return f"PixelSampler(seed={self.seed}, pixel_index={self.pixel_index})"


# ---------------------- Warps ---------------------- #
def orthonormal_basis(n: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing n to a right-handed basis (s, t, n)."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    s = np.cross(helper, n)
    s /= np.linalg.norm(s)
    return s, np.cross(n, s)


def cosine_hemisphere(u: Tuple[float, float], n: np.ndarray) -> np.ndarray:
    s, t = orthonormal_basis(n)
    radius = np.sqrt(u[0])
    phi = 2 * np.pi * u[1]
    return radius * np.cos(phi) * s + radius * np.sin(phi) * t + np.sqrt(max(0.0, 1.0 - u[0])) * n


def cosine_hemisphere_pdf(w: np.ndarray, n: np.ndarray) -> float:
    return max(0.0, float(np.dot(w, n))) / np.pi


def balance_heuristic(pdf_a: float, pdf_b: float) -> float:
    total = pdf_a + pdf_b
    return pdf_a / total if total > 0 else 0.0


# ---------------------- Tabulated distributions ---------------------- #
class Distribution1D:
    """Piecewise-constant density over [0, 1) with CDF inversion."""

    def __init__(self, weights: np.ndarray):
        weights = np.asarray(weights, dtype=float)
        self.count = len(weights)
        # integral of the raw weights; an all-zero row keeps 0 here but samples uniformly
        self.integral = float(weights.sum()) / self.count
        if self.integral > 0:
            self.func, self._norm = weights, self.integral
        else:
            self.func, self._norm = np.ones(self.count), 1.0
        cdf = np.concatenate(([0.0], np.cumsum(self.func)))
        self.cdf = cdf / cdf[-1]

    def sample(self, u: float) -> Tuple[float, float, int]:
        """:return: (x in [0, 1), density at x, bin index)"""
        index = int(np.clip(np.searchsorted(self.cdf, u, side='right') - 1, 0, self.count - 1))
        width = self.cdf[index + 1] - self.cdf[index]
        offset = (u - self.cdf[index]) / width if width > 0 else 0.0
        return (index + offset) / self.count, self.func[index] / self._norm, index

    def pdf(self, x: float) -> float:
        index = int(np.clip(x * self.count, 0, self.count - 1))
        return float(self.func[index] / self._norm)


class Distribution2D:
    """Marginal over rows, conditional over columns; density over [0, 1)^2."""

    def __init__(self, weights: np.ndarray):
        weights = np.asarray(weights, dtype=float)
        self.rows = [Distribution1D(row) for row in weights]
        self.marginal = Distribution1D(np.array([row.integral for row in self.rows]))

    def sample(self, u: Tuple[float, float]) -> Tuple[float, float, float]:
        """:return: (x, y, density) where y picks the row and x the column."""
        y, pdf_y, row = self.marginal.sample(u[1])
        x, pdf_x, _ = self.rows[row].sample(u[0])
        return x, y, pdf_x * pdf_y

    def pdf(self, x: float, y: float) -> float:
        row = int(np.clip(y * len(self.rows), 0, len(self.rows) - 1))
        return self.marginal.pdf(y) * self.rows[row].pdf(x)
