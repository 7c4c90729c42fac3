import logging
from typing import List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LEAF_SIZE = 4


def slab_test(lo: np.ndarray, hi: np.ndarray, origin: np.ndarray, inv_dir: np.ndarray, t_max: float):
    """Ray-AABB slab test. Works on single boxes or (n, 3) batches; returns (hit, t_near, t_far)."""
    with np.errstate(invalid='ignore'):
        t0 = (lo - origin) * inv_dir
        t1 = (hi - origin) * inv_dir
    # 0 * inf for axis-parallel rays on a slab plane
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    t_near = np.minimum(t0, t1).max(axis=-1)
    t_far = np.maximum(t0, t1).min(axis=-1)
    return (t_near <= t_far) & (t_far >= 0) & (t_near <= t_max), t_near, t_far


class Bvh:
    """
    Binary bounding volume hierarchy over axis-aligned boxes, stored as flat node arrays.
    Inner nodes split their items at the median centroid along the widest axis; leaves hold
    at most LEAF_SIZE items.

    :param lo: (n, 3) box minima.
    :param hi: (n, 3) box maxima.
    """

    def __init__(self, lo: np.ndarray, hi: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.item_lo = np.asarray(lo, dtype=float)
        self.item_hi = np.asarray(hi, dtype=float)
        self.leaf_size = leaf_size
        self.node_lo, self.node_hi, self.left, self.right, self.start, self.count = [], [], [], [], [], []
        self.order = np.arange(len(self.item_lo))
        if len(self.order):
            self._build(0, len(self.order))
        self.node_lo = np.asarray(self.node_lo).reshape(-1, 3)
        self.node_hi = np.asarray(self.node_hi).reshape(-1, 3)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.start = np.asarray(self.start, dtype=np.int64)
        self.count = np.asarray(self.count, dtype=np.int64)
        logger.debug(f"Built BVH with {len(self.left)} nodes over {len(self.order)} boxes")

    def _build(self, first: int, last: int) -> int:
        node = len(self.left)
        items = self.order[first:last]
        self.node_lo.append(self.item_lo[items].min(axis=0))
        self.node_hi.append(self.item_hi[items].max(axis=0))
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(first)
        self.count.append(last - first)
        if last - first <= self.leaf_size:
            return node
        centroids = 0.5 * (self.item_lo[items] + self.item_hi[items])
        axis = int(np.argmax(centroids.max(axis=0) - centroids.min(axis=0)))
        ranked = items[np.argsort(centroids[:, axis], kind='stable')]
        self.order[first:last] = ranked
        middle = (first + last) // 2
        self.count[node] = 0
        self.left[node] = self._build(first, middle)
        self.right[node] = self._build(middle, last)
        return node

    @property
    def node_count(self) -> int:
        return len(self.left)

    def traverse(self, origin: np.ndarray, direction: np.ndarray, t_max: float = np.inf) -> List[Tuple[int, float, float]]:
        """
        Items whose boxes the ray overlaps, as (item, t_near, t_far) sorted by t_near.
        """
        if not self.node_count:
            return []
        with np.errstate(divide='ignore'):
            inv_dir = 1.0 / np.asarray(direction, dtype=float)
        found = []
        stack = [0]
        while stack:
            node = stack.pop()
            hit, _, _ = slab_test(self.node_lo[node], self.node_hi[node], origin, inv_dir, t_max)
            if not hit:
                continue
            if self.left[node] < 0:
                items = self.order[self.start[node]:self.start[node] + self.count[node]]
                ok, t_near, t_far = slab_test(self.item_lo[items], self.item_hi[items], origin, inv_dir, t_max)
                found.extend(zip(items[ok].tolist(), t_near[ok].tolist(), t_far[ok].tolist()))
            else:
                stack.append(int(self.right[node]))
                stack.append(int(self.left[node]))
        found.sort(key=lambda entry: (entry[1], entry[0]))
        return found

    def __repr__(self):
        return f"Bvh(nodes={self.node_count}, items={len(self.order)})"
