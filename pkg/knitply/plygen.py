import concurrent.futures
import logging
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from knitply.errors import BadMagicError, DegenerateError, ParseError
from knitply.pattern import YarnCurve

logger = logging.getLogger(__name__)

PLB_MAGIC = b'PLB1'
# x, y, z, nx, ny, nz, arclen as little-endian float32
PLY_VERTEX = np.dtype([('position', '<f4', (3,)), ('normal', '<f4', (3,)), ('arclen', '<f4')])
PLY_HEADER = struct.Struct('<IIfI')


@dataclass(frozen=True)
class PlyParams:
    num_plies: int = 3
    ply_offset: float = 0.006
    ply_radius: float = 0.005
    twist_rate: float = 60.0
    resample_step: Optional[float] = None

    def __post_init__(self):
        if self.num_plies < 1:
            raise ValueError(f"num_plies must be >= 1, got {self.num_plies}")
        if self.ply_offset < 0:
            raise ValueError(f"ply_offset must be >= 0, got {self.ply_offset}")
        if self.ply_radius <= 0:
            raise ValueError(f"ply_radius must be > 0, got {self.ply_radius}")
        if self.resample_step is not None and self.resample_step <= 0:
            raise ValueError(f"resample_step must be > 0, got {self.resample_step}")

    @property
    def step(self) -> float:
        return self.resample_step if self.resample_step else self.ply_radius / 2.0


@dataclass(frozen=True)
class Frame:
    tangent: np.ndarray
    normal: np.ndarray
    binormal: np.ndarray

    def matrix(self) -> np.ndarray:
        """Columns are tangent, normal, binormal."""
        return np.column_stack((self.tangent, self.normal, self.binormal))


@dataclass
class PlyCurve:
    positions: np.ndarray
    normals: np.ndarray
    arclen: np.ndarray
    radius: float
    yarn_id: int = 0
    ply_index: int = 0

    @property
    def vertex_count(self) -> int:
        return len(self.positions)

    def tangents(self) -> np.ndarray:
        return central_tangents(self.positions)

    def records(self) -> np.ndarray:
        records = np.empty(self.vertex_count, dtype=PLY_VERTEX)
        records['position'] = self.positions
        records['normal'] = self.normals
        records['arclen'] = self.arclen
        return records

    @classmethod
    def from_records(cls, records: np.ndarray, radius: float, yarn_id: int, ply_index: int) -> 'PlyCurve':
        return cls(records['position'].astype(float), records['normal'].astype(float),
                   records['arclen'].astype(float), float(radius), yarn_id, ply_index)

    def __repr__(self):
        return f"PlyCurve(yarn_id={self.yarn_id}, ply_index={self.ply_index}, vertices={self.vertex_count})"


# ---------------------- Frames ---------------------- #
def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    return vectors / np.linalg.norm(vectors, axis=-1, keepdims=True)


def central_tangents(points: np.ndarray, closed: bool = False, closure_offset=None) -> np.ndarray:
    """
    Normalized central-difference tangents, one-sided at open ends.
    For closed polylines the neighbours wrap around, shifted by the closure offset.

    :raises DegenerateError: zero-length segment or a reversal that cancels the difference.
    """
    points = np.asarray(points, dtype=float)
    if len(points) < 2 and not closed:
        raise DegenerateError("Need at least 2 vertices for tangents")
    if closed:
        offset = np.zeros(3) if closure_offset is None else np.asarray(closure_offset, dtype=float)
        ahead = np.vstack((points[1:], points[:1] + offset))
        behind = np.vstack((points[-1:] - offset, points[:-1]))
        if np.any(np.linalg.norm(ahead - points, axis=1) == 0):
            raise DegenerateError("Zero-length segment in closed polyline")
        diff = ahead - behind
    else:
        seg = np.diff(points, axis=0)
        if np.any(np.linalg.norm(seg, axis=1) == 0):
            raise DegenerateError("Zero-length segment in polyline")
        diff = np.empty_like(points)
        diff[0] = seg[0]
        diff[-1] = seg[-1]
        diff[1:-1] = points[2:] - points[:-2]
    length = np.linalg.norm(diff, axis=1)
    if np.any(length < 1e-15):
        raise DegenerateError("Polyline reverses on itself; tangent undefined")
    return diff / length[:, None]


def default_initial_normal(tangent: np.ndarray) -> np.ndarray:
    """The world axis least aligned with the tangent, projected orthogonal to it."""
    axis = np.eye(3)[int(np.argmin(np.abs(tangent)))]
    normal = axis - np.dot(axis, tangent) * tangent
    return normal / np.linalg.norm(normal)


def rmf_arrays(points: np.ndarray, initial_normal: Optional[np.ndarray] = None, closed: bool = False,
               closure_offset=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Rotation minimizing frames by double reflection.

    :param points: (n, 3) polyline.
    :param initial_normal: Normal of the first frame; projected orthogonal to the first tangent.
    :param closed: Treat the polyline as periodic (closing segment ends at points[0] + closure_offset).
    :return: (tangents, normals, binormals), each (n, 3); binormal = tangent x normal.
    """
    points = np.asarray(points, dtype=float)
    tangents = central_tangents(points, closed, closure_offset)
    if initial_normal is None:
        initial_normal = default_initial_normal(tangents[0])
    r0 = np.asarray(initial_normal, dtype=float)
    r0 = r0 - np.dot(r0, tangents[0]) * tangents[0]
    if np.linalg.norm(r0) < 1e-9:
        raise DegenerateError("Initial normal is parallel to the first tangent")

    n = len(points)
    normals = np.empty_like(points)
    normals[0] = r0 / np.linalg.norm(r0)
    for i in range(n - 1):
        v1 = points[i + 1] - points[i]
        c1 = np.dot(v1, v1)
        r_l = normals[i] - (2.0 / c1) * np.dot(v1, normals[i]) * v1
        t_l = tangents[i] - (2.0 / c1) * np.dot(v1, tangents[i]) * v1
        v2 = tangents[i + 1] - t_l
        c2 = np.dot(v2, v2)
        r_next = r_l if c2 < 1e-30 else r_l - (2.0 / c2) * np.dot(v2, r_l) * v2
        # re-orthonormalize against the next tangent
        r_next = r_next - np.dot(r_next, tangents[i + 1]) * tangents[i + 1]
        normals[i + 1] = r_next / np.linalg.norm(r_next)

    if closed and n > 1:
        normals = _distribute_seam(points, tangents, normals, closure_offset)
    binormals = np.cross(tangents, normals)
    return tangents, normals, binormals


def _distribute_seam(points, tangents, normals, closure_offset):
    # transport the last frame across the closing segment and spread the mismatch over arc length
    offset = np.zeros(3) if closure_offset is None else np.asarray(closure_offset, dtype=float)
    v1 = points[0] + offset - points[-1]
    c1 = np.dot(v1, v1)
    r_l = normals[-1] - (2.0 / c1) * np.dot(v1, normals[-1]) * v1
    t_l = tangents[-1] - (2.0 / c1) * np.dot(v1, tangents[-1]) * v1
    v2 = tangents[0] - t_l
    c2 = np.dot(v2, v2)
    r_end = r_l if c2 < 1e-30 else r_l - (2.0 / c2) * np.dot(v2, r_l) * v2
    mismatch = np.arctan2(np.dot(np.cross(r_end, normals[0]), tangents[0]), np.dot(r_end, normals[0]))

    seg = np.linalg.norm(np.diff(np.vstack((points, points[:1] + offset)), axis=0), axis=1)
    s = np.concatenate(([0.0], np.cumsum(seg)))
    angles = mismatch * s[:-1] / s[-1]
    cos, sin = np.cos(angles)[:, None], np.sin(angles)[:, None]
    # Rodrigues rotation about each tangent; normals are orthogonal to their tangent
    rotated = normals * cos + np.cross(tangents, normals) * sin
    return _normalize_rows(rotated)


def rmf_frames(curve: Sequence, initial_normal: Optional[np.ndarray] = None, closed: bool = False,
               closure_offset=None) -> List[Frame]:
    tangents, normals, binormals = rmf_arrays(np.asarray(curve, dtype=float), initial_normal, closed, closure_offset)
    return [Frame(t, n, b) for t, n, b in zip(tangents, normals, binormals)]


# ---------------------- Ply generation ---------------------- #
def resample_polyline(points: np.ndarray, step: float, closure_offset=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Uniform arc-length resampling.

    :param points: (n, 3) polyline.
    :param step: Target spacing; the actual spacing is L / ceil(L / step).
    :param closure_offset: When given the polyline is closed through points[0] + closure_offset;
        the returned samples then exclude the closing point.
    :return: (samples, arc length of each sample)
    """
    points = np.asarray(points, dtype=float)
    line = points if closure_offset is None else np.vstack((points, points[:1] + closure_offset))
    seg = np.linalg.norm(np.diff(line, axis=0), axis=1)
    if np.any(seg == 0):
        raise DegenerateError("Zero-length segment in yarn curve")
    s = np.concatenate(([0.0], np.cumsum(seg)))
    total = s[-1]
    count = max(1, int(np.ceil(total / step)))
    targets = np.linspace(0.0, total, count + 1)
    samples = np.column_stack([np.interp(targets, s, line[:, k]) for k in range(3)])
    if closure_offset is not None:
        return samples[:-1], targets[:-1]
    return samples, targets


def generate_plies(yarn: YarnCurve, params: PlyParams, yarn_id: int = 0,
                   initial_normal: Optional[np.ndarray] = None) -> List[PlyCurve]:
    """
    Twists num_plies ply centerlines around a yarn curve.

    Ply k sits at c(s) + r_o (cos t n(s) + sin t b(s)) with t = 2 pi k / K + twist_rate * s,
    where (n, b) come from rotation minimizing frames along the resampled yarn.
    Closed yarns produce plies with an explicit closing vertex; the twist rate is rounded so
    that every ply meets its own start.
    """
    offset = yarn.closure_offset if yarn.closed else None
    if len(yarn.vertices) < 2 and not yarn.closed:
        raise DegenerateError(f"Yarn {yarn_id} has fewer than 2 vertices")
    centers, s = resample_polyline(yarn.vertices, params.step, offset)
    tangents, normals, binormals = rmf_arrays(centers, initial_normal, yarn.closed, offset)
    twist = params.twist_rate
    if yarn.closed:
        length = s[-1] + np.linalg.norm(centers[0] + offset - centers[-1])
        turns = np.round(twist * length / (2 * np.pi))
        twist = turns * 2 * np.pi / length
        centers = np.vstack((centers, centers[:1] + offset))
        tangents = np.vstack((tangents, tangents[:1]))
        normals = np.vstack((normals, normals[:1]))
        binormals = np.vstack((binormals, binormals[:1]))
        s = np.append(s, length)

    plies = []
    for k in range(params.num_plies):
        theta = 2 * np.pi * k / params.num_plies + twist * s
        radial = np.cos(theta)[:, None] * normals + np.sin(theta)[:, None] * binormals
        positions = centers + params.ply_offset * radial
        ply_tangents = central_tangents(positions)
        # radial is orthogonal to the yarn tangent; re-project against the ply's own tangent
        radial = radial - np.sum(radial * ply_tangents, axis=1)[:, None] * ply_tangents
        arclen = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(positions, axis=0), axis=1))))
        plies.append(PlyCurve(positions, _normalize_rows(radial), arclen, params.ply_radius, yarn_id, k))
    logger.debug(f"Yarn {yarn_id}: {len(centers)} samples, {params.num_plies} plies, twist {twist:.4g} rad/unit")
    return plies


def generate_all_plies(yarns: Sequence[YarnCurve], params: PlyParams, threads: int = 1) -> List[PlyCurve]:
    """Generates plies for every yarn in a worker pool; output is ordered by (yarn_id, ply_index)."""
    results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        futures = {executor.submit(generate_plies, yarn, params, yarn_id): yarn_id
                   for yarn_id, yarn in enumerate(yarns)}
        for future in concurrent.futures.as_completed(futures):
            results[futures[future]] = future.result()
    plies = [ply for yarn_id in sorted(results) for ply in results[yarn_id]]
    logger.info(f"Generated {len(plies)} plies from {len(yarns)} yarns "
                f"({sum(p.vertex_count for p in plies)} vertices)")
    return plies


# ---------------------- PLB file I/O ---------------------- #
def write_plb(plies: Sequence[PlyCurve], path: str) -> None:
    """
    PLB layout: b'PLB1', u32 ply count, then per ply `<IIfI` (yarn_id, ply_index, radius,
    vertex count) followed by the 28-byte vertex records.
    """
    with open(path, 'wb') as f:
        f.write(PLB_MAGIC)
        f.write(struct.pack('<I', len(plies)))
        for ply in plies:
            f.write(PLY_HEADER.pack(ply.yarn_id, ply.ply_index, ply.radius, ply.vertex_count))
            f.write(ply.records().tobytes())
    logger.info(f"Wrote {len(plies)} plies to '{path}'")


def read_plb(path: str, stage: str = 'map') -> List[PlyCurve]:
    if not os.path.exists(path):
        raise ParseError(f"PLB file not found: {path}", stage=stage)
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != PLB_MAGIC:
        raise BadMagicError(path, PLB_MAGIC, data[:4], stage=stage)
    try:
        count, = struct.unpack_from('<I', data, 4)
        pos = 8
        plies = []
        for _ in range(count):
            yarn_id, ply_index, radius, vertex_count = PLY_HEADER.unpack_from(data, pos)
            pos += PLY_HEADER.size
            records = np.frombuffer(data, dtype=PLY_VERTEX, count=vertex_count, offset=pos)
            pos += vertex_count * PLY_VERTEX.itemsize
            plies.append(PlyCurve.from_records(records, radius, yarn_id, ply_index))
    except (struct.error, ValueError) as e:
        raise ParseError(f"Truncated PLB file '{path}': {e}", stage=stage)
    if pos != len(data):
        raise ParseError(f"Trailing bytes in PLB file '{path}'", stage=stage)
    logger.info(f"Read {len(plies)} plies from '{path}'")
    return plies
