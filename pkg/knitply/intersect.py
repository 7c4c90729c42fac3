"""
Ray queries against ply geometry. Every ply segment is a finite cylinder clipped by two cap
planes; at joints the cap plane is perpendicular to the average tangent of the adjacent segments
(a miter), at open ply ends it is perpendicular to the segment and closed by a disk.

All intersection math runs in double precision.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from knitply.errors import DegenerateError
from knitply.plygen import Frame, PlyCurve

logger = logging.getLogger(__name__)

LATERAL, CAP0_DISK, CAP1_DISK = 0, 1, 2


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class EllipseCap:
    center: np.ndarray
    plane_normal: np.ndarray

    def semi_axes(self, radius: float, axis: np.ndarray) -> Tuple[float, float]:
        """(semi-major, semi-minor) of the slice of a round cylinder by this plane."""
        return radius / abs(float(np.dot(self.plane_normal, axis))), radius


@dataclass(frozen=True)
class SegmentCylinder:
    p0: np.ndarray
    p1: np.ndarray
    radius: float
    cap0: EllipseCap
    cap1: EllipseCap
    frame0: Frame
    frame1: Frame
    arclen0: float
    arclen1: float
    open0: bool = False
    open1: bool = False
    ply_id: int = 0
    segment_id: int = 0

    @property
    def axis(self) -> np.ndarray:
        d = self.p1 - self.p0
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class RawHit:
    t: float
    position: np.ndarray
    geo_normal: np.ndarray
    segment_id: int = 0
    kind: int = LATERAL


@dataclass(frozen=True)
class HitRecord:
    t: float
    position: np.ndarray
    geo_normal: np.ndarray
    shading_frame: Frame
    reference_frame: Frame
    beta: float
    s: float
    lam: float
    ply_id: int
    segment_id: int
    kind: int = LATERAL


# ---------------------- Segment table ---------------------- #
def _orthogonalize(vectors: np.ndarray, against: np.ndarray) -> np.ndarray:
    v = vectors - np.sum(vectors * against, axis=-1, keepdims=True) * against
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class SegmentTable:
    """
    Structure-of-arrays view of every segment cylinder of a set of plies. Segment ids run over
    the plies in order, so they agree with the ids binned by the mapping grid.
    """

    def __init__(self, plies: Sequence[PlyCurve]):
        p0, p1, m0, m1, n0, n1, s0, s1 = [], [], [], [], [], [], [], []
        radius, ply_id, open0, open1, prev_id, next_id = [], [], [], [], [], []
        start = 0
        for index, ply in enumerate(plies):
            pos = np.asarray(ply.positions, dtype=float)
            seg = np.diff(pos, axis=0)
            length = np.linalg.norm(seg, axis=1)
            if len(seg) == 0 or np.any(length <= 0):
                raise DegenerateError(f"Ply {index} has a zero-length segment", stage='render')
            axis = seg / length[:, None]
            joint = axis[:-1] + axis[1:]
            joint_len = np.linalg.norm(joint, axis=1)
            if np.any(joint_len < 1e-9):
                raise DegenerateError(f"Ply {index} reverses direction at a joint", stage='render')
            caps = np.vstack((axis[:1], joint / joint_len[:, None], axis[-1:]))
            count = len(seg)
            p0.append(pos[:-1])
            p1.append(pos[1:])
            m0.append(caps[:-1])
            m1.append(caps[1:])
            record = np.asarray(ply.normals, dtype=float)
            n0.append(_orthogonalize(record[:-1], caps[:-1]))
            n1.append(_orthogonalize(record[1:], caps[1:]))
            s0.append(ply.arclen[:-1])
            s1.append(ply.arclen[1:])
            radius.append(np.full(count, ply.radius))
            ply_id.append(np.full(count, index))
            ids = np.arange(start, start + count)
            open0.append(ids == start)
            open1.append(ids == start + count - 1)
            prev_id.append(np.where(ids == start, -1, ids - 1))
            next_id.append(np.where(ids == start + count - 1, -1, ids + 1))
            start += count

        def stack(parts, shape):
            return np.concatenate(parts) if parts else np.zeros(shape)

        self.p0 = stack(p0, (0, 3))
        self.p1 = stack(p1, (0, 3))
        self.cap0 = stack(m0, (0, 3))
        self.cap1 = stack(m1, (0, 3))
        self.normal0 = stack(n0, (0, 3))
        self.normal1 = stack(n1, (0, 3))
        self.arclen0 = stack(s0, (0,))
        self.arclen1 = stack(s1, (0,))
        self.radius = stack(radius, (0,))
        self.ply_id = stack(ply_id, (0,)).astype(np.int64)
        self.open0 = stack(open0, (0,)).astype(bool)
        self.open1 = stack(open1, (0,)).astype(bool)
        self.prev_id = stack(prev_id, (0,)).astype(np.int64)
        self.next_id = stack(next_id, (0,)).astype(np.int64)
        delta = self.p1 - self.p0
        self.length = np.linalg.norm(delta, axis=1)
        self.axis = delta / self.length[:, None] if len(delta) else delta
        self.count = len(self.p0)
        logger.debug(f"Segment table: {self.count} segments from {len(plies)} plies")

    def __len__(self):
        return self.count

    def __repr__(self):
        return f"SegmentTable(segments={self.count})"

    def with_neighbors(self, ids: np.ndarray) -> np.ndarray:
        """ids plus their joint neighbours, unique and ascending."""
        ids = np.asarray(ids, dtype=np.int64)
        extra = np.concatenate((self.prev_id[ids], self.next_id[ids]))
        return np.unique(np.concatenate((ids, extra[extra >= 0])))

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        r = self.radius[:, None]
        lo = np.minimum(self.p0, self.p1) - r
        hi = np.maximum(self.p0, self.p1) + r
        return lo, hi

    def segment(self, k: int) -> SegmentCylinder:
        k = int(k)
        frame0 = Frame(self.cap0[k], self.normal0[k], np.cross(self.cap0[k], self.normal0[k]))
        frame1 = Frame(self.cap1[k], self.normal1[k], np.cross(self.cap1[k], self.normal1[k]))
        return SegmentCylinder(self.p0[k], self.p1[k], float(self.radius[k]),
                               EllipseCap(self.p0[k], self.cap0[k]), EllipseCap(self.p1[k], self.cap1[k]),
                               frame0, frame1, float(self.arclen0[k]), float(self.arclen1[k]),
                               bool(self.open0[k]), bool(self.open1[k]), int(self.ply_id[k]), k)

    # ---------------------- Vectorized kernel ---------------------- #
    def intersect_segments(self, origin: np.ndarray, direction: np.ndarray, ids: np.ndarray,
                           t_min: float = 0.0, t_max: float = np.inf) -> Tuple[float, int, int]:
        """
        Nearest front-facing hit among the given segments: the entering root of each cylinder
        clipped to its cap interval, plus entering hits on the disks closing open ply ends.

        :return: (t, segment id, kind); segment id -1 on a miss.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if not len(ids):
            return np.inf, -1, LATERAL
        o = np.asarray(origin, dtype=float)
        d = np.asarray(direction, dtype=float)
        p0, p1, a = self.p0[ids], self.p1[ids], self.axis[ids]
        m0, m1, r = self.cap0[ids], self.cap1[ids], self.radius[ids]

        w = o - p0
        da = a @ d
        wa = np.sum(w * a, axis=1)
        d_perp = d - da[:, None] * a
        w_perp = w - wa[:, None] * a
        qa = np.sum(d_perp * d_perp, axis=1)
        qb = 2.0 * np.sum(d_perp * w_perp, axis=1)
        qc = np.sum(w_perp * w_perp, axis=1) - r * r
        disc = qb * qb - 4.0 * qa * qc
        with np.errstate(divide='ignore', invalid='ignore'):
            root = np.sqrt(np.maximum(disc, 0.0))
            q = -0.5 * (qb + np.copysign(root, qb))
            t_enter = np.minimum(q / qa, np.where(q != 0, qc / q, np.inf))
        ok = (qa > 1e-300) & (disc >= 0) & (t_enter > t_min) & (t_enter < t_max)
        x = o + t_enter[:, None] * d
        ok &= np.sum((x - p0) * m0, axis=1) >= 0
        ok &= np.sum((x - p1) * m1, axis=1) <= 0
        t_lat = np.where(ok, t_enter, np.inf)

        t_cap0 = self._disk(o, d, p0, a, r, self.open0[ids] & (da > 0), t_min, t_max)
        t_cap1 = self._disk(o, d, p1, a, r, self.open1[ids] & (da < 0), t_min, t_max)

        stacked = np.stack((t_lat, t_cap0, t_cap1))
        best = np.unravel_index(np.argmin(stacked.T), (len(ids), 3))
        t = stacked[best[1], best[0]]
        if not np.isfinite(t):
            return np.inf, -1, LATERAL
        return float(t), int(ids[best[0]]), int(best[1])

    @staticmethod
    def _disk(o, d, center, normal, r, active, t_min, t_max):
        denom = normal @ d
        with np.errstate(divide='ignore', invalid='ignore'):
            t = np.sum((center - o) * normal, axis=1) / denom
        x = o + t[:, None] * d
        inside = np.sum((x - center) ** 2, axis=1) <= r * r
        ok = active & (denom != 0) & (t > t_min) & (t < t_max) & inside
        return np.where(ok, t, np.inf)

    def inside(self, points: np.ndarray, ids: Optional[np.ndarray] = None) -> np.ndarray:
        """Occupancy of the union of clipped cylinders at each point."""
        ids = np.arange(self.count) if ids is None else np.asarray(ids, dtype=np.int64)
        points = np.asarray(points, dtype=float)
        rel = points[:, None, :] - self.p0[ids][None]
        along = np.sum(rel * self.axis[ids][None], axis=2)
        radial = rel - along[..., None] * self.axis[ids][None]
        within = np.sum(radial * radial, axis=2) <= self.radius[ids][None] ** 2
        within &= np.sum(rel * self.cap0[ids][None], axis=2) >= 0
        within &= np.sum((points[:, None, :] - self.p1[ids][None]) * self.cap1[ids][None], axis=2) <= 0
        return within.any(axis=1)

    # ---------------------- Hit records ---------------------- #
    def hit_record(self, origin, direction, t: float, segment_id: int, kind: int = LATERAL) -> HitRecord:
        seg = self.segment(segment_id)
        position = np.asarray(origin, dtype=float) + t * np.asarray(direction, dtype=float)
        axis = seg.axis
        if kind == LATERAL:
            radial = position - (seg.p0 + np.dot(position - seg.p0, axis) * axis)
            geo_normal = radial / np.linalg.norm(radial)
            lam = surface_line_fraction(seg, position)
        else:
            geo_normal = -axis if kind == CAP0_DISK else axis
            lam = 0.0 if kind == CAP0_DISK else 1.0
        raw = RawHit(float(t), position, geo_normal, segment_id, kind)
        reference = interpolate_frame(seg, raw)
        shading = shading_frame(reference, geo_normal)
        beta = angular_phase(seg, raw, reference)
        s = seg.arclen0 + lam * (seg.arclen1 - seg.arclen0)
        return HitRecord(float(t), position, geo_normal, shading, reference, beta, float(s), float(lam),
                         seg.ply_id, segment_id, kind)


# ---------------------- Scalar operations ---------------------- #
def ray_cylinder(ray: Ray, seg: SegmentCylinder) -> Optional[RawHit]:
    """
    Nearest positive root of the infinite-cylinder quadratic lying between the two cap planes.
    Both roots are considered, so rays starting inside the ply report the exit point.
    """
    axis = seg.axis
    w = ray.origin - seg.p0
    d_perp = ray.direction - np.dot(ray.direction, axis) * axis
    w_perp = w - np.dot(w, axis) * axis
    qa = np.dot(d_perp, d_perp)
    if qa < 1e-300:
        return None
    qb = 2.0 * np.dot(d_perp, w_perp)
    qc = np.dot(w_perp, w_perp) - seg.radius ** 2
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0:
        return None
    root = np.sqrt(disc)
    q = -0.5 * (qb + np.copysign(root, qb))
    roots = sorted([q / qa, qc / q] if q != 0 else [0.0])
    for t in roots:
        if t <= 0:
            continue
        x = ray.at(t)
        if np.dot(x - seg.p0, seg.cap0.plane_normal) >= 0 and np.dot(x - seg.p1, seg.cap1.plane_normal) <= 0:
            center = seg.p0 + np.dot(x - seg.p0, axis) * axis
            normal = (x - center) / np.linalg.norm(x - center)
            return RawHit(float(t), x, normal, seg.segment_id)
    return None


def joint_trim(ray: Ray, raw: Optional[RawHit], seg: SegmentCylinder, neighbor: Optional[SegmentCylinder]) -> Optional[RawHit]:
    """
    Resolves a hit near the joint between seg and its neighbour: both cylinders are re-tested
    within their own cap intervals and the nearest valid hit wins.
    """
    candidates = [h for h in (raw if raw is not None and _within_caps(seg, raw.position) else None,
                              ray_cylinder(ray, seg),
                              ray_cylinder(ray, neighbor) if neighbor is not None else None) if h is not None]
    if not candidates:
        return None
    return min(candidates, key=lambda h: h.t)


def _within_caps(seg: SegmentCylinder, x: np.ndarray) -> bool:
    return (np.dot(x - seg.p0, seg.cap0.plane_normal) >= 0) and (np.dot(x - seg.p1, seg.cap1.plane_normal) <= 0)


def cap_boundary_normals(seg: SegmentCylinder) -> Tuple[Callable, Callable]:
    """
    For each cap, a function of the angular position phi of a surface line returning the point
    where that line meets the cap plane and the cylinder's radial normal there. Angles are measured
    from frame0's normal (made orthogonal to the axis) towards axis x normal.
    """
    axis = seg.axis
    e1 = seg.frame0.normal - np.dot(seg.frame0.normal, axis) * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)

    def make(cap: EllipseCap):
        def boundary(phi):
            phi = np.asarray(phi, dtype=float)
            radial = np.cos(phi)[..., None] * e1 + np.sin(phi)[..., None] * e2
            shift = -seg.radius * (radial @ cap.plane_normal) / np.dot(axis, cap.plane_normal)
            return cap.center + seg.radius * radial + shift[..., None] * axis, radial
        return boundary

    return make(seg.cap0), make(seg.cap1)


def surface_line_fraction(seg: SegmentCylinder, x: np.ndarray) -> float:
    """Fraction of the way from cap0 to cap1 along the surface line through x."""
    axis = seg.axis
    back = np.dot(x - seg.p0, seg.cap0.plane_normal) / np.dot(axis, seg.cap0.plane_normal)
    ahead = np.dot(seg.p1 - x, seg.cap1.plane_normal) / np.dot(axis, seg.cap1.plane_normal)
    total = back + ahead
    if total <= 0:
        return 0.0
    return float(np.clip(back / total, 0.0, 1.0))


def slerp(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    cos = float(np.clip(np.dot(a, b), -1.0, 1.0))
    omega = np.arccos(cos)
    if omega < 1e-9:
        v = (1 - lam) * a + lam * b
    else:
        sin = np.sin(omega)
        v = (np.sin((1 - lam) * omega) * a + np.sin(lam * omega) * b) / sin if sin > 1e-12 else (1 - lam) * a + lam * b
    norm = np.linalg.norm(v)
    return v / norm if norm > 1e-12 else a


def blend_frames(frame0: Frame, frame1: Frame, lam: float) -> Frame:
    """Spherical blend of two frames, re-orthonormalized with tangent priority."""
    tangent = slerp(frame0.tangent, frame1.tangent, lam)
    normal = slerp(frame0.normal, frame1.normal, lam)
    normal = normal - np.dot(normal, tangent) * tangent
    length = np.linalg.norm(normal)
    if length < 1e-12:
        normal = frame0.binormal - np.dot(frame0.binormal, tangent) * tangent
        length = np.linalg.norm(normal)
    normal /= length
    return Frame(tangent, normal, np.cross(tangent, normal))


def interpolate_frame(seg: SegmentCylinder, raw: RawHit) -> Frame:
    """Reference frame at a hit; disk hits on open ends take the end frame."""
    if raw.kind == CAP0_DISK:
        return seg.frame0
    if raw.kind == CAP1_DISK:
        return seg.frame1
    return blend_frames(seg.frame0, seg.frame1, surface_line_fraction(seg, raw.position))


def shading_frame(reference: Frame, geo_normal: np.ndarray) -> Frame:
    """Interpolated tangent with the geometric normal made orthogonal to it."""
    tangent = reference.tangent
    normal = geo_normal - np.dot(geo_normal, tangent) * tangent
    length = np.linalg.norm(normal)
    normal = normal / length if length > 1e-9 else reference.normal
    return Frame(tangent, normal, np.cross(tangent, normal))


def angular_phase(seg: SegmentCylinder, raw: RawHit, reference: Optional[Frame] = None) -> float:
    """Angle of the hit around the interpolated axis, measured from the reference normal towards its binormal."""
    if reference is None:
        reference = interpolate_frame(seg, raw)
    axis = seg.axis
    center = seg.p0 + np.dot(raw.position - seg.p0, axis) * axis
    d = raw.position - center
    return float(np.mod(np.arctan2(np.dot(d, reference.binormal), np.dot(d, reference.normal)), 2 * np.pi))


def normal_angle_phase(reference: Frame, geo_normal: np.ndarray) -> float:
    """Unsigned angle between the interpolated normal and the geometric normal, in [0, pi]."""
    return float(np.arccos(np.clip(np.dot(reference.normal, geo_normal), -1.0, 1.0)))


def march_first_hit(table: SegmentTable, origin, direction, t_max: float, step: float,
                    ids: Optional[np.ndarray] = None, refine: int = 40) -> Optional[float]:
    """
    Occupancy ray march over the union of clipped cylinders: the first sample inside the union,
    refined by bisection. Features thinner than `step` can be missed.
    """
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    ts = np.arange(0.0, t_max + step, step)
    chunk = 4096
    for start in range(0, len(ts), chunk):
        block = ts[start:start + chunk]
        occupied = table.inside(origin + block[:, None] * direction, ids)
        if occupied.any():
            k = int(np.argmax(occupied))
            if start + k == 0:
                return 0.0
            lo, hi = ts[start + k - 1], block[k]
            for _ in range(refine):
                mid = 0.5 * (lo + hi)
                if table.inside((origin + mid * direction)[None], ids)[0]:
                    hi = mid
                else:
                    lo = mid
            return float(hi)
    return None
