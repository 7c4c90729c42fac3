import concurrent.futures
import logging
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from knitply.errors import (BadMagicError, DegenerateError, DegenerateNormalError, EmptyMeshError,
                            OverlappingChartError, ParseError, UnmappedUVError)
from knitply.mesh import BaseMesh
from knitply.plygen import PlyCurve, read_plb, write_plb

logger = logging.getLogger(__name__)

MGB_MAGIC = b'MGB1'
MGB_HEADER = struct.Struct('<II4d2ddI')
EPS_BARY = 1e-9
MIN_RESOLUTION = 8
MAX_RESOLUTION = 4096


@dataclass
class MappedPly(PlyCurve):
    """A ply on the base geometry. uvh keeps the texture-space (u, v, h) of every vertex."""
    uvh: Optional[np.ndarray] = None
    triangles: Optional[np.ndarray] = None

    def __repr__(self):
        return f"MappedPly(yarn_id={self.yarn_id}, ply_index={self.ply_index}, vertices={self.vertex_count})"


@dataclass
class MappingGrid:
    """
    Uniform UV grid. Cell (i, j) has index j * Gu + i; per cell the triangle and segment lists
    are stored CSR-style and sorted ascending.
    """
    resolution: Tuple[int, int]
    bounds: Tuple[float, float, float, float]
    tri_offsets: np.ndarray
    tri_indices: np.ndarray
    seg_offsets: np.ndarray
    seg_indices: np.ndarray
    uv_period: Tuple[float, float] = (0.0, 0.0)
    margin: float = 0.0
    segment_count: int = 0

    @property
    def cell_count(self) -> int:
        return self.resolution[0] * self.resolution[1]

    @property
    def cell_size(self) -> Tuple[float, float]:
        u0, v0, u1, v1 = self.bounds
        return (u1 - u0) / self.resolution[0], (v1 - v0) / self.resolution[1]

    def cell_ij(self, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        uv = np.asarray(uv, dtype=float)
        u0, v0, _, _ = self.bounds
        cw, ch = self.cell_size
        i = np.clip(np.floor((uv[..., 0] - u0) / cw), 0, self.resolution[0] - 1).astype(np.int64)
        j = np.clip(np.floor((uv[..., 1] - v0) / ch), 0, self.resolution[1] - 1).astype(np.int64)
        return i, j

    def lookup(self, uv) -> np.ndarray:
        """Cell index of every uv; points outside the bounds are clamped to the border cells."""
        i, j = self.cell_ij(uv)
        return j * self.resolution[0] + i

    def triangles_in(self, cell: int) -> np.ndarray:
        return self.tri_indices[self.tri_offsets[cell]:self.tri_offsets[cell + 1]]

    def segments_in(self, cell: int) -> np.ndarray:
        return self.seg_indices[self.seg_offsets[cell]:self.seg_offsets[cell + 1]]

    def fold(self, uv: np.ndarray) -> np.ndarray:
        return fold_uv(uv, self.bounds, self.uv_period)

    def __repr__(self):
        return (f"MappingGrid(resolution={self.resolution}, triangles={len(self.tri_indices)}, "
                f"segments={len(self.seg_indices)})")


def fold_uv(uv: np.ndarray, bounds, uv_period) -> np.ndarray:
    """Folds texture UVs of a wrapped tiling back into the chart."""
    uv = np.array(uv, dtype=float, copy=True)
    for axis in (0, 1):
        period = uv_period[axis] if uv_period else 0.0
        if period > 0:
            origin = bounds[axis]
            uv[..., axis] = origin + np.mod(uv[..., axis] - origin, period)
    return uv


def default_resolution(triangle_count: int) -> Tuple[int, int]:
    g = int(np.clip(np.ceil(np.sqrt(2.0 * triangle_count)), MIN_RESOLUTION, MAX_RESOLUTION))
    return g, g


# ---------------------- Grid construction ---------------------- #
def _bin_boxes(boxes: np.ndarray, items: np.ndarray, bounds, resolution) -> Tuple[np.ndarray, np.ndarray]:
    """
    Conservative binning of UV boxes (K, 4) = (u_min, v_min, u_max, v_max) into CSR lists.
    Boxes entirely outside the bounds are dropped.
    """
    gu, gv = resolution
    u0, v0, u1, v1 = bounds
    cw, ch = (u1 - u0) / gu, (v1 - v0) / gv
    inside = (boxes[:, 2] >= u0) & (boxes[:, 0] <= u1) & (boxes[:, 3] >= v0) & (boxes[:, 1] <= v1)
    boxes, items = boxes[inside], items[inside]
    i0 = np.clip(np.floor((boxes[:, 0] - u0) / cw), 0, gu - 1).astype(np.int64)
    i1 = np.clip(np.floor((boxes[:, 2] - u0) / cw), 0, gu - 1).astype(np.int64)
    j0 = np.clip(np.floor((boxes[:, 1] - v0) / ch), 0, gv - 1).astype(np.int64)
    j1 = np.clip(np.floor((boxes[:, 3] - v0) / ch), 0, gv - 1).astype(np.int64)
    di, dj = i1 - i0 + 1, j1 - j0 + 1
    counts = di * dj
    owner = np.repeat(np.arange(len(boxes)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cells = (j0[owner] + local // di[owner]) * gu + (i0[owner] + local % di[owner])
    item = items[owner].astype(np.int64)
    span = int(items.max()) + 1 if len(items) else 1
    keys = np.unique(cells * span + item)
    cells, item = keys // span, keys % span
    offsets = np.concatenate(([0], np.cumsum(np.bincount(cells, minlength=gu * gv)))).astype(np.int64)
    return offsets, item


def _curve_uvs(curve) -> np.ndarray:
    uvh = getattr(curve, 'uvh', None)
    return uvh[:, :2] if uvh is not None else curve.positions[:, :2]


def _segment_boxes(curves: Sequence[PlyCurve], bounds, uv_period, margin: float):
    boxes, items = [], []
    start = 0
    for curve in curves:
        uv = _curve_uvs(curve)
        a, b = uv[:-1], uv[1:]
        a_folded = fold_uv(a, bounds, uv_period)
        b_moved = b + (a_folded - a)
        lo = np.minimum(a_folded, b_moved) - margin
        hi = np.maximum(a_folded, b_moved) + margin
        ids = np.arange(start, start + len(a))
        shifts = [(0.0, 0.0)]
        pu, pv = uv_period or (0.0, 0.0)
        if pu > 0:
            shifts += [(-pu, 0.0), (pu, 0.0)]
        if pv > 0:
            shifts += [(su, sv) for su, _ in list(shifts) for sv in (-pv, pv)]
        for su, sv in shifts:
            shift = np.array([su, sv, su, sv])
            boxes.append(np.column_stack((lo, hi)) + shift)
            items.append(ids)
        start += len(a)
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), 0
    return np.vstack(boxes), np.concatenate(items), start


def _check_overlaps(mesh: BaseMesh, offsets: np.ndarray, indices: np.ndarray, tol: float) -> None:
    pairs = set()
    for cell in np.nonzero(np.diff(offsets) >= 2)[0]:
        members = indices[offsets[cell]:offsets[cell + 1]]
        a, b = np.triu_indices(len(members), 1)
        pairs.update(zip(members[a].tolist(), members[b].tolist()))
    if not pairs:
        return
    pair_array = np.array(sorted(pairs))
    tri_uv = mesh.triangle_uvs()
    first, second = tri_uv[pair_array[:, 0]], tri_uv[pair_array[:, 1]]
    separated = np.zeros(len(pair_array), dtype=bool)
    for shape in (first, second):
        for k in range(3):
            edge = shape[:, (k + 1) % 3] - shape[:, k]
            axis = np.column_stack((-edge[:, 1], edge[:, 0]))
            axis /= np.linalg.norm(axis, axis=1, keepdims=True)
            proj_a = np.einsum('pkd,pd->pk', first, axis)
            proj_b = np.einsum('pkd,pd->pk', second, axis)
            separated |= (proj_a.max(axis=1) <= proj_b.min(axis=1) + tol)
            separated |= (proj_b.max(axis=1) <= proj_a.min(axis=1) + tol)
    if not separated.all():
        a, b = pair_array[np.argmin(separated)]
        raise OverlappingChartError(f"UV triangles {a} and {b} overlap; meshes must have a non-overlapping UV chart",
                                    stage='grid')


def build_grid(mesh: BaseMesh, curves: Sequence[PlyCurve] = (), resolution: Optional[Tuple[int, int]] = None,
               margin: Optional[float] = None, uv_period: Optional[Tuple[float, float]] = None) -> MappingGrid:
    """
    Bins mesh triangles and curve segments into a uniform UV grid.

    :param mesh: Base mesh with a non-overlapping UV chart.
    :param curves: Texture-space plies; segment ids run over the plies in order.
    :param resolution: (Gu, Gv); defaults to ceil(sqrt(2 T)) clamped to [8, 4096] on both axes.
    :param margin: UV expansion of segment boxes; defaults to the largest ply radius.
    :param uv_period: Fold period of wrapped tilings, (0, 0) for none.
    :raises EmptyMeshError: no triangles or no triangle with nonzero UV area.
    :raises OverlappingChartError: two UV triangles overlap.
    """
    mesh.require_triangles()
    resolution = tuple(resolution) if resolution else default_resolution(mesh.triangle_count)
    if resolution[0] < 1 or resolution[1] < 1:
        raise ValueError(f"Grid resolution must be >= (1, 1), got {resolution}")
    bounds = mesh.uv_bounds()
    extent = max(bounds[2] - bounds[0], bounds[3] - bounds[1])
    if bounds[2] <= bounds[0] or bounds[3] <= bounds[1]:
        raise EmptyMeshError("UV chart has zero extent", stage='grid')
    uv_period = tuple(uv_period) if uv_period else (0.0, 0.0)

    areas = mesh.uv_areas()
    valid = np.nonzero(areas != 0)[0]
    skipped = mesh.triangle_count - len(valid)
    if skipped:
        logger.warning(f"Skipping {skipped} triangles with zero UV area")
    if not len(valid):
        raise EmptyMeshError("All triangles have zero UV area", stage='grid')
    tri_uv = mesh.triangle_uvs()[valid]
    lo, hi = tri_uv.min(axis=1), tri_uv.max(axis=1)
    # expansion covers points admitted by the barycentric slack
    pad = (2.0 * EPS_BARY * (hi - lo).max(axis=1) + 1e-15 * extent)[:, None]
    tri_offsets, tri_indices = _bin_boxes(np.column_stack((lo - pad, hi + pad)), valid, bounds, resolution)
    _check_overlaps(mesh, tri_offsets, tri_indices, 1e-9 * extent)

    if margin is None:
        margin = max((c.radius for c in curves), default=0.0)
    boxes, items, segment_count = _segment_boxes(curves, bounds, uv_period, margin)
    seg_offsets, seg_indices = _bin_boxes(boxes, items, bounds, resolution)

    grid = MappingGrid(resolution, bounds, tri_offsets, tri_indices, seg_offsets, seg_indices,
                       uv_period, float(margin), segment_count)
    logger.info(f"Built {resolution[0]}x{resolution[1]} grid over {bounds}: {len(tri_indices)} triangle and "
                f"{len(seg_indices)} segment entries")
    return grid


# ---------------------- Point location ---------------------- #
def _barycentric(uv: np.ndarray, tri_uv: np.ndarray):
    """Barycentric coordinates of points (P, 2) in triangles (K, 3, 2); each result is (P, K)."""
    ax, ay = tri_uv[None, :, 0, 0], tri_uv[None, :, 0, 1]
    e1x, e1y = tri_uv[None, :, 1, 0] - ax, tri_uv[None, :, 1, 1] - ay
    e2x, e2y = tri_uv[None, :, 2, 0] - ax, tri_uv[None, :, 2, 1] - ay
    dx, dy = uv[:, None, 0] - ax, uv[:, None, 1] - ay
    den = e1x * e2y - e1y * e2x
    beta = (dx * e2y - dy * e2x) / den
    gamma = (e1x * dy - e1y * dx) / den
    alpha = 1.0 - beta - gamma
    return alpha, beta, gamma


def _first_containing(uv: np.ndarray, candidates: np.ndarray, tri_uv_all: np.ndarray):
    alpha, beta, gamma = _barycentric(uv, tri_uv_all[candidates])
    inside = (alpha >= -EPS_BARY) & (beta >= -EPS_BARY) & (gamma >= -EPS_BARY)
    first = np.argmax(inside, axis=1)
    rows = np.arange(len(uv))
    found = inside[rows, first]
    bary = np.column_stack((alpha[rows, first], beta[rows, first], gamma[rows, first]))
    return np.where(found, candidates[first], -1), bary


def locate_many(grid: Optional[MappingGrid], mesh: BaseMesh, uvs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Triangle index (-1 when unmapped) and barycentric coordinates for every uv.
    With grid=None all triangles are scanned.
    """
    uvs = np.asarray(uvs, dtype=float).reshape(-1, 2)
    tri_uv_all = mesh.triangle_uvs()
    triangles = np.full(len(uvs), -1, dtype=np.int64)
    bary = np.zeros((len(uvs), 3))
    if grid is None:
        candidates = np.nonzero(mesh.uv_areas() != 0)[0]
        if len(candidates) and len(uvs):
            triangles, bary = _first_containing(uvs, candidates, tri_uv_all)
        return triangles, bary
    cells = grid.lookup(uvs)
    unique, inverse = np.unique(cells, return_inverse=True)
    for k, cell in enumerate(unique):
        rows = np.nonzero(inverse == k)[0]
        candidates = grid.triangles_in(cell)
        if not len(candidates):
            continue
        triangles[rows], bary[rows] = _first_containing(uvs[rows], candidates, tri_uv_all)
    return triangles, bary


def locate_triangle(grid: MappingGrid, mesh: BaseMesh, uv) -> Tuple[int, np.ndarray]:
    """
    :return: (triangle index, barycentric (alpha, beta, gamma)); lowest index wins on shared edges.
    :raises UnmappedUVError: no listed triangle contains uv.
    """
    triangles, bary = locate_many(grid, mesh, np.asarray(uv, dtype=float)[None, :])
    if triangles[0] < 0:
        raise UnmappedUVError(f"UV {tuple(np.ravel(uv))} is outside the mesh chart", vertex_index=0, stage='map')
    return int(triangles[0]), bary[0]


def locate_triangle_bruteforce(mesh: BaseMesh, uv) -> Tuple[int, np.ndarray]:
    triangles, bary = locate_many(None, mesh, np.asarray(uv, dtype=float)[None, :])
    if triangles[0] < 0:
        raise UnmappedUVError(f"UV {tuple(np.ravel(uv))} is outside the mesh chart", vertex_index=0, stage='map')
    return int(triangles[0]), bary[0]


# ---------------------- Extrusion ---------------------- #
def map_points(mesh: BaseMesh, triangles: np.ndarray, bary: np.ndarray, h: np.ndarray):
    """Vectorized map_point: positions S + h n and unit interpolated normals n."""
    corners = mesh.triangles[triangles]
    a, b, c = bary[:, 0:1], bary[:, 1:2], bary[:, 2:3]
    p = mesh.positions
    n = mesh.normals
    surface = a * p[corners[:, 0]] + b * p[corners[:, 1]] + c * p[corners[:, 2]]
    normal = a * n[corners[:, 0]] + b * n[corners[:, 1]] + c * n[corners[:, 2]]
    length = np.linalg.norm(normal, axis=1)
    if np.any(length < 1e-6):
        bad = int(np.argmin(length))
        raise DegenerateNormalError(f"Interpolated normal vanishes in triangle {int(triangles[bad])}", stage='map')
    normal = normal / length[:, None]
    return surface + np.asarray(h, dtype=float)[:, None] * normal, normal


def map_point(mesh: BaseMesh, triangle: int, bary, h: float):
    position, normal = map_points(mesh, np.array([triangle]), np.asarray(bary, dtype=float)[None, :], np.array([h]))
    return position[0], normal[0]


def surface_u_tangents(mesh: BaseMesh) -> np.ndarray:
    """dS/du for every triangle, from the linear UV-to-position map."""
    p = mesh.positions[mesh.triangles]
    q = mesh.triangle_uvs()
    dp1, dp2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    dq1, dq2 = q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]
    det = dq1[:, 0] * dq2[:, 1] - dq2[:, 0] * dq1[:, 1]
    with np.errstate(divide='ignore', invalid='ignore'):
        return (dp1 * dq2[:, 1:2] - dp2 * dq1[:, 1:2]) / det[:, None]


def _transform_one(grid, mesh, ply: PlyCurve, index: int, shell_base: float, u_tangents, uv_period):
    uv = ply.positions[:, :2]
    folded = grid.fold(uv) if grid is not None else fold_uv(uv, mesh.uv_bounds(), uv_period)
    triangles, bary = locate_many(grid, mesh, folded)
    missing = np.nonzero(triangles < 0)[0]
    if len(missing):
        vertex = int(missing[0])
        raise UnmappedUVError(f"Ply {index} vertex {vertex} at UV {tuple(uv[vertex])} is outside the mesh chart",
                              vertex_index=vertex, ply_index=index, stage='map')
    h = ply.positions[:, 2] + shell_base
    positions, surface_normal = map_points(mesh, triangles, bary, h)

    e_u = u_tangents[triangles]
    e_u = e_u - np.sum(e_u * surface_normal, axis=1)[:, None] * surface_normal
    length = np.linalg.norm(e_u, axis=1)
    if np.any(~np.isfinite(length) | (length < 1e-12)):
        raise DegenerateError(f"Ply {index}: surface u-direction undefined", stage='map')
    e_u /= length[:, None]
    e_v = np.cross(surface_normal, e_u)
    local = ply.normals
    normals = local[:, 0:1] * e_u + local[:, 1:2] * e_v + local[:, 2:3] * surface_normal
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    seg = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    if np.any(seg <= 0):
        raise DegenerateError(f"Ply {index}: mapped vertices coincide", stage='map')
    arclen = np.concatenate(([0.0], np.cumsum(seg)))
    uvh = np.column_stack((uv, ply.positions[:, 2]))
    return MappedPly(positions, normals, arclen, ply.radius, ply.yarn_id, ply.ply_index, uvh, triangles)


def transform_plies(grid: Optional[MappingGrid], mesh: BaseMesh, curves: Sequence[PlyCurve],
                    shell_base: float = 0.0, threads: int = 1,
                    uv_period: Optional[Tuple[float, float]] = None) -> List[MappedPly]:
    """
    Maps texture-space plies onto the base mesh. Each vertex is located in the UV chart, lifted to
    height H + shell_base along the interpolated normal, and its record normal is carried from the
    texture frame (+x, +y, +z) into the surface frame (dS/du, n x dS/du, n).

    :param grid: Precomputed grid, or None for the brute-force scan over all triangles.
    :raises UnmappedUVError: a vertex falls outside the chart (carries vertex and ply index).
    """
    mesh.require_triangles()
    u_tangents = surface_u_tangents(mesh)
    results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        futures = {executor.submit(_transform_one, grid, mesh, ply, index, shell_base, u_tangents, uv_period): index
                   for index, ply in enumerate(curves)}
        for future in concurrent.futures.as_completed(futures):
            results[futures[future]] = future.result()
    mapped = [results[index] for index in range(len(curves))]
    logger.info(f"Mapped {len(mapped)} plies ({sum(p.vertex_count for p in mapped)} vertices) onto the base mesh"
                f"{' by brute force' if grid is None else ''}")
    return mapped


# ---------------------- Files ---------------------- #
def write_mgb(grid: MappingGrid, path: str) -> None:
    """MGB layout: b'MGB1', header, then triangle and segment sections of per-cell u32 counts + u32 indices."""
    with open(path, 'wb') as f:
        f.write(MGB_MAGIC)
        f.write(MGB_HEADER.pack(grid.resolution[0], grid.resolution[1], *grid.bounds, *grid.uv_period,
                                grid.margin, grid.segment_count))
        for offsets, indices in ((grid.tri_offsets, grid.tri_indices), (grid.seg_offsets, grid.seg_indices)):
            f.write(np.diff(offsets).astype('<u4').tobytes())
            f.write(indices.astype('<u4').tobytes())
    logger.info(f"Wrote grid to '{path}'")


def read_mgb(path: str) -> MappingGrid:
    if not os.path.exists(path):
        raise ParseError(f"Grid file not found: {path}", stage='render')
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != MGB_MAGIC:
        raise BadMagicError(path, MGB_MAGIC, data[:4], stage='render')
    try:
        gu, gv, u0, v0, u1, v1, pu, pv, margin, segment_count = MGB_HEADER.unpack_from(data, 4)
        pos = 4 + MGB_HEADER.size
        sections = []
        for _ in range(2):
            counts = np.frombuffer(data, dtype='<u4', count=gu * gv, offset=pos).astype(np.int64)
            pos += 4 * gu * gv
            total = int(counts.sum())
            indices = np.frombuffer(data, dtype='<u4', count=total, offset=pos).astype(np.int64)
            pos += 4 * total
            sections.append((np.concatenate(([0], np.cumsum(counts))), indices))
    except (struct.error, ValueError) as e:
        raise ParseError(f"Truncated grid file '{path}': {e}", stage='render')
    (tri_offsets, tri_indices), (seg_offsets, seg_indices) = sections
    return MappingGrid((gu, gv), (u0, v0, u1, v1), tri_offsets, tri_indices, seg_offsets, seg_indices,
                       (pu, pv), margin, segment_count)


def write_mapped(plies: Sequence[MappedPly], path: str) -> None:
    """Mapped plies as PLB plus a `<path>.uvh.npy` sidecar with the texture-space (u, v, h) per vertex."""
    write_plb(plies, path)
    np.save(path + '.uvh.npy', np.vstack([p.uvh for p in plies]) if plies else np.zeros((0, 3)))


def read_mapped(path: str) -> List[MappedPly]:
    plies = read_plb(path, stage='render')
    sidecar = path + '.uvh.npy'
    if not os.path.exists(sidecar):
        raise ParseError(f"Missing uvh sidecar '{sidecar}' for mapped plies", stage='render')
    uvh = np.load(sidecar)
    if len(uvh) != sum(p.vertex_count for p in plies):
        raise ParseError(f"Sidecar '{sidecar}' does not match '{path}'", stage='render')
    mapped, start = [], 0
    for ply in plies:
        block = uvh[start:start + ply.vertex_count]
        start += ply.vertex_count
        mapped.append(MappedPly(ply.positions, ply.normals, ply.arclen, ply.radius, ply.yarn_id, ply.ply_index, block))
    return mapped
