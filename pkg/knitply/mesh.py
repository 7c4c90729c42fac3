import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.spatial import Delaunay

from knitply.errors import DegenerateNormalError, EmptyMeshError, InvariantError, ParseError

logger = logging.getLogger(__name__)


@dataclass
class BaseMesh:
    """
    Triangle mesh with per-vertex position, unit normal and UV.

    :param positions: (V, 3) object-space positions.
    :param normals: (V, 3) unit normals.
    :param uvs: (V, 2) texture coordinates.
    :param triangles: (T, 3) vertex indices.
    """
    positions: np.ndarray
    normals: np.ndarray
    uvs: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=float).reshape(-1, 2)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        count = len(self.positions)
        if len(self.normals) != count or len(self.uvs) != count:
            raise InvariantError(f"Mesh attribute counts differ: {count} positions, {len(self.normals)} normals, "
                                 f"{len(self.uvs)} uvs", stage='map')
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= count):
            raise InvariantError("Triangle index out of range", stage='map')
        if not np.all(np.isfinite(self.uvs)):
            raise InvariantError("Non-finite UV coordinates", stage='map')
        if count and np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > 1e-6:
            raise InvariantError("Vertex normals must be unit length", stage='map')

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def require_triangles(self) -> None:
        if self.triangle_count == 0:
            raise EmptyMeshError("Mesh has no triangles", stage='map')

    def uv_bounds(self) -> Tuple[float, float, float, float]:
        """(u_min, v_min, u_max, v_max) of the UV chart."""
        used = self.uvs[np.unique(self.triangles)]
        u0, v0 = used.min(axis=0)
        u1, v1 = used.max(axis=0)
        return float(u0), float(v0), float(u1), float(v1)

    def triangle_uvs(self) -> np.ndarray:
        return self.uvs[self.triangles]

    def uv_areas(self) -> np.ndarray:
        """Signed UV-space areas (positive for counter-clockwise triangles)."""
        tri = self.triangle_uvs()
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def __repr__(self):
        return f"BaseMesh(vertices={len(self.positions)}, triangles={self.triangle_count})"


def vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    p = positions[triangles]
    face = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    normals = np.zeros_like(positions)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face)
    length = np.linalg.norm(normals, axis=1)
    if np.any(length < 1e-12):
        raise DegenerateNormalError("Vertex with zero accumulated normal", stage='map')
    return normals / length[:, None]


# ---------------------- Wavefront OBJ ---------------------- #
def load_obj(path: str) -> BaseMesh:
    """
    Reads the v/vt/vn/f subset of Wavefront OBJ. Faces must reference position, texture
    coordinate and normal for every corner; polygons are fan-triangulated and vertices are
    unified by their (v, vt, vn) triple.
    """
    if not os.path.exists(path):
        raise ParseError(f"Mesh file not found: {path}", stage='map')
    positions, texcoords, normals = [], [], []
    corners: Dict[Tuple[int, int, int], int] = {}
    triangles = []

    def resolve(index: str, count: int, line_no: int) -> int:
        value = int(index)
        # OBJ indices are 1-based; negative values count back from the end
        resolved = value - 1 if value > 0 else count + value
        if not 0 <= resolved < count:
            raise ParseError(f"{path}:{line_no}: index {value} out of range", stage='map')
        return resolved

    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith('#'):
                continue
            try:
                if tokens[0] == 'v':
                    positions.append([float(t) for t in tokens[1:4]])
                elif tokens[0] == 'vt':
                    texcoords.append([float(t) for t in tokens[1:3]])
                elif tokens[0] == 'vn':
                    normals.append([float(t) for t in tokens[1:4]])
                elif tokens[0] == 'f':
                    face = []
                    for corner in tokens[1:]:
                        parts = corner.split('/')
                        if len(parts) != 3 or not all(parts):
                            raise ParseError(f"{path}:{line_no}: face corner '{corner}' must be v/vt/vn", stage='map')
                        key = (resolve(parts[0], len(positions), line_no),
                               resolve(parts[1], len(texcoords), line_no),
                               resolve(parts[2], len(normals), line_no))
                        face.append(corners.setdefault(key, len(corners)))
                    if len(face) < 3:
                        raise ParseError(f"{path}:{line_no}: face with fewer than 3 corners", stage='map')
                    for i in range(2, len(face)):
                        triangles.append((face[0], face[i - 1], face[i]))
            except ValueError as e:
                raise ParseError(f"{path}:{line_no}: {e}", stage='map')

    keys = np.array(list(corners), dtype=np.int64).reshape(-1, 3)
    normal_data = np.asarray(normals, dtype=float).reshape(-1, 3)[keys[:, 2]] if len(keys) else np.zeros((0, 3))
    length = np.linalg.norm(normal_data, axis=1)
    if np.any(length < 1e-12):
        raise DegenerateNormalError(f"{path}: zero-length vertex normal", stage='map')
    mesh = BaseMesh(
        np.asarray(positions, dtype=float).reshape(-1, 3)[keys[:, 0]] if len(keys) else np.zeros((0, 3)),
        normal_data / length[:, None] if len(keys) else normal_data,
        np.asarray(texcoords, dtype=float).reshape(-1, 2)[keys[:, 1]] if len(keys) else np.zeros((0, 2)),
        np.asarray(triangles, dtype=np.int64).reshape(-1, 3),
    )
    logger.info(f"Loaded mesh '{path}': {len(mesh.positions)} vertices, {mesh.triangle_count} triangles")
    return mesh


def write_obj(mesh: BaseMesh, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for x, y, z in mesh.positions:
            f.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for u, v in mesh.uvs:
            f.write(f"vt {float(u)!r} {float(v)!r}\n")
        for x, y, z in mesh.normals:
            f.write(f"vn {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for tri in mesh.triangles + 1:
            f.write('f ' + ' '.join(f"{i}/{i}/{i}" for i in tri) + '\n')
    logger.info(f"Wrote mesh to '{path}'")


# ---------------------- Procedural meshes ---------------------- #
def make_quad_mesh(size: float = 1.0, uv_scale: float = 1.0, uv_offset=(0.0, 0.0)) -> BaseMesh:
    """Flat quad in z=0 with +z normals; UV = uv_scale * XY + uv_offset."""
    positions = np.array([[0, 0, 0], [size, 0, 0], [size, size, 0], [0, size, 0]], dtype=float)
    uvs = positions[:, :2] * uv_scale + np.asarray(uv_offset, dtype=float)
    normals = np.tile([0.0, 0.0, 1.0], (4, 1))
    return BaseMesh(positions, normals, uvs, np.array([[0, 1, 2], [0, 2, 3]]))


def make_grid_mesh(nu: int, nv: int, size: float = 1.0,
                   height: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None) -> BaseMesh:
    """
    (nu x nv)-quad grid over [0, size]^2 with UV = XY, optionally displaced in z by height(x, y).
    Used for draped swatches.
    """
    xs, ys = np.meshgrid(np.linspace(0, size, nu + 1), np.linspace(0, size, nv + 1))
    zs = np.zeros_like(xs) if height is None else height(xs, ys)
    positions = np.column_stack((xs.ravel(), ys.ravel(), zs.ravel()))
    uvs = np.column_stack((xs.ravel(), ys.ravel()))
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nv + 1, nu + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    triangles = np.concatenate((np.column_stack((a, b, c)), np.column_stack((a, c, d))))
    return BaseMesh(positions, vertex_normals(positions, triangles), uvs, triangles)


def make_cylinder_mesh(radius: float = 1.0, length: float = 1.0, segments: int = 64, rings: int = 4,
                       uv_size=(1.0, 1.0)) -> BaseMesh:
    """
    Open cylinder around the z axis with outward normals, unwrapped to the UV rectangle
    [0, uv_size[0]] x [0, uv_size[1]]; u runs around the circumference. The seam column is duplicated.
    """
    theta = np.linspace(0, 2 * np.pi, segments + 1)
    zs = np.linspace(0, length, rings + 1)
    tt, zz = np.meshgrid(theta, zs)
    positions = np.column_stack((radius * np.cos(tt).ravel(), radius * np.sin(tt).ravel(), zz.ravel()))
    normals = np.column_stack((np.cos(tt).ravel(), np.sin(tt).ravel(), np.zeros(tt.size)))
    uvs = np.column_stack((tt.ravel() / (2 * np.pi) * uv_size[0], zz.ravel() / length * uv_size[1]))
    idx = np.arange(tt.size).reshape(rings + 1, segments + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    triangles = np.concatenate((np.column_stack((a, b, c)), np.column_stack((a, c, d))))
    return BaseMesh(positions, normals, uvs, triangles)


def make_icosphere(subdivisions: int = 2, radius: float = 1.0) -> BaseMesh:
    """Icosphere with outward normals. UVs are spherical angles and overlap at the seam."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
             [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2],
             [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11],
             [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.asarray(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        midpoints = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoints:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoints[key] = len(verts) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        faces = refined
    unit = np.asarray(verts)
    uvs = np.column_stack((np.arctan2(unit[:, 1], unit[:, 0]) / (2 * np.pi) + 0.5,
                           np.arccos(np.clip(unit[:, 2], -1, 1)) / np.pi))
    return BaseMesh(unit * radius, unit, uvs, np.asarray(faces))


def make_random_chart_mesh(point_count: int, seed: int = 0, size: float = 1.0) -> BaseMesh:
    """
    Delaunay triangulation of random UV points (plus the chart corners), lifted onto a
    smooth height field. The UV chart is non-overlapping by construction.
    """
    rng = np.random.default_rng(seed)
    points = np.vstack(([[0, 0], [size, 0], [size, size], [0, size]], rng.uniform(0, size, (point_count, 2))))
    triangulation = Delaunay(points)
    triangles = triangulation.simplices.copy()
    # counter-clockwise in UV
    uv_tri = points[triangles]
    cross = ((uv_tri[:, 1, 0] - uv_tri[:, 0, 0]) * (uv_tri[:, 2, 1] - uv_tri[:, 0, 1])
             - (uv_tri[:, 1, 1] - uv_tri[:, 0, 1]) * (uv_tri[:, 2, 0] - uv_tri[:, 0, 0]))
    triangles[cross < 0] = triangles[cross < 0][:, [0, 2, 1]]
    positions = np.column_stack((points, 0.1 * np.sin(3 * points[:, 0]) * np.cos(2 * points[:, 1])))
    return BaseMesh(positions, vertex_normals(positions, triangles), points, triangles)
