"""
Render scene: base mesh, mapped plies, mapping grid, shell prisms, lights and camera.

Scene files are INI:

    [scene]
    mesh = ../meshes/swatch.obj
    plies = ../../out/mapped.plb
    grid = ../../out/grid.mgb
    bsdf = params.txt            ; optional, else the [bsdf] section over the caller's defaults

    [camera]
    position = 0.1, -0.15, 0.25
    look_at = 0.1, 0.1, 0.0
    up = 0, 0, 1
    fov = 40
    width = 64
    height = 64

    [light.key]                  ; any number of area quads
    corner = ...
    edge_u = ...
    edge_v = ...
    radiance = 4, 4, 4

    [environment]
    type = constant              ; or latlong with image = <pfm/png> and scale
    radiance = 0.2, 0.2, 0.2

Relative paths resolve against the scene file's directory.
"""
import configparser
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from knitply.bvh import Bvh
from knitply.errors import DegenerateError, InvariantError, KnitPlyError, ParseError, UnmappedUVError
from knitply.imageio import read_image
from knitply.intersect import SegmentTable
from knitply.mapping import (MappedPly, MappingGrid, build_grid, locate_many, map_points, read_mapped, read_mgb,
                             transform_plies)
from knitply.mesh import BaseMesh, load_obj, make_quad_mesh
from knitply.sampling import Distribution2D, cosine_hemisphere, cosine_hemisphere_pdf
from knitply.shading import BsdfParams, FiberTexture, read_bsdf_params

logger = logging.getLogger(__name__)

MAX_PRISM_FACETS = 8
SHELL_MARGIN_RADII = 2.0


# ---------------------- Shell prisms ---------------------- #
def planar_barycentric(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of the projections of points (K, 3) onto triangles (K, 3, 3)."""
    a = corners[:, 0]
    v0, v1, v2 = corners[:, 1] - a, corners[:, 2] - a, points - a
    d00 = np.sum(v0 * v0, axis=1)
    d01 = np.sum(v0 * v1, axis=1)
    d11 = np.sum(v1 * v1, axis=1)
    d20 = np.sum(v2 * v0, axis=1)
    d21 = np.sum(v2 * v1, axis=1)
    den = d00 * d11 - d01 * d01
    beta = (d11 * d20 - d01 * d21) / den
    gamma = (d00 * d21 - d01 * d20) / den
    return np.column_stack((1.0 - beta - gamma, beta, gamma))


class ShellPrisms:
    """
    One convex prism per base triangle, spanned by the triangle's corners offset along their
    vertex normals to h_min and h_max. Each prism is stored as the supporting planes of its
    convex hull, padded to MAX_PRISM_FACETS with an always-satisfied plane.
    """

    def __init__(self, mesh: BaseMesh, h_min: float, h_max: float):
        if not h_max > h_min:
            raise InvariantError(f"Shell bounds must satisfy h_min < h_max, got ({h_min}, {h_max})", stage='render')
        self.mesh = mesh
        self.h_min, self.h_max = float(h_min), float(h_max)
        p = mesh.positions[mesh.triangles]
        n = mesh.normals[mesh.triangles]
        self.corners = np.concatenate((p + h_min * n, p + h_max * n), axis=1)
        extent = float(np.ptp(self.corners.reshape(-1, 3), axis=0).max())
        self.equations = np.zeros((len(p), MAX_PRISM_FACETS, 4))
        self.equations[:, :, 3] = -1.0
        for k, corners in enumerate(self.corners):
            try:
                hull = ConvexHull(corners)
            except QhullError as e:
                raise DegenerateError(f"Shell prism of triangle {k} is flat: {e}", stage='render')
            eq = hull.equations
            if len(eq) > MAX_PRISM_FACETS:
                eq = np.unique(np.round(eq, 12), axis=0)
            self.equations[k, :len(eq)] = eq[:MAX_PRISM_FACETS]
        # slight growth keeps boundary points inside
        self.equations[:, :, 3] -= 1e-9 * extent * np.any(self.equations[:, :, :3] != 0, axis=2)
        self.bvh = Bvh(self.corners.min(axis=1), self.corners.max(axis=1))
        logger.info(f"Built {len(p)} shell prisms for h in [{self.h_min:.5g}, {self.h_max:.5g}]")

    def __len__(self):
        return len(self.corners)

    def clip(self, ids: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Entry and exit t of the ray against each prism; (hit, t_in, t_out)."""
        eq = self.equations[ids]
        denom = eq[..., :3] @ direction
        num = -(eq[..., :3] @ origin + eq[..., 3])
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = num / denom
        t_in = np.where(denom < 0, ratio, -np.inf).max(axis=1)
        t_out = np.where(denom > 0, ratio, np.inf).min(axis=1)
        blocked = np.any((denom == 0) & (num < 0), axis=1)
        return (~blocked) & (t_in <= t_out) & (t_out >= 0), t_in, t_out

    def contains(self, points: np.ndarray) -> np.ndarray:
        """(P, T) occupancy of every prism."""
        points = np.atleast_2d(points)
        values = np.einsum('tfk,pk->ptf', self.equations[..., :3], points) + self.equations[None, :, :, 3]
        return np.all(values <= 0, axis=2)

    def surface_uv(self, triangle: int, points: np.ndarray, iterations: int = 3) -> np.ndarray:
        """
        UV of the base-surface point whose interpolated normal passes through each point,
        by fixed-point iteration from the planar projection. Accepts (3,) or (K, 3).
        """
        tri = self.mesh.triangles[triangle]
        corners = self.mesh.positions[tri]
        normals = self.mesh.normals[tri]
        target = np.atleast_2d(np.asarray(points, dtype=float))
        stacked = np.broadcast_to(corners, (len(target), 3, 3))
        bary = planar_barycentric(target, stacked)
        for _ in range(iterations):
            n = bary @ normals
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            surface = bary @ corners
            foot = target - np.sum((target - surface) * n, axis=1, keepdims=True) * n
            bary = planar_barycentric(foot, stacked)
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        uv = bary @ self.mesh.uvs[tri]
        return uv[0] if np.ndim(points) == 1 else uv


def shell_bounds(mesh: BaseMesh, grid: Optional[MappingGrid], plies: Sequence[MappedPly]) -> Tuple[float, float]:
    """Height range of the ply centerlines above the base surface, widened by two ply radii."""
    uvh = np.vstack([p.uvh for p in plies])
    positions = np.vstack([p.positions for p in plies])
    uv = grid.fold(uvh[:, :2]) if grid is not None else uvh[:, :2]
    triangles, bary = locate_many(grid, mesh, uv)
    if np.any(triangles < 0):
        vertex = int(np.argmax(triangles < 0))
        raise UnmappedUVError(f"Ply vertex {vertex} lies outside the mesh chart", vertex_index=vertex, stage='render')
    surface, normal = map_points(mesh, triangles, bary, np.zeros(len(uv)))
    h = np.sum((positions - surface) * normal, axis=1)
    margin = SHELL_MARGIN_RADII * max(p.radius for p in plies)
    return float(h.min() - margin), float(h.max() + margin)


# ---------------------- Lights ---------------------- #
@dataclass(frozen=True)
class AreaLight:
    """One-sided emitting parallelogram; emits along edge_u x edge_v."""
    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    radiance: np.ndarray
    name: str = 'light'

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    def intersect(self, origin: np.ndarray, direction: np.ndarray, t_max: float = np.inf) -> Optional[float]:
        normal = self.normal
        denom = float(np.dot(direction, normal))
        if abs(denom) < 1e-14:
            return None
        t = float(np.dot(self.corner - origin, normal)) / denom
        if not 0 < t < t_max:
            return None
        rel = origin + t * direction - self.corner
        uu, uv_, vv = np.dot(self.edge_u, self.edge_u), np.dot(self.edge_u, self.edge_v), np.dot(self.edge_v, self.edge_v)
        ru, rv = np.dot(rel, self.edge_u), np.dot(rel, self.edge_v)
        den = uu * vv - uv_ * uv_
        a = (vv * ru - uv_ * rv) / den
        b = (uu * rv - uv_ * ru) / den
        return t if (0 <= a <= 1 and 0 <= b <= 1) else None

    def emitted(self, direction: np.ndarray) -> np.ndarray:
        """Radiance seen along a ray travelling in `direction` when it reaches the light."""
        return self.radiance if np.dot(direction, self.normal) < 0 else np.zeros(3)

    def sample(self, u, reference: np.ndarray):
        """:return: (unit direction, distance, solid-angle pdf, radiance) towards a uniform point on the quad."""
        point = self.corner + u[0] * self.edge_u + u[1] * self.edge_v
        offset = point - reference
        dist = float(np.linalg.norm(offset))
        w = offset / dist
        cos_light = -float(np.dot(w, self.normal))
        if cos_light <= 0 or dist <= 0:
            return w, dist, 0.0, np.zeros(3)
        return w, dist, dist * dist / (self.area * cos_light), self.radiance

    def pdf(self, reference: np.ndarray, w: np.ndarray) -> float:
        t = self.intersect(reference, w)
        if t is None:
            return 0.0
        cos_light = -float(np.dot(w, self.normal))
        return t * t / (self.area * cos_light) if cos_light > 0 else 0.0


class Environment:
    """
    Distant light: constant radiance, or a lat-long image with z up (row 0 looks along +z,
    u = azimuth / 2 pi from +x towards +y).
    """

    def __init__(self, radiance=None, image: Optional[np.ndarray] = None, scale: float = 1.0):
        self.radiance = np.asarray(radiance if radiance is not None else (1.0, 1.0, 1.0), dtype=float)
        self.image = None if image is None else np.asarray(image, dtype=float) * scale
        self.distribution = None
        if self.image is not None:
            height, width = self.image.shape[:2]
            luminance = self.image @ np.array([0.2126, 0.7152, 0.0722])
            rows = np.sin(np.pi * (np.arange(height) + 0.5) / height)
            self.distribution = Distribution2D(luminance * rows[:, None])

    @property
    def is_constant(self) -> bool:
        return self.image is None

    def _lookup(self, x: float, y: float) -> np.ndarray:
        height, width = self.image.shape[:2]
        return self.image[min(int(y * height), height - 1), min(int(x * width), width - 1)]

    @staticmethod
    def _to_xy(w: np.ndarray) -> Tuple[float, float, float]:
        theta = np.arccos(np.clip(w[2], -1.0, 1.0))
        phi = np.mod(np.arctan2(w[1], w[0]), 2 * np.pi)
        return phi / (2 * np.pi), theta / np.pi, np.sin(theta)

    def eval(self, w: np.ndarray) -> np.ndarray:
        if self.is_constant:
            return self.radiance
        x, y, _ = self._to_xy(w)
        return self._lookup(x, y)

    def sample(self, u, normal: np.ndarray):
        """:return: (direction, solid-angle pdf, radiance)"""
        if self.is_constant:
            w = cosine_hemisphere(u, normal)
            return w, cosine_hemisphere_pdf(w, normal), self.radiance
        x, y, pdf_xy = self.distribution.sample(u)
        theta, phi = y * np.pi, x * 2 * np.pi
        sin_theta = np.sin(theta)
        if sin_theta <= 0:
            return np.array([0.0, 0.0, 1.0]), 0.0, np.zeros(3)
        w = np.array([sin_theta * np.cos(phi), sin_theta * np.sin(phi), np.cos(theta)])
        return w, pdf_xy / (2 * np.pi * np.pi * sin_theta), self._lookup(x, y)

    def pdf(self, w: np.ndarray, normal: np.ndarray) -> float:
        if self.is_constant:
            return cosine_hemisphere_pdf(w, normal)
        x, y, sin_theta = self._to_xy(w)
        if sin_theta <= 0:
            return 0.0
        return self.distribution.pdf(x, y) / (2 * np.pi * np.pi * sin_theta)


# ---------------------- Camera ---------------------- #
@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov: float = 40.0
    width: int = 64
    height: int = 64

    def generate_ray(self, px: int, py: int, u=(0.5, 0.5)) -> Tuple[np.ndarray, np.ndarray]:
        """Ray through pixel (px, py) at sub-pixel offset u; row 0 is the top of the image."""
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        tan_half = np.tan(np.radians(self.fov) / 2)
        sx = (2.0 * (px + u[0]) / self.width - 1.0) * tan_half * self.width / self.height
        sy = (1.0 - 2.0 * (py + u[1]) / self.height) * tan_half
        direction = forward + sx * right + sy * up
        return np.asarray(self.position, dtype=float), direction / np.linalg.norm(direction)


# ---------------------- Scene ---------------------- #
@dataclass
class Scene:
    mesh: BaseMesh
    grid: MappingGrid
    plies: List[MappedPly]
    camera: Camera
    bsdf: BsdfParams = field(default_factory=BsdfParams)
    fiber: FiberTexture = field(default_factory=FiberTexture)
    lights: List[AreaLight] = field(default_factory=list)
    environment: Optional[Environment] = None
    shell: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not self.lights and self.environment is None:
            raise InvariantError("Scene has no light", stage='render')
        if not self.plies:
            raise InvariantError("Scene has no plies", stage='render')
        self.table = SegmentTable(self.plies)
        if self.grid.segment_count != len(self.table):
            raise InvariantError(f"Grid lists {self.grid.segment_count} segments but the plies have "
                                 f"{len(self.table)}", stage='render')
        if self.shell is None:
            self.shell = shell_bounds(self.mesh, self.grid, self.plies)
        self.prisms = ShellPrisms(self.mesh, *self.shell)
        self.max_radius = float(self.table.radius.max())
        self.spawn_epsilon = 1e-4 * float(self.table.radius.min())
        logger.info(f"Scene ready: {len(self.plies)} plies, {len(self.table)} segments, "
                    f"{len(self.lights)} area lights, environment={'yes' if self.environment else 'no'}")

    @property
    def light_count(self) -> int:
        return len(self.lights) + (1 if self.environment is not None else 0)

    def with_bsdf(self, params: BsdfParams) -> 'Scene':
        """Shallow copy sharing all geometry, with other BSDF parameters."""
        clone = object.__new__(Scene)
        clone.__dict__.update(self.__dict__)
        clone.bsdf = params
        return clone

    def __repr__(self):
        return f"Scene(plies={len(self.plies)}, segments={len(self.table)}, prisms={len(self.prisms)})"


def _vector(text: str, size: int = 3) -> np.ndarray:
    values = [float(v) for v in text.replace(',', ' ').split()]
    if len(values) != size:
        raise ValueError(f"expected {size} numbers, got '{text}'")
    return np.array(values)


def _resolve(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def load_scene(path: str, overrides: Optional[Dict[str, str]] = None, bsdf: Optional[BsdfParams] = None,
               fiber: Optional[FiberTexture] = None) -> Scene:
    """
    Reads a scene INI file.

    :param path: Scene file.
    :param overrides: Optional [scene] entries (mesh, plies, grid, bsdf) replacing the file's; CLI paths
                      are taken as given.
    :param bsdf: BSDF parameters the file's [bsdf] section is layered over.
    :param fiber: Fiber texture the file's [fiber] section is layered over.
    """
    if not os.path.exists(path):
        raise ParseError(f"Scene file not found: {path}", stage='render')
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding='utf-8')
    except configparser.Error as e:
        raise ParseError(f"Malformed scene file '{path}': {e}", stage='render')
    base = os.path.dirname(os.path.abspath(path))
    entries = {k: _resolve(base, v) for k, v in parser.items('scene') if v.strip()} if parser.has_section('scene') else {}
    entries.update({k: v for k, v in (overrides or {}).items() if v})
    for key in ('mesh', 'plies', 'grid'):
        if key not in entries:
            raise ParseError(f"Scene '{path}' does not name a {key} file", stage='render')

    try:
        camera_section = parser['camera']
        camera = Camera(_vector(camera_section['position']), _vector(camera_section['look_at']),
                        _vector(camera_section.get('up', '0, 0, 1')), float(camera_section.get('fov', '40')),
                        int(camera_section.get('width', '64')), int(camera_section.get('height', '64')))

        lights = []
        for section in parser.sections():
            if section.startswith('light'):
                s = parser[section]
                lights.append(AreaLight(_vector(s['corner']), _vector(s['edge_u']), _vector(s['edge_v']),
                                        _vector(s['radiance']), section.partition('.')[2] or section))

        environment = None
        if parser.has_section('environment'):
            s = parser['environment']
            kind = s.get('type', 'constant')
            if kind == 'constant':
                environment = Environment(_vector(s.get('radiance', '1, 1, 1')))
            elif kind == 'latlong':
                environment = Environment(image=read_image(_resolve(base, s['image'])),
                                          scale=float(s.get('scale', '1')))
            else:
                raise ParseError(f"Unknown environment type '{kind}' in '{path}'", stage='render')

        bsdf = bsdf or BsdfParams()
        fiber = fiber or FiberTexture()
        if 'bsdf' in entries:
            bsdf = read_bsdf_params(entries['bsdf'])
        elif parser.has_section('bsdf'):
            bsdf = bsdf.replace(**{k: float(v) for k, v in parser.items('bsdf')})
        if parser.has_section('fiber'):
            values = {k: (int(v) if k == 'fiber_count' else float(v)) for k, v in parser.items('fiber')}
            fiber = replace(fiber, **values)
    except KnitPlyError:
        raise
    except (KeyError, ValueError, TypeError) as e:
        raise ParseError(f"Bad scene entry in '{path}': {e}", stage='render')

    mesh = load_obj(entries['mesh'])
    plies = read_mapped(entries['plies'])
    grid = read_mgb(entries['grid'])
    logger.info(f"Loaded scene '{path}'")
    return Scene(mesh, grid, plies, camera, bsdf, fiber, lights, environment)


# ---------------------- Swatch presets ---------------------- #
SWATCH_MARGIN = 0.02
PRESETS = ('front', 'back', 'furnace')


def swatch_mesh(plies: Sequence, margin: float = SWATCH_MARGIN) -> BaseMesh:
    """Flat square chart covering the texture-space footprint of the plies with a margin on every side."""
    uv = np.vstack([p.positions[:, :2] for p in plies])
    lo = uv.min(axis=0) - margin
    size = float((uv.max(axis=0) + margin - lo).max())
    return make_quad_mesh(size, 1.0, lo)


def swatch_camera(mesh: BaseMesh, width: int = 64, height: int = 64) -> Camera:
    """Looks down at the chart centre from slightly in front of it."""
    lo, hi = mesh.positions.min(axis=0), mesh.positions.max(axis=0)
    center = 0.5 * (lo + hi)
    size = float((hi - lo)[:2].max())
    position = center + np.array([0.0, -0.4 * size, 1.25 * size])
    return Camera(position, center, np.array([0.0, 1.0, 0.0]), 45.0, width, height)


def swatch_lights(mesh: BaseMesh, preset: str = 'front') -> Tuple[List[AreaLight], Optional[Environment]]:
    """
    front: a square emitter above the swatch facing down plus a dim environment.
    back: the same emitter below the swatch facing up, so only transmitted light reaches the camera.
    furnace: a white constant environment and no emitters.
    """
    if preset == 'furnace':
        return [], Environment((1.0, 1.0, 1.0))
    if preset not in PRESETS:
        raise InvariantError(f"Unknown lighting preset '{preset}', expected one of {PRESETS}", stage='render')
    lo, hi = mesh.positions.min(axis=0), mesh.positions.max(axis=0)
    center = 0.5 * (lo + hi)
    size = float((hi - lo)[:2].max())
    half = 0.5 * size
    x, y = np.array([size, 0.0, 0.0]), np.array([0.0, size, 0.0])
    if preset == 'front':
        corner = center + np.array([-half, -half, 1.5 * size])
        light = AreaLight(corner, y, x, np.full(3, 6.0), 'key')
    else:
        corner = center + np.array([-half, -half, -1.5 * size])
        light = AreaLight(corner, x, y, np.full(3, 6.0), 'back')
    return [light], Environment(np.full(3, 0.05))


def build_swatch_scene(plies: Sequence, preset: str = 'front', resolution: Optional[Tuple[int, int]] = None,
                       shell_base: Optional[float] = None, width: int = 64, height: int = 64,
                       bsdf: Optional[BsdfParams] = None, fiber: Optional[FiberTexture] = None,
                       threads: int = 1) -> Scene:
    """
    Maps texture-space plies onto a flat swatch chart and wraps them in a ready-to-render scene.

    :param plies: Texture-space plies, e.g. from generate_all_plies.
    :param preset: Lighting preset, see swatch_lights.
    :param resolution: Mapping grid resolution; defaults to the mesh-based default.
    :param shell_base: Height offset of the plies above the chart; defaults to 1.5 ply radii.
    """
    mesh = swatch_mesh(plies)
    radius = max(p.radius for p in plies)
    grid = build_grid(mesh, plies, resolution)
    mapped = transform_plies(grid, mesh, plies, 1.5 * radius if shell_base is None else shell_base, threads)
    lights, environment = swatch_lights(mesh, preset)
    return Scene(mesh, grid, mapped, swatch_camera(mesh, width, height), bsdf or BsdfParams(),
                 fiber or FiberTexture(), lights, environment)
