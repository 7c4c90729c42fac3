"""
Path tracer over mapped plies.

Rays are intersected in two stages. The global stage walks a BVH over the shell prisms
and clips the ray against each prism's planes, which yields candidate base triangles in
front-to-back order together with the UV where the ray enters and leaves the prism. The
local stage walks the ray's UV path through each prism, gathers the segments the mapping
grid lists around it (one extra ring of cells, plus the joint neighbours of every listed
segment) and intersects them exactly.
"""
import concurrent.futures
import logging
import time
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from knitply.errors import InvariantError
from knitply.intersect import LATERAL, HitRecord
from knitply.sampling import PixelSampler, balance_heuristic
from knitply.scene import Scene
from knitply.shading import ShadingPoint, apply_fiber_texture, bsdf_eval, bsdf_pdf, bsdf_sample

logger = logging.getLogger(__name__)

CELL_RING = 1
SHADOW_SHORTEN = 1e-6


@dataclass(frozen=True)
class RenderConfig:
    spp: int = 16
    max_depth: int = 8
    rr_start_depth: int = 3
    seed: int = 0
    tile_size: int = 16
    threads: int = 1
    nee: bool = True

    def __post_init__(self):
        if self.spp < 1:
            raise InvariantError(f"spp must be >= 1, got {self.spp}", stage='render')
        if self.max_depth < 1:
            raise InvariantError(f"max_depth must be >= 1, got {self.max_depth}", stage='render')
        if self.tile_size < 1:
            raise InvariantError(f"tile_size must be >= 1, got {self.tile_size}", stage='render')


class PrismCandidate(NamedTuple):
    triangle: int
    t_in: float
    t_out: float
    uv_in: np.ndarray
    uv_out: np.ndarray


class PlyHit(NamedTuple):
    t: float
    segment_id: int
    kind: int
    tested: int

    @property
    def found(self) -> bool:
        return self.segment_id >= 0


@dataclass
class RayStats:
    rays: int = 0
    tested: int = 0

    def add(self, hit: PlyHit) -> None:
        self.rays += 1
        self.tested += hit.tested


# ---------------------- Two-stage intersection ---------------------- #
def global_intersect(scene: Scene, origin: np.ndarray, direction: np.ndarray,
                     t_max: float = np.inf) -> List[PrismCandidate]:
    """
    Shell prisms pierced by the ray, ordered by entry t. UVs are taken at the clipped entry and
    exit points (clamped to t >= 0 for rays starting inside a prism).
    """
    boxes = scene.prisms.bvh.traverse(origin, direction, t_max)
    if not boxes:
        return []
    ids = np.array([entry[0] for entry in boxes], dtype=np.int64)
    hit, t_in, t_out = scene.prisms.clip(ids, origin, direction)
    hit &= t_in <= t_max
    candidates = []
    for k in np.nonzero(hit)[0]:
        triangle = int(ids[k])
        start = max(float(t_in[k]), 0.0)
        stop = min(float(t_out[k]), t_max)
        uv_in = scene.prisms.surface_uv(triangle, origin + start * direction)
        uv_out = scene.prisms.surface_uv(triangle, origin + stop * direction)
        candidates.append(PrismCandidate(triangle, float(t_in[k]), float(t_out[k]), uv_in, uv_out))
    candidates.sort(key=lambda c: (c.t_in, c.triangle))
    return candidates


def uv_path(scene: Scene, candidate: PrismCandidate, origin: np.ndarray, direction: np.ndarray,
            t_max: float = np.inf) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample points (t, uv) along the ray inside a prism, spaced at most half a grid cell apart
    in UV, from the clipped entry to the clipped exit.
    """
    start = max(candidate.t_in, 0.0)
    stop = min(candidate.t_out, t_max)
    cell = min(scene.grid.cell_size)
    steps = max(1, int(np.ceil(np.linalg.norm(candidate.uv_out - candidate.uv_in) / (0.5 * cell))))
    ts = np.linspace(start, stop, steps + 1)
    uvs = scene.prisms.surface_uv(candidate.triangle, origin + ts[:, None] * direction)
    return ts, scene.grid.fold(uvs)


def candidate_cells(scene: Scene, uv_a: np.ndarray, uv_b: np.ndarray, ring: int = CELL_RING) -> np.ndarray:
    """Grid cells of the UV rectangle spanned by two points, grown by `ring` cells."""
    grid = scene.grid
    i, j = grid.cell_ij(np.vstack((uv_a, uv_b)))
    gu, gv = grid.resolution
    columns = np.arange(max(int(i.min()) - ring, 0), min(int(i.max()) + ring, gu - 1) + 1)
    rows = np.arange(max(int(j.min()) - ring, 0), min(int(j.max()) + ring, gv - 1) + 1)
    return (rows[:, None] * gu + columns[None, :]).ravel()


def local_intersect(scene: Scene, origin: np.ndarray, direction: np.ndarray, candidates: List[PrismCandidate],
                    t_min: float = 0.0, t_max: float = np.inf) -> PlyHit:
    """
    Nearest ply hit among the segments the grid lists along the ray's UV path through each
    candidate prism. Candidates are visited in entry order; inside a prism the path is walked
    front to back and the walk ends once the best hit lies before the end of the last stretch
    searched. Each segment is tested at most once per ray and ties in t go to the lower id.
    """
    table = scene.table
    best_t, best_id, best_kind = np.inf, -1, LATERAL
    done = np.zeros(0, dtype=np.int64)
    for candidate in candidates:
        if best_t < candidate.t_in:
            break
        ts, uvs = uv_path(scene, candidate, origin, direction, t_max)
        for k in range(len(ts) - 1):
            cells = candidate_cells(scene, uvs[k], uvs[k + 1])
            ids = np.unique(np.concatenate([scene.grid.segments_in(cell) for cell in cells]))
            if len(ids):
                ids = np.setdiff1d(table.with_neighbors(ids), done, assume_unique=True)
            if len(ids):
                done = np.union1d(done, ids)
                t, segment_id, kind = table.intersect_segments(origin, direction, ids, t_min, t_max)
                if segment_id >= 0 and (t < best_t or (t == best_t and segment_id < best_id)):
                    best_t, best_id, best_kind = t, segment_id, kind
            if best_t <= ts[k + 1]:
                break
    return PlyHit(best_t, best_id, best_kind, len(done))


def intersect(scene: Scene, origin: np.ndarray, direction: np.ndarray,
              t_min: float = 0.0, t_max: float = np.inf) -> PlyHit:
    return local_intersect(scene, origin, direction, global_intersect(scene, origin, direction, t_max), t_min, t_max)


def intersect_bruteforce(scene: Scene, origin: np.ndarray, direction: np.ndarray,
                         t_min: float = 0.0, t_max: float = np.inf) -> PlyHit:
    """Every segment of the scene through the same kernel as the two-stage path."""
    table = scene.table
    t, segment_id, kind = table.intersect_segments(origin, direction, np.arange(len(table)), t_min, t_max)
    return PlyHit(t, segment_id, kind, len(table))


# ---------------------- Scene queries ---------------------- #
def nearest_light(scene: Scene, origin, direction, t_max: float = np.inf, skip: Optional[int] = None):
    """(t, light index) of the closest area light quad along the ray, or (inf, None)."""
    best_t, best = np.inf, None
    for index, light in enumerate(scene.lights):
        if index == skip:
            continue
        t = light.intersect(origin, direction, min(t_max, best_t))
        if t is not None and t < best_t:
            best_t, best = t, index
    return best_t, best


def occluded(scene: Scene, origin, direction, t_max: float = np.inf, skip_light: Optional[int] = None,
             stats: Optional[RayStats] = None) -> bool:
    """Plies block every shadow ray; light quads other than skip_light block it too."""
    if nearest_light(scene, origin, direction, t_max, skip_light)[1] is not None:
        return True
    hit = intersect(scene, origin, direction, 0.0, t_max)
    if stats is not None:
        stats.add(hit)
    return hit.found


def spawn_origin(scene: Scene, sp: ShadingPoint, direction: np.ndarray) -> np.ndarray:
    """Offsets a new ray's origin off the ply surface towards the side it leaves on."""
    side = 1.0 if np.dot(direction, sp.geo_normal) >= 0 else -1.0
    return sp.position + side * scene.spawn_epsilon * sp.geo_normal


def shade(scene: Scene, origin, direction, hit: PlyHit) -> Tuple[HitRecord, ShadingPoint]:
    record = scene.table.hit_record(origin, direction, hit.t, hit.segment_id, hit.kind)
    return record, apply_fiber_texture(record, scene.fiber)


# ---------------------- Direct lighting ---------------------- #
def estimate_direct(scene: Scene, sp: ShadingPoint, wi: np.ndarray, sampler: PixelSampler,
                    stats: Optional[RayStats] = None) -> np.ndarray:
    """
    One-light estimate of reflected direct radiance towards wi. A light is picked uniformly among
    the area lights and the environment; one light sample and one BSDF sample are combined with
    the balance heuristic.
    """
    params = scene.bsdf
    count = scene.light_count
    pick = min(int(sampler.next_1d() * count), count - 1)
    on_env = pick >= len(scene.lights)
    flip = 1.0 if np.dot(wi, sp.normal) >= 0 else -1.0
    env_normal = flip * sp.normal
    result = np.zeros(3)

    # light sample
    u = sampler.next_2d()
    if on_env:
        w, pdf_light, radiance = scene.environment.sample(u, env_normal)
        t_max, skip = np.inf, None
    else:
        w, dist, pdf_light, radiance = scene.lights[pick].sample(u, sp.position)
        t_max, skip = dist * (1.0 - SHADOW_SHORTEN), pick
    if pdf_light > 0 and np.any(radiance > 0):
        f = bsdf_eval(sp, wi, w, params)
        if np.any(f > 0) and not occluded(scene, spawn_origin(scene, sp, w), w, t_max, skip, stats):
            weight = balance_heuristic(pdf_light, bsdf_pdf(sp, wi, w, params))
            result += f * abs(np.dot(w, sp.normal)) * radiance * weight / pdf_light

    # BSDF sample
    wo, pdf_bsdf, f = bsdf_sample(sp, wi, params, sampler.next_2d())
    if wo is not None and np.any(f > 0):
        origin = spawn_origin(scene, sp, wo)
        radiance, pdf_light = np.zeros(3), 0.0
        if on_env:
            if not occluded(scene, origin, wo, np.inf, None, stats):
                radiance, pdf_light = scene.environment.eval(wo), scene.environment.pdf(wo, env_normal)
        else:
            light = scene.lights[pick]
            t = light.intersect(origin, wo)
            if t is not None and not occluded(scene, origin, wo, t * (1.0 - SHADOW_SHORTEN), pick, stats):
                radiance, pdf_light = light.emitted(wo), light.pdf(sp.position, wo)
        if np.any(radiance > 0):
            weight = balance_heuristic(pdf_bsdf, pdf_light)
            result += f * abs(np.dot(wo, sp.normal)) * radiance * weight / pdf_bsdf
    return result * count


# ---------------------- Path tracing ---------------------- #
def trace_path(scene: Scene, origin: np.ndarray, direction: np.ndarray, sampler: PixelSampler,
               config: RenderConfig, stats: Optional[RayStats] = None) -> np.ndarray:
    """
    Radiance along one camera ray. With NEE on, emitters reached by BSDF continuations after the
    camera ray are not added; estimate_direct covers them.
    """
    radiance = np.zeros(3)
    throughput = np.ones(3)
    # the pass after the last ply vertex only gathers emission
    for depth in range(config.max_depth + 1):
        if depth == config.max_depth and config.nee:
            break
        hit = intersect(scene, origin, direction)
        if stats is not None:
            stats.add(hit)
        _, light_index = nearest_light(scene, origin, direction, hit.t)
        count_emission = depth == 0 or not config.nee
        if light_index is not None:
            if count_emission:
                radiance += throughput * scene.lights[light_index].emitted(direction)
            break
        if not hit.found:
            if count_emission and scene.environment is not None:
                radiance += throughput * scene.environment.eval(direction)
            break
        if depth == config.max_depth:
            break

        _, sp = shade(scene, origin, direction, hit)
        wi = -direction
        if config.nee:
            radiance += throughput * estimate_direct(scene, sp, wi, sampler, stats)
        wo, pdf, f = bsdf_sample(sp, wi, scene.bsdf, sampler.next_2d())
        if wo is None:
            break
        throughput = throughput * f * abs(np.dot(wo, sp.normal)) / pdf
        if not np.any(throughput > 0):
            break
        if depth + 1 >= config.rr_start_depth:
            survival = float(np.clip(throughput.max(), 0.05, 0.95))
            if sampler.next_1d() >= survival:
                break
            throughput /= survival
        origin, direction = spawn_origin(scene, sp, wo), wo
    return radiance


def render_pixel(scene: Scene, config: RenderConfig, px: int, py: int, stats: Optional[RayStats] = None) -> np.ndarray:
    camera = scene.camera
    sampler = PixelSampler(config.seed, py * camera.width + px)
    total = np.zeros(3)
    for _ in range(config.spp):
        origin, direction = camera.generate_ray(px, py, sampler.next_2d())
        total += trace_path(scene, origin, direction, sampler, config, stats)
    return total / config.spp


def _render_tile(scene: Scene, config: RenderConfig, x0: int, y0: int, x1: int, y1: int):
    block = np.zeros((y1 - y0, x1 - x0, 3))
    stats = RayStats()
    for py in range(y0, y1):
        for px in range(x0, x1):
            block[py - y0, px - x0] = render_pixel(scene, config, px, py, stats)
    return block, stats


def render(scene: Scene, config: RenderConfig) -> np.ndarray:
    """
    Renders the scene's camera view as a linear RGB float image (H, W, 3). Tiles go to a worker
    pool; every pixel draws from its own counter-based stream, so the image does not depend on
    the number of threads.
    """
    width, height = scene.camera.width, scene.camera.height
    size = config.tile_size
    tiles = [(x, y, min(x + size, width), min(y + size, height))
             for y in range(0, height, size) for x in range(0, width, size)]
    image = np.zeros((height, width, 3))
    totals = RayStats()
    start = time.time()
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, config.threads)) as executor:
        futures = {executor.submit(_render_tile, scene, config, *bounds): bounds for bounds in tiles}
        for future in concurrent.futures.as_completed(futures):
            x0, y0, x1, y1 = futures[future]
            block, stats = future.result()
            image[y0:y1, x0:x1] = block
            totals.rays += stats.rays
            totals.tested += stats.tested
            logger.debug(f"Tile ({x0}, {y0}) done")
    per_ray = totals.tested / totals.rays if totals.rays else 0.0
    logger.info(f"Rendered {width}x{height} at {config.spp} spp in {time.time() - start:.1f}s; "
                f"{totals.rays} ply rays, {per_ray:.1f} segments tested per ray "
                f"({100.0 * per_ray / max(len(scene.table), 1):.2f}% of all)")
    return image
