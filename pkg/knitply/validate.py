"""
Reduced-scale oracle checks over a swatch, collected into a pass/fail table.
"""
import logging
import os
import tempfile
import time
import warnings
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from knitply.errors import BudgetExhausted
from knitply.fit import FitProblem, fit
from knitply.mapping import build_grid, transform_plies
from knitply.pattern import compute_partners, load_pattern, stitch, tile, tiling_oracle
from knitply.plygen import PLY_VERTEX, PlyParams, generate_all_plies, read_plb, resample_polyline, rmf_frames, write_plb
from knitply.render import RenderConfig, estimate_direct, intersect, intersect_bruteforce, render
from knitply.sampling import PixelSampler
from knitply.scene import AreaLight, Scene, build_swatch_scene, swatch_mesh
from knitply.shading import BsdfParams, FiberTexture, ShadingPoint, directional_albedo

logger = logging.getLogger(__name__)

REPO_DATA = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'data')
DEFAULT_PATTERN = os.path.join(REPO_DATA, 'patterns', 'stockinette.kcf')
FIXTURE_PATTERNS = tuple(os.path.join(REPO_DATA, 'patterns', name)
                         for name in ('straight.kcf', 'stockinette.kcf', 'fringe.kcf'))

T_TOLERANCE = 1e-6
AGREEMENT = 0.999
ACCELERATION = 0.05
ALBEDO_LIMIT = 1.01
DIRECT_TOLERANCE = 0.01
QUADRATURE_POINTS = 400
FURNACE_TOLERANCE = 0.02
FURNACE_DEPTH = 32
NEE_TOLERANCE = 0.01
FIT_TOLERANCE = 0.05
# inverse-crime ground truth and start, as in data/params/truth.bsdf and initial.bsdf
FIT_TRUTH = BsdfParams((0.55, 0.3, 0.25), spec_weight=0.3, trans_weight=0.25, long_width=0.3)
FIT_START = BsdfParams((0.5, 0.3, 0.25))
FIT_BOUNDS = {'albedo_r': (0.05, 0.99), 'spec_weight': (0.02, 0.7), 'trans_weight': (0.02, 0.7),
              'long_width': (0.05, 0.8)}


def swatch_yarns(pattern_path: str = DEFAULT_PATTERN, n: int = 4, m: int = 4):
    cell = load_pattern(pattern_path)
    return stitch(tile(cell, compute_partners(cell), n, m), cell)


def swatch_plies(pattern_path: str = DEFAULT_PATTERN, n: int = 4, m: int = 4,
                 params: Optional[PlyParams] = None, threads: int = 1):
    """Texture-space plies of an n x m open tiling of a pattern cell."""
    return generate_all_plies(swatch_yarns(pattern_path, n, m), params or PlyParams(), threads)


def _row(check: str, value: float, threshold: float, passed: bool, detail: str = '') -> Dict:
    return {'check': check, 'value': float(value), 'threshold': float(threshold), 'passed': bool(passed),
            'detail': detail}


# ---------------------- Checks ---------------------- #
def check_stitching(pattern_paths: Sequence[str] = FIXTURE_PATTERNS, sizes=(1, 3)) -> Dict:
    """Stitched vertex totals equal instantiated minus joined, and components match union-find."""
    failures, cases = [], 0
    for path in pattern_paths:
        cell = load_pattern(path)
        labels = compute_partners(cell)
        for n in sizes:
            for m in sizes:
                for wrap in (False, True):
                    cases += 1
                    yarns = stitch(tile(cell, labels, n, m, wrap, wrap), cell)
                    edges, components = tiling_oracle(cell, n, m, wrap, wrap)
                    instantiated = n * m * sum(len(c) for c in cell.curves)
                    if (sum(y.vertex_count for y in yarns) != instantiated - len(edges)
                            or [(min(y.nodes), y.vertex_count) for y in yarns] != components):
                        failures.append(f"{os.path.basename(path)} {n}x{m} wrap={wrap}")
    return _row('stitch_conservation', cases - len(failures), cases, not failures, '; '.join(failures))


def check_plb_records(plies) -> Dict:
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'plies.plb')
        write_plb(plies, path)
        loaded = read_plb(path)
    same = len(loaded) == len(plies) and all(
        np.array_equal(a.positions, b.positions.astype(np.float32)) for a, b in zip(loaded, plies))
    return _row('plb_record_bytes', PLY_VERTEX.itemsize, 28, PLY_VERTEX.itemsize == 28 and same,
                'round trip ok' if same else 'round trip mismatch')


def check_rmf(yarns, params: PlyParams) -> Dict:
    worst = 0.0
    for yarn in yarns:
        offset = yarn.closure_offset if yarn.closed else None
        centers, _ = resample_polyline(yarn.vertices, params.step, offset)
        frames = np.array([f.matrix() for f in rmf_frames(centers, None, yarn.closed, offset)])
        gram = np.einsum('nij,nik->njk', frames, frames)
        worst = max(worst, float(np.abs(gram - np.eye(3)).max()))
    return _row('rmf_orthonormality', worst, 1e-9, worst <= 1e-9)


def check_mapping(plies, threads: int = 1) -> Dict:
    mesh = swatch_mesh(plies)
    grid = build_grid(mesh, plies)
    fast = transform_plies(grid, mesh, plies, threads=threads)
    slow = transform_plies(None, mesh, plies, threads=threads)
    mismatched = sum(not (np.array_equal(a.positions, b.positions) and np.array_equal(a.normals, b.normals))
                     for a, b in zip(fast, slow))
    return _row('mapping_grid_vs_bruteforce', mismatched, 0, mismatched == 0, f"{len(plies)} plies")


def camera_rays(scene: Scene, count: int, seed: int = 0):
    """Rays through uniformly drawn image positions of the scene camera."""
    rng = np.random.default_rng(seed)
    camera = scene.camera
    for px, py, u0, u1 in zip(rng.integers(0, camera.width, count), rng.integers(0, camera.height, count),
                              rng.random(count), rng.random(count)):
        yield camera.generate_ray(int(px), int(py), (u0, u1))


def check_intersection(scene: Scene, rays: int, seed: int = 0) -> List[Dict]:
    """Two-stage against brute-force nearest hits on camera rays, and the share of segment tests."""
    agree, hits, tested, brute_tested = 0, 0, 0, 0
    for origin, direction in camera_rays(scene, rays, seed):
        fast = intersect(scene, origin, direction)
        slow = intersect_bruteforce(scene, origin, direction)
        tested += fast.tested
        brute_tested += slow.tested
        hits += slow.found
        if fast.found == slow.found and (not slow.found or abs(fast.t - slow.t) <= T_TOLERANCE):
            agree += 1
    agreement = agree / rays
    ratio = tested / brute_tested
    return [_row('two_stage_vs_bruteforce', agreement, AGREEMENT, agreement >= AGREEMENT,
                 f"{rays} rays, {hits} hits"),
            _row('acceleration_ratio', ratio, ACCELERATION, ratio <= ACCELERATION,
                 f"{tested / rays:.1f} of {len(scene.table)} segments per ray")]


def check_bsdf_energy(draws: int, samples: int, seed: int = 0) -> Dict:
    """Directional albedo over random parameter draws and incident directions."""
    rng = np.random.default_rng(seed)
    sp = ShadingPoint.from_frame(np.zeros(3), [1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    worst = 0.0
    for k in range(draws):
        kr, kt, _ = rng.dirichlet((1.0, 1.0, 1.0))
        params = BsdfParams((1.0, 1.0, 1.0), kr, kt, *rng.uniform((0.05, 0.1, 0.1), (0.6, 1.5, 1.5)))
        wi = rng.normal(size=3)
        wi /= np.linalg.norm(wi)
        worst = max(worst, float(directional_albedo(sp, wi, params, samples, seed + k).max()))
    return _row('bsdf_energy', worst, ALBEDO_LIMIT, worst <= ALBEDO_LIMIT, f"{draws} draws x {samples} samples")


# ---------------------- Render checks ---------------------- #
def _white_lambert_scene(plies, preset: str, size: int, threads: int) -> Scene:
    return build_swatch_scene(plies, preset=preset, resolution=(64, 64), width=size, height=size,
                              bsdf=BsdfParams((1.0, 1.0, 1.0), 0.0, 0.0), fiber=FiberTexture(shadow_depth=0.0),
                              threads=threads)


def check_furnace(plies, spp: int, size: int = 16, seed: int = 0, threads: int = 1) -> List[Dict]:
    """
    A white Lambertian swatch under a unit environment. Pure BSDF sampling without roulette must
    return exactly one in every pixel; with NEE and roulette only the image mean is compared.
    """
    scene = _white_lambert_scene(plies, 'furnace', size, threads)
    exact = render(scene, RenderConfig(spp=spp, max_depth=FURNACE_DEPTH, rr_start_depth=FURNACE_DEPTH + 1,
                                       seed=seed, threads=threads, nee=False))
    deviation = float(np.abs(exact - 1.0).max())
    sampled = render(scene, RenderConfig(spp=spp, max_depth=FURNACE_DEPTH, seed=seed, threads=threads))
    mean_error = abs(float(sampled.mean()) - 1.0)
    return [_row('furnace_per_pixel', deviation, FURNACE_TOLERANCE, deviation <= FURNACE_TOLERANCE,
                 f"{size}x{size} at {spp} spp, NEE off"),
            _row('furnace_nee_mean', mean_error, FURNACE_TOLERANCE, mean_error <= FURNACE_TOLERANCE,
                 f"{size}x{size} at {spp} spp, NEE on")]


def area_light_scene(plies, size: int = 16, threads: int = 1, bsdf: Optional[BsdfParams] = None) -> Scene:
    """Swatch under one wide emitter above the camera and no environment."""
    base = build_swatch_scene(plies, resolution=(64, 64), width=size, height=size, bsdf=bsdf, threads=threads)
    lo, hi = base.mesh.positions.min(axis=0), base.mesh.positions.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo)[:2].max())
    light = AreaLight(center + np.array([-4.0, -4.0, 2.0]) * extent, np.array([0.0, 8.0, 0.0]) * extent,
                      np.array([8.0, 0.0, 0.0]) * extent, np.full(3, 2.0), 'sky')
    return Scene(base.mesh, base.grid, base.plies, base.camera, base.bsdf, base.fiber, [light], None, base.shell)


def check_nee_convergence(plies, spp: int, size: int = 16, seed: int = 0, threads: int = 1) -> Dict:
    """Image means with and without next-event estimation on the wide-emitter swatch."""
    scene = area_light_scene(plies, size, threads)
    config = RenderConfig(spp=spp, max_depth=4, seed=seed, threads=threads)
    with_nee = float(render(scene, config).mean())
    without = float(render(scene, replace(config, nee=False)).mean())
    relative = abs(with_nee - without) / max(abs(without), 1e-12)
    return _row('nee_convergence', relative, NEE_TOLERANCE, relative <= NEE_TOLERANCE,
                f"means {with_nee:.6g} / {without:.6g} at {spp} spp")


def check_direct_lighting(plies, samples: int, seed: int = 0, albedo: float = 0.5) -> Dict:
    """
    estimate_direct at an upward facing Lambertian point between the swatch and the front emitter,
    against a midpoint quadrature over the emitter plus the unblocked part of the environment.
    """
    scene = build_swatch_scene(plies, bsdf=BsdfParams((albedo,) * 3, 0.0, 0.0), width=4, height=4)
    light = scene.lights[0]
    center = light.corner + 0.5 * (light.edge_u + light.edge_v)
    point = center - np.array([0.0, 0.0, 0.5 * float(center[2] - scene.mesh.positions[:, 2].max())])
    up = np.array([0.0, 0.0, 1.0])
    sp = ShadingPoint.from_frame(point, [1.0, 0.0, 0.0], up)

    n = QUADRATURE_POINTS
    a, b = np.meshgrid((np.arange(n) + 0.5) / n, (np.arange(n) + 0.5) / n)
    offsets = light.corner + a[..., None] * light.edge_u + b[..., None] * light.edge_v - point
    dist2 = np.sum(offsets ** 2, axis=-1)
    cos_point = offsets @ up / np.sqrt(dist2)
    cos_light = -(offsets @ light.normal) / np.sqrt(dist2)
    projected = float(np.sum(cos_point * cos_light / dist2)) * light.area / n ** 2
    ambient = scene.environment.eval(up)[0]
    exact = albedo / np.pi * (light.radiance[0] * projected + ambient * (np.pi - projected))

    sampler = PixelSampler(seed, 0)
    estimate = float(np.mean([estimate_direct(scene, sp, up, sampler)[0] for _ in range(samples)]))
    relative = abs(estimate - exact) / exact
    return _row('direct_lighting_quadrature', relative, DIRECT_TOLERANCE, relative <= DIRECT_TOLERANCE,
                f"estimate {estimate:.6g}, quadrature {exact:.6g}, {samples} samples")


# ---------------------- Inverse-crime fit ---------------------- #
def check_fit(plies, size: int = 64, spp: int = 64, budget: int = 400, seed: int = 0, threads: int = 1) -> Dict:
    """
    Renders front- and back-lit references with FIT_TRUTH and fits the FIT_BOUNDS parameters back
    from FIT_START with the same seed.
    """
    config = RenderConfig(spp=spp, seed=seed, threads=threads)
    scenes = [build_swatch_scene(plies, preset, resolution=(64, 64), width=size, height=size, bsdf=FIT_TRUTH,
                                 threads=threads) for preset in ('front', 'back')]
    references = [render(scene, config) for scene in scenes]
    problem = FitProblem(scenes, references, dict(FIT_BOUNDS), FIT_START, budget, config)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', BudgetExhausted)
        result = fit(problem)
    truth, fitted = FIT_TRUTH.to_dict(), result.params.to_dict()
    errors = {name: abs(fitted[name] - truth[name]) / abs(truth[name]) for name in FIT_BOUNDS}
    worst = max(errors.values())
    detail = ', '.join(f"{name} {error:.3g}" for name, error in errors.items())
    return _row('inverse_crime_fit', worst, FIT_TOLERANCE, worst <= FIT_TOLERANCE,
                f"{detail}; {len(result.trace)} evaluations, {size}x{size} at {spp} spp")


def run_validation(pattern_path: str = DEFAULT_PATTERN, rays: int = 2000, bsdf_draws: int = 20,
                   bsdf_samples: int = 100000, seed: int = 0, threads: int = 1,
                   params: Optional[PlyParams] = None, furnace_spp: int = 64, nee_spp: int = 256,
                   direct_samples: int = 100000, render_size: int = 16, fit_check: bool = False,
                   fit_budget: int = 400, fit_spp: int = 64, fit_size: int = 64) -> pd.DataFrame:
    """
    Runs every oracle at reduced scale on a 4 x 4 swatch of the given pattern. Render checks use
    render_size square images; the inverse-crime fit only runs with fit_check.

    :return: DataFrame with columns check, value, threshold, passed, detail, seconds.
    """
    params = params or PlyParams()
    rows = []

    def timed(fn, *args):
        start = time.time()
        result = fn(*args)
        for row in (result if isinstance(result, list) else [result]):
            row['seconds'] = round(time.time() - start, 3)
            rows.append(row)
            logger.info(f"{row['check']}: {'pass' if row['passed'] else 'FAIL'} "
                        f"(value {row['value']:.6g}, threshold {row['threshold']:.6g})")

    yarns = swatch_yarns(pattern_path)
    plies = generate_all_plies(yarns, params, threads)
    timed(check_stitching)
    timed(check_plb_records, plies)
    timed(check_rmf, yarns, params)
    timed(check_mapping, plies, threads)
    scene = build_swatch_scene(plies, resolution=(64, 64), threads=threads)
    timed(check_intersection, scene, rays, seed)
    timed(check_bsdf_energy, bsdf_draws, bsdf_samples, seed)
    timed(check_direct_lighting, plies, direct_samples, seed)
    timed(check_furnace, plies, furnace_spp, render_size, seed, threads)
    timed(check_nee_convergence, plies, nee_spp, render_size, seed, threads)
    if fit_check:
        timed(check_fit, plies, fit_size, fit_spp, fit_budget, seed, threads)
    report = pd.DataFrame(rows, columns=['check', 'value', 'threshold', 'passed', 'detail', 'seconds'])
    logger.info(f"Validation: {int(report['passed'].sum())}/{len(report)} checks passed")
    return report
