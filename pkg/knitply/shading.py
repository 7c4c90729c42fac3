"""
Fiber-detail shading and the aggregated ply BSDF.

The BSDF has three lobes on the ply surface:
    reflection    kr * G(theta_i + theta_o; long_width) * H(phi_i + phi_o; azim_width) / max(c_i, c_o)
    transmission  kt * (isotropic Gaussian around -wi, folded to the far side) / |cos_o|
    body          (1 - kr - kt) * albedo / pi
where theta is the angle out of the normal plane (towards the fiber tangent), phi the azimuth
in the normal plane measured from the shading normal, c = cos(theta) * |cos(w, n)| and H a
wrapped Gaussian. The whole BSDF is scaled by the fiber shadow factor. Every lobe integrates
to at most its weight against the projected solid angle.
"""
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from knitply.errors import InvariantError, ParseError
from knitply.intersect import HitRecord

logger = logging.getLogger(__name__)

MIN_ELEVATION = np.radians(5.0)
WRAP_TERMS = 4
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------- Fiber texture ---------------------- #
@dataclass(frozen=True)
class FiberTexture:
    fiber_count: int = 16
    amplitude: float = 0.3
    fiber_twist: float = 0.0
    shadow_depth: float = 0.3
    # optional baked tilt profile over one period, values in [-1, 1]; replaces sin(u)
    profile: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.fiber_count < 1:
            raise InvariantError(f"fiber_count must be >= 1, got {self.fiber_count}", stage='render')
        if not 0 <= self.amplitude < np.pi / 2:
            raise InvariantError(f"amplitude must lie in [0, pi/2), got {self.amplitude}", stage='render')
        if not 0 <= self.shadow_depth <= 1:
            raise InvariantError(f"shadow_depth must lie in [0, 1], got {self.shadow_depth}", stage='render')

    def phase(self, beta, s):
        return np.mod(self.fiber_count * np.asarray(beta) + self.fiber_twist * np.asarray(s), 2 * np.pi)

    def tilt(self, u):
        if self.profile is None:
            return np.sin(u)
        samples = np.asarray(self.profile, dtype=float)
        grid = np.linspace(0.0, 2 * np.pi, len(samples), endpoint=False)
        return np.interp(u, grid, samples, period=2 * np.pi)

    def shadow(self, u):
        return 1.0 - self.shadow_depth * (1.0 - np.cos(u)) / 2.0


@dataclass(frozen=True)
class ShadingPoint:
    position: np.ndarray
    geo_normal: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    binormal: np.ndarray
    sigma: float = 1.0
    phase: float = 0.0
    hit: Optional[HitRecord] = None

    @classmethod
    def from_frame(cls, position, tangent, normal, sigma: float = 1.0, geo_normal=None) -> 'ShadingPoint':
        tangent = np.asarray(tangent, dtype=float)
        normal = np.asarray(normal, dtype=float)
        geo = normal if geo_normal is None else np.asarray(geo_normal, dtype=float)
        return cls(np.asarray(position, dtype=float), geo, tangent, normal, np.cross(tangent, normal), sigma)


def _rotate(vector: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    return Rotation.from_rotvec(angle * axis).apply(vector)


def clamp_to_hemisphere(normal: np.ndarray, geo_normal: np.ndarray, min_elevation: float = MIN_ELEVATION) -> np.ndarray:
    """Pulls `normal` back so it stays at least min_elevation above the plane orthogonal to geo_normal."""
    floor = np.sin(min_elevation)
    if np.dot(normal, geo_normal) >= floor:
        return normal
    lateral = normal - np.dot(normal, geo_normal) * geo_normal
    length = np.linalg.norm(lateral)
    if length < 1e-12:
        return geo_normal
    return floor * geo_normal + np.cos(min_elevation) * lateral / length


def apply_fiber_texture(hit: HitRecord, tex: FiberTexture) -> ShadingPoint:
    """
    Perturbs the hit's shading frame with the procedural fiber pattern.

    :param hit: Ray-ply hit with its shading frame, phase beta and arc length.
    :param tex: Fiber texture parameters.
    :return: Shading point with perturbed normal and tangent and the shadow factor.
    """
    frame = hit.shading_frame
    u = float(tex.phase(hit.beta, hit.s))
    tilt = tex.amplitude * float(tex.tilt(u))
    normal = _rotate(frame.normal, frame.tangent, tilt)
    normal = clamp_to_hemisphere(normal, hit.geo_normal)
    normal /= np.linalg.norm(normal)

    tangent = frame.tangent - np.dot(frame.tangent, normal) * normal
    tangent /= np.linalg.norm(tangent)
    twist = 0.5 * tex.amplitude * float(tex.tilt(u + np.pi / 2))
    tangent = _rotate(tangent, normal, twist)
    return ShadingPoint(hit.position, hit.geo_normal, tangent, normal, np.cross(tangent, normal),
                        float(tex.shadow(u)), u, hit)


# ---------------------- BSDF parameters ---------------------- #
@dataclass(frozen=True)
class BsdfParams:
    albedo: Tuple[float, float, float] = (0.8, 0.3, 0.25)
    spec_weight: float = 0.2
    trans_weight: float = 0.2
    long_width: float = 0.2
    azim_width: float = 0.6
    trans_width: float = 0.5

    def __post_init__(self):
        if len(self.albedo) != 3 or any(not 0 <= a <= 1 for a in self.albedo):
            raise InvariantError(f"albedo must be RGB in [0, 1], got {self.albedo}", stage='render')
        for name in ('spec_weight', 'trans_weight'):
            if not 0 <= getattr(self, name) <= 1:
                raise InvariantError(f"{name} must lie in [0, 1], got {getattr(self, name)}", stage='render')
        if self.spec_weight + self.trans_weight > 1 + 1e-9:
            raise InvariantError(f"spec_weight + trans_weight must be <= 1, got "
                                 f"{self.spec_weight + self.trans_weight}", stage='render')
        for name in ('long_width', 'azim_width', 'trans_width'):
            if getattr(self, name) <= 0:
                raise InvariantError(f"{name} must be > 0, got {getattr(self, name)}", stage='render')

    @property
    def body_weight(self) -> float:
        return max(0.0, 1.0 - self.spec_weight - self.trans_weight)

    @property
    def lobe_weights(self) -> np.ndarray:
        return np.array([self.spec_weight, self.trans_weight, self.body_weight])

    def to_dict(self) -> Dict[str, float]:
        values = asdict(self)
        r, g, b = values.pop('albedo')
        return {'albedo_r': r, 'albedo_g': g, 'albedo_b': b, **values}

    @classmethod
    def from_dict(cls, values: Dict[str, float]) -> 'BsdfParams':
        values = dict(values)
        defaults = cls()
        albedo = tuple(float(values.pop(f"albedo_{c}", defaults.albedo[i])) for i, c in enumerate('rgb'))
        unknown = set(values) - {f for f in cls.__dataclass_fields__ if f != 'albedo'}
        if unknown:
            raise ParseError(f"Unknown BSDF parameters: {sorted(unknown)}", stage='render')
        return cls(albedo=albedo, **{k: float(v) for k, v in values.items()})

    def replace(self, **changes) -> 'BsdfParams':
        values = self.to_dict()
        values.update(changes)
        return BsdfParams.from_dict(values)


def write_bsdf_params(params: BsdfParams, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.write("# knitply bsdf parameters\n")
        for key, value in params.to_dict().items():
            f.write(f"{key}={float(value)!r}\n")
    logger.info(f"Wrote BSDF parameters to '{path}'")


def read_bsdf_params(path: str) -> BsdfParams:
    """Reads whitespace separated key=value tokens; '#' starts a comment."""
    if not os.path.isfile(path):
        raise ParseError(f"BSDF parameter file not found: {path}", stage='render')
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            for token in line.split('#', 1)[0].split():
                key, sep, value = token.partition('=')
                if not sep:
                    raise ParseError(f"{path}:{line_no}: expected key=value, got '{token}'", stage='render')
                try:
                    values[key.strip()] = float(value)
                except ValueError:
                    raise ParseError(f"{path}:{line_no}: '{value}' is not a number", stage='render')
    return BsdfParams.from_dict(values)


# ---------------------- Lobes ---------------------- #
def _local(sp: ShadingPoint, w: np.ndarray, flip: float):
    """(sin theta, cos(w, n), cos theta, phi) of directions in the frame of the side `flip` selects."""
    n, b = flip * sp.normal, flip * sp.binormal
    x = w @ sp.tangent
    y = w @ n
    z = w @ b
    sin_theta = np.clip(x, -1.0, 1.0)
    return sin_theta, y, np.sqrt(np.maximum(0.0, 1.0 - sin_theta ** 2)), np.arctan2(z, y)


def _side(sp: ShadingPoint, wi: np.ndarray) -> float:
    return 1.0 if float(np.dot(wi, sp.normal)) >= 0 else -1.0


def _gaussian(x, width):
    return INV_SQRT_2PI / width * np.exp(-0.5 * (x / width) ** 2)


def _wrapped_gaussian(x, width):
    x = np.mod(x + np.pi, 2 * np.pi) - np.pi
    return sum(_gaussian(x + 2 * np.pi * k, width) for k in range(-WRAP_TERMS, WRAP_TERMS + 1))


def _reflection_density(sp, wi, wo, p, flip):
    """Density of the reflection sampler per solid angle, and the lobe's angular kernel."""
    si, ci_n, ci, phi_i = _local(sp, wi, flip)
    so, co_n, co, phi_o = _local(sp, wo, flip)
    kernel = _gaussian(np.arcsin(si) + np.arcsin(so), p.long_width) * _wrapped_gaussian(phi_i + phi_o, p.azim_width)
    with np.errstate(divide='ignore', invalid='ignore'):
        density = np.where(co > 1e-12, kernel / co, 0.0)
    return density, kernel, ci * np.abs(ci_n), co * np.abs(co_n), co_n


def _angle_density(alpha, width):
    """Per-solid-angle density of directions at geodesic angle alpha from a Rayleigh-distributed offset."""
    alpha = np.asarray(alpha, dtype=float)
    planar = np.exp(-0.5 * (alpha / width) ** 2) / (2 * np.pi * width ** 2)
    with np.errstate(divide='ignore', invalid='ignore'):
        jacobian = np.where(alpha > 1e-8, alpha / np.sin(alpha), 1.0)
    return np.where(alpha < np.pi - 1e-6, planar * jacobian, 0.0)


def _transmission_density(sp, wi, wo, p, flip):
    n = flip * sp.normal
    center = -np.asarray(wi, dtype=float)
    folded = wo - 2.0 * (wo @ n)[..., None] * n
    direct = _angle_density(np.arccos(np.clip(wo @ center, -1, 1)), p.trans_width)
    mirrored = _angle_density(np.arccos(np.clip(folded @ center, -1, 1)), p.trans_width)
    # the fold moves everything onto the far side
    return np.where((wo @ n) < 0, direct + mirrored, 0.0)


def bsdf_eval(sp: ShadingPoint, wi: np.ndarray, wo: np.ndarray, p: BsdfParams) -> np.ndarray:
    """
    BSDF value for incident wi and outgoing wo (both pointing away from the surface).

    :return: RGB array of shape (3,) or (n, 3) for an (n, 3) batch of wo.
    """
    wi = np.asarray(wi, dtype=float)
    wo = np.asarray(wo, dtype=float)
    flip = _side(sp, wi)
    batch = wo.ndim > 1
    wo2 = np.atleast_2d(wo)

    _, kernel, ci, co, co_n = _reflection_density(sp, wi, wo2, p, flip)
    same = co_n > 0
    with np.errstate(divide='ignore', invalid='ignore'):
        spec = np.where(same, p.spec_weight * kernel / np.maximum(np.maximum(ci, co), 1e-12), 0.0)
        trans = np.where(co_n < 0, p.trans_weight * _transmission_density(sp, wi, wo2, p, flip) /
                         np.maximum(np.abs(co_n), 1e-12), 0.0)
    body = np.where(same, 1.0, 0.0)[:, None] * (p.body_weight * np.asarray(p.albedo) / np.pi)
    f = sp.sigma * ((spec + trans)[:, None] + body)
    return f if batch else f[0]


def bsdf_pdf(sp: ShadingPoint, wi: np.ndarray, wo: np.ndarray, p: BsdfParams) -> np.ndarray:
    """Solid-angle density of bsdf_sample producing wo."""
    wi = np.asarray(wi, dtype=float)
    wo = np.asarray(wo, dtype=float)
    flip = _side(sp, wi)
    batch = wo.ndim > 1
    wo2 = np.atleast_2d(wo)
    weights = p.lobe_weights / p.lobe_weights.sum()
    reflection, _, _, _, co_n = _reflection_density(sp, wi, wo2, p, flip)
    transmission = _transmission_density(sp, wi, wo2, p, flip)
    body = np.where(co_n > 0, co_n / np.pi, 0.0)
    pdf = weights[0] * reflection + weights[1] * transmission + weights[2] * body
    return pdf if batch else float(pdf[0])


def _normals_from_uniform(u0, u1):
    radius = np.sqrt(-2.0 * np.log(max(1.0 - u0, 1e-300)))
    return radius * np.cos(2 * np.pi * u1), radius * np.sin(2 * np.pi * u1), radius


def bsdf_sample(sp: ShadingPoint, wi: np.ndarray, p: BsdfParams, u) -> Tuple[Optional[np.ndarray], float, np.ndarray]:
    """
    Picks a lobe in proportion to its weight, then samples it.

    :param u: Pair of uniforms in [0, 1).
    :return: (wo, pdf, f); wo is None when the draw leaves the sphere of valid directions.
    """
    wi = np.asarray(wi, dtype=float)
    flip = _side(sp, wi)
    n, b = flip * sp.normal, flip * sp.binormal
    weights = p.lobe_weights / p.lobe_weights.sum()
    cdf = np.cumsum(weights)
    u0, u1 = float(u[0]), float(u[1])
    lobe = int(np.searchsorted(cdf, u0, side='right'))
    lobe = min(lobe, 2)
    low = cdf[lobe - 1] if lobe else 0.0
    u0 = min(max((u0 - low) / max(weights[lobe], 1e-300), 0.0), 1.0 - 1e-12)

    if lobe == 0:
        si, _, _, phi_i = _local(sp, wi, flip)
        z0, z1, _ = _normals_from_uniform(u0, u1)
        theta_o = -np.arcsin(si) + p.long_width * z0
        if abs(theta_o) >= np.pi / 2:
            return None, 0.0, np.zeros(3)
        phi_o = -phi_i + p.azim_width * z1
        wo = np.sin(theta_o) * sp.tangent + np.cos(theta_o) * (np.cos(phi_o) * n + np.sin(phi_o) * b)
    elif lobe == 1:
        _, _, alpha = _normals_from_uniform(u0, 0.0)
        alpha *= p.trans_width
        if alpha >= np.pi - 1e-6:
            return None, 0.0, np.zeros(3)
        center = -wi
        helper = sp.tangent if abs(np.dot(center, sp.tangent)) < 0.9 else n
        e1 = np.cross(center, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(center, e1)
        psi = 2 * np.pi * u1
        wo = np.cos(alpha) * center + np.sin(alpha) * (np.cos(psi) * e1 + np.sin(psi) * e2)
        if np.dot(wo, n) > 0:
            wo = wo - 2.0 * np.dot(wo, n) * n
    else:
        radius = np.sqrt(u0)
        psi = 2 * np.pi * u1
        wo = np.sqrt(max(0.0, 1.0 - u0)) * n + radius * (np.cos(psi) * sp.tangent + np.sin(psi) * b)

    wo = wo / np.linalg.norm(wo)
    pdf = bsdf_pdf(sp, wi, wo, p)
    if pdf <= 0:
        return None, 0.0, np.zeros(3)
    return wo, pdf, bsdf_eval(sp, wi, wo, p)


def directional_albedo(sp: ShadingPoint, wi: np.ndarray, p: BsdfParams, samples: int, seed: int = 0) -> np.ndarray:
    """Monte Carlo integral of f * |cos| over the sphere with uniform directions."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(samples, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    f = bsdf_eval(sp, wi, w, p)
    cos = np.abs(w @ sp.normal)
    return 4 * np.pi * np.mean(f * cos[:, None], axis=0)
