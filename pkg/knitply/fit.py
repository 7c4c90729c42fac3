"""
Fits BSDF parameters by minimizing the image loss between renders and reference images.

Free parameters live on box bounds and are optimized in an unbounded space through a
logistic map, so the simplex never leaves the bounds. The transmission weight's upper
bound shrinks to 1 - spec_weight, which keeps every candidate a valid BSDF.
"""
import configparser
import dataclasses
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import expit, logit

from knitply.errors import BudgetExhausted, InvariantError, KnitPlyError, ParseError
from knitply.imageio import box_downscale, read_image
from knitply.render import RenderConfig, render
from knitply.scene import Scene, load_scene
from knitply.shading import BsdfParams, read_bsdf_params, write_bsdf_params

logger = logging.getLogger(__name__)

# 'albedo' moves all three channels together
FREE_NAMES = ('albedo', 'albedo_r', 'albedo_g', 'albedo_b', 'spec_weight', 'trans_weight',
              'long_width', 'azim_width', 'trans_width')
# spec_weight has to be decoded before trans_weight
DECODE_ORDER = {name: k for k, name in enumerate(FREE_NAMES)}
LOGISTIC_EDGE = 1e-6
SIMPLEX_STEP = 1.0


def mean_squared_error(image: np.ndarray, reference: np.ndarray) -> float:
    return float(np.mean((np.asarray(image, dtype=float) - np.asarray(reference, dtype=float)) ** 2))


@dataclass
class FitProblem:
    """
    :param scenes: Scenes sharing the fitted material, e.g. a front-lit and a back-lit swatch.
    :param references: One linear RGB reference image per scene, at render resolution.
    :param free: Ordered mapping of parameter name to (lo, hi) bounds.
    :param initial: Starting parameters; fixed parameters keep these values.
    :param budget: Maximum number of loss evaluations.
    :param config: Render settings used by every evaluation, seed included.
    :param downscale: Linear resolution factor applied to renders and references before comparing.
    :param metric: Image distance, mean squared error by default.
    """
    scenes: List[Scene]
    references: List[np.ndarray]
    free: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    initial: BsdfParams = field(default_factory=BsdfParams)
    budget: int = 60
    config: RenderConfig = field(default_factory=RenderConfig)
    downscale: float = 0.1
    metric: Callable[[np.ndarray, np.ndarray], float] = mean_squared_error

    def __post_init__(self):
        if not self.scenes or len(self.scenes) != len(self.references):
            raise InvariantError(f"Need one reference per scene, got {len(self.scenes)} scenes and "
                                 f"{len(self.references)} references", stage='fit')
        if not 0 < self.downscale <= 1:
            raise InvariantError(f"downscale must lie in (0, 1], got {self.downscale}", stage='fit')
        for name, (lo, hi) in self.free.items():
            if name not in FREE_NAMES:
                raise InvariantError(f"Unknown free parameter '{name}', expected one of {FREE_NAMES}", stage='fit')
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise InvariantError(f"Bounds of '{name}' must be finite with lo < hi, got ({lo}, {hi})", stage='fit')
        self.free = dict(sorted(self.free.items(), key=lambda item: DECODE_ORDER[item[0]]))
        self.targets = []
        for scene, reference in zip(self.scenes, self.references):
            expected = (scene.camera.height, scene.camera.width)
            if np.asarray(reference).shape[:2] != expected:
                raise InvariantError(f"Reference of shape {np.asarray(reference).shape[:2]} does not match the "
                                     f"{expected} render", stage='fit')
            self.targets.append(box_downscale(reference, self.downscale))

    @property
    def dimension(self) -> int:
        return len(self.free)

    def __repr__(self):
        return (f"FitProblem(scenes={len(self.scenes)}, free={list(self.free)}, budget={self.budget}, "
                f"spp={self.config.spp}, seed={self.config.seed})")


class FitResult(NamedTuple):
    params: BsdfParams
    loss: float
    trace: pd.DataFrame

    @property
    def best_losses(self) -> List[float]:
        return self.trace['best_loss'].tolist()


class _BudgetReached(Exception):
    pass


# ---------------------- Reparameterization ---------------------- #
def _bounds(name: str, lo: float, hi: float, values: Dict[str, float]) -> Tuple[float, float]:
    if name == 'trans_weight':
        hi = min(hi, 1.0 - values['spec_weight'])
        lo = min(lo, hi)
    return lo, hi


def _value(params: BsdfParams, name: str) -> float:
    values = params.to_dict()
    if name == 'albedo':
        return float(np.mean(params.albedo))
    return float(values[name])


def decode(z: np.ndarray, problem: FitProblem) -> BsdfParams:
    """Maps an unbounded simplex point to parameters inside the box bounds."""
    values = problem.initial.to_dict()
    for x, (name, (lo, hi)) in zip(np.atleast_1d(z), problem.free.items()):
        lo, hi = _bounds(name, lo, hi, values)
        value = lo + (hi - lo) * float(expit(x))
        if name == 'albedo':
            values.update(albedo_r=value, albedo_g=value, albedo_b=value)
        else:
            values[name] = value
    if values['spec_weight'] + values['trans_weight'] > 1.0:
        values['trans_weight'] = 1.0 - values['spec_weight']
    return BsdfParams.from_dict(values)


def encode(params: BsdfParams, problem: FitProblem) -> np.ndarray:
    """Inverse of decode; values on or outside a bound land just inside it."""
    values = params.to_dict()
    z = []
    for name, (lo, hi) in problem.free.items():
        lo, hi = _bounds(name, lo, hi, values)
        if hi <= lo:
            z.append(0.0)
            continue
        fraction = np.clip((_value(params, name) - lo) / (hi - lo), LOGISTIC_EDGE, 1.0 - LOGISTIC_EDGE)
        z.append(float(logit(fraction)))
    return np.array(z)


# ---------------------- Loss and optimizer ---------------------- #
def loss(params: BsdfParams, problem: FitProblem) -> float:
    """
    Mean over scenes of the image metric between the downscaled render and the downscaled
    reference. Every render uses the problem's fixed seed, so equal parameters give equal losses.
    """
    values = []
    for scene, target in zip(problem.scenes, problem.targets):
        image = render(scene.with_bsdf(params), problem.config)
        values.append(problem.metric(box_downscale(image, problem.downscale), target))
    return float(np.mean(values))


def _trace_frame(records: List[Dict]) -> pd.DataFrame:
    frame = pd.DataFrame(records)
    frame['best_loss'] = frame['loss'].cummin()
    return frame


def fit(problem: FitProblem) -> FitResult:
    """
    Nelder-Mead over the free parameters, stopped after problem.budget loss evaluations.

    :return: FitResult with the best parameters found, their loss and a per-evaluation trace
             (columns evaluation, loss, best_loss and one per BSDF parameter).
    """
    records: List[Dict] = []
    best = {'loss': np.inf, 'params': problem.initial}

    def evaluate(params: BsdfParams) -> float:
        value = loss(params, problem)
        records.append({'evaluation': len(records) + 1, 'loss': value, **params.to_dict()})
        if value < best['loss']:
            best.update(loss=value, params=params)
        logger.info(f"Evaluation {len(records)}/{problem.budget}: loss {value:.6g} (best {best['loss']:.6g})")
        return value

    if problem.dimension == 0:
        evaluate(problem.initial)
        return FitResult(problem.initial, best['loss'], _trace_frame(records))
    if problem.budget < problem.dimension + 2:
        raise InvariantError(f"Budget {problem.budget} is below dimension + 2 = {problem.dimension + 2}",
                             stage='fit')

    def objective(z: np.ndarray) -> float:
        if len(records) >= problem.budget:
            raise _BudgetReached()
        return evaluate(decode(z, problem))

    z0 = encode(problem.initial, problem)
    simplex = np.vstack([z0] + [z0 + SIMPLEX_STEP * row for row in np.eye(problem.dimension)])
    logger.info(f"Fitting {list(problem.free)} with a budget of {problem.budget} evaluations")
    converged = False
    try:
        result = minimize(objective, z0, method='Nelder-Mead',
                          options={'maxfev': problem.budget, 'initial_simplex': simplex,
                                   'xatol': 1e-4, 'fatol': 1e-12})
        converged = bool(result.success)
    except _BudgetReached:
        pass

    trace = _trace_frame(records)
    if not converged:
        warnings.warn(BudgetExhausted(f"Fit stopped after {len(records)} evaluations without converging; "
                                      f"best loss {best['loss']:.6g}", best['params'], trace['best_loss'].tolist()))
    logger.info(f"Fit finished after {len(records)} evaluations, best loss {best['loss']:.6g}")
    return FitResult(best['params'], best['loss'], trace)


# ---------------------- Fit spec files ---------------------- #
def _paths(text: str, base: str) -> List[str]:
    paths = [p.strip() for p in text.replace('\n', ',').split(',') if p.strip()]
    return [p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p)) for p in paths]


def load_fit_spec(path: str, config=None, overrides: Optional[Dict[str, object]] = None) -> FitProblem:
    """
    Reads a fit spec INI file::

        [fit]
        scenes = swatch_front.ini, swatch_back.ini
        references = front.pfm, back.pfm
        params = initial.bsdf
        budget = 60
        seed = 0
        spp = 16
        downscale = 0.1

        [free]
        albedo_r = 0.05, 0.95

    Optional mesh, plies and grid entries in [fit] replace those of every scene. Relative paths
    resolve against the spec file. Missing [fit] keys fall back to the pipeline
    configuration's [fit] section.

    :param config: Optional PipelineConfig supplying defaults and the render settings.
    :param overrides: [fit] values taking precedence over the file (None values are skipped).
    """
    if not os.path.exists(path):
        raise ParseError(f"Fit spec not found: {path}", stage='fit')
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding='utf-8')
    except configparser.Error as e:
        raise ParseError(f"Malformed fit spec '{path}': {e}", stage='fit')
    if not parser.has_section('fit'):
        raise ParseError(f"Fit spec '{path}' has no [fit] section", stage='fit')
    base = os.path.dirname(os.path.abspath(path))
    section = dict(parser.items('fit'))
    section.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})

    def setting(key: str, default: str) -> str:
        value = section.get(key, '').strip()
        if value:
            return value
        if config is not None and config.get('fit', key):
            return config.get('fit', key)
        return default

    try:
        shared = {key: _paths(section[key], base)[0]
                  for key in ('mesh', 'plies', 'grid') if section.get(key, '').strip()}
        bsdf, fiber = (config.bsdf_params(), config.fiber_texture()) if config is not None else (None, None)
        scenes = [load_scene(p, shared, bsdf, fiber) for p in _paths(section.get('scenes', ''), base)]
        references = [read_image(p) for p in _paths(section.get('references', ''), base)]
        params_path = section.get('params', '').strip()
        if params_path:
            initial = read_bsdf_params(_paths(params_path, base)[0])
        elif config is not None:
            initial = config.bsdf_params()
        else:
            initial = BsdfParams()
        free = {}
        if parser.has_section('free'):
            for name, bounds in parser.items('free'):
                lo, hi = (float(v) for v in bounds.split(','))
                free[name] = (lo, hi)
        render_config = config.render_config() if config is not None else RenderConfig()
        render_config = dataclasses.replace(render_config, spp=int(setting('spp', '16')),
                                            seed=int(setting('seed', '0')))
        problem = FitProblem(scenes, references, free, initial, int(setting('budget', '60')), render_config,
                             float(setting('downscale', '0.1')))
    except KnitPlyError:
        raise
    except (KeyError, ValueError, TypeError) as e:
        raise ParseError(f"Bad fit spec entry in '{path}': {e}", stage='fit')
    logger.info(f"Loaded fit spec '{path}': {problem}")
    return problem


def plot_trace(trace: pd.DataFrame, path: str) -> None:
    plt.figure(figsize=(8, 5))
    plt.plot(trace['evaluation'], trace['loss'], '.', color='gray', label='loss')
    plt.plot(trace['evaluation'], trace['best_loss'], '-', color='tab:blue', label='best so far')
    plt.yscale('log' if (trace['loss'] > 0).all() else 'linear')
    plt.title('Fit loss trace')
    plt.xlabel('Evaluation')
    plt.ylabel('Loss')
    plt.legend()
    plt.tight_layout()
    plt.savefig(path)
    plt.close()
    logger.info(f"Saved loss trace plot to {path}")


def write_fit_outputs(result: FitResult, output_dir: str, stem: str = 'fit') -> Dict[str, str]:
    """Writes <stem>.bsdf, <stem>_trace.csv and <stem>_trace.png into output_dir."""
    os.makedirs(output_dir, exist_ok=True)
    paths = {'params': os.path.join(output_dir, f"{stem}.bsdf"),
             'trace': os.path.join(output_dir, f"{stem}_trace.csv"),
             'plot': os.path.join(output_dir, f"{stem}_trace.png")}
    write_bsdf_params(result.params, paths['params'])
    result.trace.to_csv(paths['trace'], index=False)
    logger.info(f"Wrote loss trace to {paths['trace']}")
    plot_trace(result.trace, paths['plot'])
    return paths
