#!/usr/bin/env python3
"""
Command-line entry point. Every stage reads and writes files, so a run can be resumed or
repeated from any stage:

    tile -> plies -> grid -> map -> render -> fit

plus `validate` (oracle checks at reduced scale) and `stats` (counts and grid occupancy).
Exit codes: 0 success, 1 usage error, 2 data or invariant error.
"""
import argparse
import logging
import os
import sys
import time
import warnings

from knitply.config import load_config
from knitply.errors import BudgetExhausted, KnitPlyError
from knitply.fit import fit, load_fit_spec, write_fit_outputs
from knitply.imageio import write_pfm, write_png
from knitply.mapping import build_grid, read_mgb, transform_plies, write_mapped, write_mgb
from knitply.mesh import load_obj
from knitply.pattern import compute_partners, load_pattern, read_yarns, stitch, tile, write_yarns
from knitply.plygen import generate_all_plies, read_plb, write_plb
from knitply.render import render
from knitply.scene import load_scene
from knitply.stats import render_heatmap, summarize
from knitply.validate import DEFAULT_PATTERN, run_validation

logger = logging.getLogger(__name__)

USAGE_ERROR = 1
DATA_ERROR = 2


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _pair(text: str):
    parts = [p for p in text.replace('x', ',').split(',') if p.strip()]
    if len(parts) not in (1, 2):
        raise argparse.ArgumentTypeError(f"expected 'a,b' or 'a', got '{text}'")
    return parts[0], parts[-1]


def _resolution(text: str):
    u, v = _pair(text)
    return int(u), int(v)


def _period(text: str):
    u, v = _pair(text)
    return float(u), float(v)


def parse_args(argv=None):
    parser = CliParser(prog='knitply', description="Procedural knitted fabric modeling and ply-level rendering.")
    parser.add_argument('--config', help='INI file overriding config/config.ini')
    parser.add_argument('--seed', type=int, help='Render and fit seed')
    parser.add_argument('--threads', type=int, help='Worker threads (default: physical cores)')
    parser.add_argument('--output-dir', default='out', help='Directory for outputs (default: out)')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true', help='Debug logging')
    verbosity.add_argument('--quiet', action='store_true', help='Warnings and errors only')
    commands = parser.add_subparsers(dest='command', metavar='command', required=True)

    p = commands.add_parser('tile', help='Tile and stitch a pattern cell into yarn curves')
    p.add_argument('pattern', help='Pattern cell (.kcf)')
    p.add_argument('-n', type=int, help='Copies along u')
    p.add_argument('-m', type=int, help='Copies along v')
    p.add_argument('--wrap-u', action='store_true', default=None, help='Join the last column to the first')
    p.add_argument('--wrap-v', action='store_true', default=None, help='Join the last row to the first')
    p.add_argument('--density', type=float, help='Cell repetitions per original tile size')
    p.add_argument('-o', '--output', default='yarns.yrn', help='Yarn file name inside the output directory')

    p = commands.add_parser('plies', help='Generate twisted ply centerlines from yarn curves')
    p.add_argument('yarns', help='Yarn file (.yrn)')
    p.add_argument('--num-plies', type=int)
    p.add_argument('--ply-radius', type=float)
    p.add_argument('--ply-offset', type=float)
    p.add_argument('--twist-rate', type=float)
    p.add_argument('-o', '--output', default='plies.plb')

    p = commands.add_parser('grid', help='Bin mesh triangles and ply segments into a UV grid')
    p.add_argument('--mesh', required=True, help='Base mesh (.obj)')
    p.add_argument('--plies', required=True, help='Texture-space plies (.plb)')
    p.add_argument('--resolution', type=_resolution, help="Grid resolution 'Gu,Gv'")
    p.add_argument('--uv-period', type=_period, help="Fold period 'Pu,Pv' of a wrapped tiling")
    p.add_argument('-o', '--output', default='grid.mgb')

    p = commands.add_parser('map', help='Map texture-space plies onto the base mesh')
    p.add_argument('--mesh', required=True)
    p.add_argument('--plies', required=True, help='Texture-space plies (.plb)')
    p.add_argument('--grid', help='Grid from the grid command; brute force over all triangles when omitted')
    p.add_argument('--shell-base', type=float, help='Height of the ply layer above the surface')
    p.add_argument('--uv-period', type=_period)
    p.add_argument('-o', '--output', default='mapped.plb')

    p = commands.add_parser('render', help='Path trace a scene')
    p.add_argument('scene', help='Scene file (.ini)')
    p.add_argument('--mesh', help='Replaces the scene mesh')
    p.add_argument('--plies', help='Replaces the scene mapped plies')
    p.add_argument('--grid', help='Replaces the scene grid')
    p.add_argument('--bsdf', help='Replaces the scene BSDF parameters')
    p.add_argument('--spp', type=int)
    p.add_argument('--max-depth', type=int)
    p.add_argument('--no-nee', action='store_true', help='Pure BSDF sampling, no next-event estimation')
    p.add_argument('--exposure', type=float)
    p.add_argument('-o', '--output', default='render', help='Output stem; writes <stem>.pfm and <stem>.png')

    p = commands.add_parser('fit', help='Fit BSDF parameters against reference images')
    p.add_argument('spec', help='Fit spec (.ini)')
    p.add_argument('--plies', help='Mapped plies shared by every scene')
    p.add_argument('--grid', help='Grid shared by every scene')
    p.add_argument('--budget', type=int)
    p.add_argument('--spp', type=int)
    p.add_argument('-o', '--output', default='fit', help='Output stem')

    p = commands.add_parser('validate', help='Run the oracle checks on a reduced-scale swatch')
    p.add_argument('--pattern', default=DEFAULT_PATTERN)
    p.add_argument('--rays', type=int, default=2000)
    p.add_argument('--bsdf-draws', type=int, default=20)
    p.add_argument('--bsdf-samples', type=int, default=100000)
    p.add_argument('--direct-samples', type=int, default=100000)
    p.add_argument('--furnace-spp', type=int, default=64)
    p.add_argument('--nee-spp', type=int, default=256)
    p.add_argument('--render-size', type=int, default=16, help='Image side of the render checks')
    p.add_argument('--fit', action='store_true', help='Also run the inverse-crime fit check (slow)')
    p.add_argument('--fit-budget', type=int, default=400)
    p.add_argument('--fit-spp', type=int, default=64)
    p.add_argument('--fit-size', type=int, default=64)
    p.add_argument('-o', '--output', default='validation.csv')

    p = commands.add_parser('stats', help='Counts and grid occupancy of pipeline artifacts')
    p.add_argument('--yarns')
    p.add_argument('--plies', help='Texture-space or mapped plies (.plb)')
    p.add_argument('--grid')
    p.add_argument('--heatmap', help='PNG file name for a segments-per-cell heatmap (needs --grid)')
    p.add_argument('-o', '--output', default='stats.csv')

    return parser.parse_args(argv)


def _output(args, name: str) -> str:
    os.makedirs(args.output_dir, exist_ok=True)
    return os.path.join(args.output_dir, name)


def _abspath(path):
    return os.path.abspath(path) if path else None


# ---------------------- Commands ---------------------- #
def cmd_tile(args, config):
    eps_edge = config.get_float('pattern', 'eps_edge')
    cell = load_pattern(args.pattern, eps_edge)
    cell = cell.scaled(config.get_float('tile', 'density', 1.0))
    labels = compute_partners(cell, config.get_float('pattern', 'eps_match'))
    graph = tile(cell, labels, config.get_int('tile', 'n'), config.get_int('tile', 'm'),
                 config.get_bool('tile', 'wrap_u'), config.get_bool('tile', 'wrap_v'))
    yarns = stitch(graph, cell)
    write_yarns(yarns, _output(args, args.output))
    print(f"{len(yarns)} yarns, {sum(y.vertex_count for y in yarns)} vertices")


def cmd_plies(args, config):
    yarns = read_yarns(args.yarns)
    plies = generate_all_plies(yarns, config.ply_params(), config.threads())
    write_plb(plies, _output(args, args.output))
    print(f"{len(plies)} plies, {sum(p.vertex_count for p in plies)} vertices")


def cmd_grid(args, config):
    mesh = load_obj(args.mesh)
    plies = read_plb(args.plies, stage='grid')
    grid = build_grid(mesh, plies, config.grid_resolution(), uv_period=args.uv_period)
    write_mgb(grid, _output(args, args.output))


def cmd_map(args, config):
    mesh = load_obj(args.mesh)
    plies = read_plb(args.plies, stage='map')
    grid = read_mgb(args.grid) if args.grid else None
    radius = max((p.radius for p in plies), default=0.0)
    uv_period = args.uv_period or (grid.uv_period if grid is not None else None)
    mapped = transform_plies(grid, mesh, plies, config.shell_base(radius), config.threads(), uv_period)
    write_mapped(mapped, _output(args, args.output))


def cmd_render(args, config):
    overrides = {key: _abspath(getattr(args, key)) for key in ('mesh', 'plies', 'grid', 'bsdf')}
    scene = load_scene(args.scene, overrides, config.bsdf_params(), config.fiber_texture())
    image = render(scene, config.render_config())
    stem = _output(args, args.output)
    write_pfm(image, f"{stem}.pfm")
    write_png(image, f"{stem}.png", config.get_float('render', 'exposure', 1.0))


def cmd_fit(args, config):
    overrides = {'budget': args.budget, 'spp': args.spp, 'seed': args.seed,
                 'plies': _abspath(args.plies), 'grid': _abspath(args.grid)}
    problem = load_fit_spec(args.spec, config, overrides)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', BudgetExhausted)
        result = fit(problem)
    for warning in caught:
        logger.warning(str(warning.message))
    paths = write_fit_outputs(result, args.output_dir, args.output)
    print(f"best loss {result.loss:.6g} after {len(result.trace)} evaluations; parameters in {paths['params']}")


def cmd_validate(args, config):
    report = run_validation(args.pattern, args.rays, args.bsdf_draws, args.bsdf_samples,
                            config.get_int('render', 'seed', 0), config.threads(), config.ply_params(),
                            furnace_spp=args.furnace_spp, nee_spp=args.nee_spp, direct_samples=args.direct_samples,
                            render_size=args.render_size, fit_check=args.fit, fit_budget=args.fit_budget,
                            fit_spp=args.fit_spp, fit_size=args.fit_size)
    report.to_csv(_output(args, args.output), index=False)
    print(report.to_string(index=False))
    failed = report.loc[~report['passed'], 'check'].tolist()
    if failed:
        logger.error(f"Failed checks: {', '.join(failed)}")
        return DATA_ERROR
    return 0


def cmd_stats(args, config):
    yarns = read_yarns(args.yarns) if args.yarns else None
    plies = read_plb(args.plies, stage='stats') if args.plies else None
    grid = read_mgb(args.grid) if args.grid else None
    summary = summarize(yarns, plies, grid)
    summary.to_csv(_output(args, args.output), index=False)
    print(summary.to_string(index=False))
    if args.heatmap:
        if grid is None:
            raise KnitPlyError("--heatmap needs --grid", stage='stats')
        render_heatmap(grid, _output(args, args.heatmap))


COMMANDS = {
    'tile': cmd_tile,
    'plies': cmd_plies,
    'grid': cmd_grid,
    'map': cmd_map,
    'render': cmd_render,
    'fit': cmd_fit,
    'validate': cmd_validate,
    'stats': cmd_stats,
}


def _overrides(args):
    """Command-line flags as configuration sections; None values leave the file's setting."""
    def get(name):
        return getattr(args, name, None)

    return {
        'tile': {'n': get('n'), 'm': get('m'), 'wrap_u': get('wrap_u'), 'wrap_v': get('wrap_v'),
                 'density': get('density')},
        'plies': {'num_plies': get('num_plies'), 'ply_radius': get('ply_radius'), 'ply_offset': get('ply_offset'),
                  'twist_rate': get('twist_rate')},
        'mapping': {'resolution': ','.join(map(str, args.resolution)) if get('resolution') else None,
                    'shell_base': get('shell_base')},
        'render': {'seed': args.seed, 'threads': args.threads, 'spp': get('spp') if args.command == 'render' else None,
                   'max_depth': get('max_depth'), 'nee': False if get('no_nee') else None,
                   'exposure': get('exposure')},
        'fit': {'seed': args.seed},
    }


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO)

    start = time.time()
    try:
        config = load_config(args.config, _overrides(args))
        config.write_effective(args.output_dir, args.command)
        code = COMMANDS[args.command](args, config) or 0
    except KnitPlyError as e:
        stage = e.stage or args.command
        logger.error(f"{args.command} failed in stage '{stage}'")
        print(f"error in stage '{stage}': {e}", file=sys.stderr)
        return DATA_ERROR
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error in stage '{args.command}': {e}", file=sys.stderr)
        return DATA_ERROR
    logger.info(f"{args.command} finished in {time.time() - start:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
