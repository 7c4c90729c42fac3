import configparser
import logging
import os
from typing import Dict, Optional

import psutil

logger = logging.getLogger(__name__)

REPO_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config', 'config.ini')

# Built-in defaults, identical to config/config.ini so the package works without the repo file.
DEFAULTS: Dict[str, Dict[str, str]] = {
    'pattern': {'eps_edge': '1e-4', 'eps_match': '1e-3'},
    'tile': {'n': '4', 'm': '4', 'wrap_u': 'false', 'wrap_v': 'false', 'density': '1.0'},
    'plies': {
        'num_plies': '3',
        'ply_offset': '0.006',
        'ply_radius': '0.005',
        'twist_rate': '60.0',
        'resample_step': '',
    },
    'mapping': {'resolution': '', 'shell_base': ''},
    'fiber': {'fiber_count': '16', 'amplitude': '0.3', 'fiber_twist': '0.0', 'shadow_depth': '0.3'},
    'bsdf': {
        'albedo_r': '0.8',
        'albedo_g': '0.3',
        'albedo_b': '0.25',
        'spec_weight': '0.2',
        'trans_weight': '0.2',
        'long_width': '0.2',
        'azim_width': '0.6',
        'trans_width': '0.5',
    },
    'render': {
        'spp': '16',
        'max_depth': '8',
        'rr_start_depth': '3',
        'seed': '0',
        'tile_size': '16',
        'threads': '',
        'nee': 'true',
        'exposure': '1.0',
    },
    'fit': {'budget': '60', 'spp': '16', 'seed': '0', 'downscale': '0.1'},
}


class PipelineConfig:
    """
    Layered pipeline configuration: built-in defaults, the repository
    config/config.ini, an optional user file, then explicit overrides.
    """

    def __init__(self, parser: configparser.ConfigParser, sources=None):
        self.parser = parser
        self.sources = sources or []

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key, fallback='').strip()

    def get_float(self, section: str, key: str, default: Optional[float] = None) -> Optional[float]:
        value = self.get(section, key)
        return float(value) if value else default

    def get_int(self, section: str, key: str, default: Optional[int] = None) -> Optional[int]:
        value = self.get(section, key)
        return int(value) if value else default

    def get_bool(self, section: str, key: str, default: bool = False) -> bool:
        value = self.get(section, key)
        if not value:
            return default
        return self.parser.getboolean(section, key)

    def set(self, section: str, key: str, value) -> None:
        if value is None:
            return
        if not self.parser.has_section(section):
            self.parser.add_section(section)
        if isinstance(value, bool):
            value = 'true' if value else 'false'
        self.parser.set(section, key, str(value))

    def threads(self) -> int:
        threads = self.get_int('render', 'threads')
        if threads:
            return threads
        return psutil.cpu_count(logical=False) or 1

    def ply_params(self):
        from knitply.plygen import PlyParams

        radius = self.get_float('plies', 'ply_radius')
        return PlyParams(
            num_plies=self.get_int('plies', 'num_plies'),
            ply_offset=self.get_float('plies', 'ply_offset'),
            ply_radius=radius,
            twist_rate=self.get_float('plies', 'twist_rate'),
            resample_step=self.get_float('plies', 'resample_step', radius / 2.0),
        )

    def shell_base(self, ply_radius: float) -> float:
        return self.get_float('mapping', 'shell_base', 1.5 * ply_radius)

    def grid_resolution(self):
        value = self.get('mapping', 'resolution')
        if not value:
            return None
        parts = [int(p) for p in value.replace('x', ',').split(',') if p.strip()]
        return (parts[0], parts[-1])

    def fiber_texture(self):
        from knitply.shading import FiberTexture

        return FiberTexture(
            fiber_count=self.get_int('fiber', 'fiber_count'),
            amplitude=self.get_float('fiber', 'amplitude'),
            fiber_twist=self.get_float('fiber', 'fiber_twist'),
            shadow_depth=self.get_float('fiber', 'shadow_depth'),
        )

    def bsdf_params(self):
        from knitply.shading import BsdfParams

        return BsdfParams.from_dict({key: float(value) for key, value in self.parser.items('bsdf') if value.strip()})

    def render_config(self):
        from knitply.render import RenderConfig

        return RenderConfig(
            spp=self.get_int('render', 'spp'),
            max_depth=self.get_int('render', 'max_depth'),
            rr_start_depth=self.get_int('render', 'rr_start_depth'),
            seed=self.get_int('render', 'seed'),
            tile_size=self.get_int('render', 'tile_size'),
            threads=self.threads(),
            nee=self.get_bool('render', 'nee', True),
        )

    def write_effective(self, output_dir: str, command: str) -> str:
        """
        Echoes the effective configuration of a run into the output directory.

        :param output_dir: Directory receiving the file.
        :param command: Subcommand name, used as the file stem.
        :return: Path of the written file.
        """
        os.makedirs(output_dir, exist_ok=True)
        path = os.path.join(output_dir, f"{command}.effective.ini")
        with open(path, 'w', encoding='utf-8') as f:
            f.write(f"# effective configuration for '{command}'\n")
            for source in self.sources:
                f.write(f"# source: {source}\n")
            self.parser.write(f)
        logger.info(f"Wrote effective configuration to '{path}'")
        return path

    def __repr__(self):
        return f"PipelineConfig(sources={self.sources})"


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Dict[str, object]]] = None) -> PipelineConfig:
    """
    Builds the layered configuration.

    :param path: Optional user config file; must exist when given.
    :param overrides: Mapping section -> key -> value applied last (None values are skipped).
    """
    parser = configparser.ConfigParser()
    parser.read_dict(DEFAULTS)
    sources = ['defaults']
    if os.path.exists(REPO_CONFIG):
        parser.read(REPO_CONFIG, encoding='utf-8')
        sources.append(REPO_CONFIG)
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        parser.read(path, encoding='utf-8')
        sources.append(path)
    config = PipelineConfig(parser, sources)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            config.set(section, key, value)
    return config
