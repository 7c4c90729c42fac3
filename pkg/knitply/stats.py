"""
Counts and grid occupancy of pipeline artifacts, for the `stats` command.
"""
import logging
from typing import Optional, Sequence

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from knitply.mapping import MappingGrid
from knitply.pattern import YarnCurve
from knitply.plygen import PlyCurve

logger = logging.getLogger(__name__)


def occupancy_frame(grid: MappingGrid) -> pd.DataFrame:
    """One row per grid cell: column i, row j, triangle and segment list lengths."""
    gu, gv = grid.resolution
    cells = np.arange(grid.cell_count)
    return pd.DataFrame({
        'cell': cells,
        'i': cells % gu,
        'j': cells // gu,
        'triangles': np.diff(grid.tri_offsets),
        'segments': np.diff(grid.seg_offsets),
    })


def summarize(yarns: Optional[Sequence[YarnCurve]] = None, plies: Optional[Sequence[PlyCurve]] = None,
              grid: Optional[MappingGrid] = None) -> pd.DataFrame:
    """
    Collects counts for whichever artifacts are given.

    :return: DataFrame with columns metric, value.
    """
    rows = []
    if yarns is not None:
        rows += [('yarns', len(yarns)),
                 ('closed_yarns', sum(y.closed for y in yarns)),
                 ('yarn_vertices', sum(y.vertex_count for y in yarns))]
    if plies is not None:
        rows += [('plies', len(plies)),
                 ('ply_vertices', sum(p.vertex_count for p in plies)),
                 ('segments', sum(p.vertex_count - 1 for p in plies))]
        if plies:
            radii = np.array([p.radius for p in plies])
            rows += [('ply_radius_min', float(radii.min())), ('ply_radius_max', float(radii.max()))]
    if grid is not None:
        occupancy = occupancy_frame(grid)
        listed = occupancy['segments']
        rows += [('grid_cells', grid.cell_count),
                 ('grid_resolution_u', grid.resolution[0]),
                 ('grid_resolution_v', grid.resolution[1]),
                 ('grid_segments', grid.segment_count),
                 ('grid_segment_entries', int(listed.sum())),
                 ('occupied_cells', int((listed > 0).sum())),
                 ('segments_per_cell_mean', float(listed.mean())),
                 ('segments_per_occupied_cell_mean', float(listed[listed > 0].mean()) if (listed > 0).any() else 0.0),
                 ('segments_per_cell_max', int(listed.max())),
                 ('triangles_per_cell_mean', float(occupancy['triangles'].mean()))]
    return pd.DataFrame(rows, columns=['metric', 'value'])


def render_heatmap(grid: MappingGrid, heatmap_file: str) -> None:
    """Segments per grid cell, v increasing upwards."""
    pivot = occupancy_frame(grid).pivot_table(index='j', columns='i', values='segments', aggfunc='sum', fill_value=0)
    plt.figure(figsize=(10, 8))
    ax = sns.heatmap(pivot.sort_index(ascending=False), cmap="YlGnBu", xticklabels=False, yticklabels=False)
    ax.set_title('Segments per grid cell')
    ax.set_xlabel('u')
    ax.set_ylabel('v')
    plt.tight_layout()
    plt.savefig(heatmap_file)
    plt.close()
    logger.info(f"Saved heatmap to {heatmap_file}")
