import logging
import os
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from knitply.errors import AmbiguityError, DegenerateError, InvariantError, NoPartnerError, ParseError, TopologyError

logger = logging.getLogger(__name__)

EPS_EDGE = 1e-4
EPS_MATCH = 1e-3

HEAD = 'head'
TAIL = 'tail'
# head sorts before tail, matching the lexicographic order of the names
END_ORDER = {HEAD: 0, TAIL: 1}
OTHER_END = {HEAD: TAIL, TAIL: HEAD}

NEIGHBOR_OFFSETS = {'right': (1, 0), 'left': (-1, 0), 'top': (0, 1), 'bottom': (0, -1)}
OPPOSITE = {'right': 'left', 'left': 'right', 'top': 'bottom', 'bottom': 'top'}


# ---------------------- Domain types ---------------------- #
@dataclass(frozen=True)
class PatternCell:
    """
    One tilable knit cell. Curve points are tile-local (u, v in [0, 1], h in tile units).
    free_ends[c] is (free_head, free_tail) for curve c.
    """
    curves: Tuple[np.ndarray, ...]
    tile_size: Tuple[float, float]
    free_ends: Tuple[Tuple[bool, bool], ...]

    def __post_init__(self):
        for curve in self.curves:
            curve.setflags(write=False)

    @property
    def curve_count(self) -> int:
        return len(self.curves)

    def endpoint(self, curve_id: int, end: str) -> np.ndarray:
        curve = self.curves[curve_id]
        return curve[-1] if end == HEAD else curve[0]

    def is_free(self, curve_id: int, end: str) -> bool:
        free_head, free_tail = self.free_ends[curve_id]
        return free_head if end == HEAD else free_tail

    def endpoint_count(self) -> int:
        return sum(1 for c in range(self.curve_count) for end in (HEAD, TAIL) if not self.is_free(c, end))

    def scaled(self, density: float) -> 'PatternCell':
        """Returns the same cell repeated `density` times per original tile size."""
        du, dv = self.tile_size
        return PatternCell(self.curves, (du / density, dv / density), self.free_ends)

    def to_texture(self, curve_id: int, placement: np.ndarray) -> np.ndarray:
        """Curve points in 3D texture space for a copy placed at `placement` (cells along u, v)."""
        du, dv = self.tile_size
        local = self.curves[curve_id]
        return np.column_stack((
            (local[:, 0] + placement[0]) * du,
            (local[:, 1] + placement[1]) * dv,
            local[:, 2] * du,
        ))

    def __repr__(self):
        return f"PatternCell(curves={self.curve_count}, tile_size={self.tile_size})"


@dataclass(frozen=True)
class EndpointLabel:
    curve_id: int
    end: str
    neighbor: str
    partner_curve_id: int
    partner_end: str

    def key(self):
        return (self.curve_id, END_ORDER[self.end])


@dataclass(frozen=True)
class TiledEdge:
    """An instantiated partnership; `offset` is the cell translation from a's copy to b's copy."""
    a: Tuple[int, str]
    b: Tuple[int, str]
    offset: Tuple[int, int]


@dataclass(frozen=True)
class TiledGraph:
    grid_dims: Tuple[int, int]
    curve_count: int
    wrap: Tuple[bool, bool]
    edges: Tuple[TiledEdge, ...]

    @property
    def node_count(self) -> int:
        return self.grid_dims[0] * self.grid_dims[1] * self.curve_count

    def node_cell(self, node: int) -> Tuple[int, int, int]:
        cell, curve_id = divmod(node, self.curve_count)
        j, i = divmod(cell, self.grid_dims[0])
        return i, j, curve_id

    def degrees(self) -> np.ndarray:
        degree = np.zeros(self.node_count, dtype=int)
        for edge in self.edges:
            degree[edge.a[0]] += 1
            degree[edge.b[0]] += 1
        return degree

    def adjacency(self) -> Dict[Tuple[int, str], Tuple[Tuple[int, str], Tuple[int, int]]]:
        """
        Maps every connected endpoint to (partner endpoint, cell offset to the partner).

        :raises TopologyError: if an endpoint is used by two edges or a node has degree > 2.
        """
        adjacency = {}
        for edge in self.edges:
            back = (-edge.offset[0], -edge.offset[1])
            for src, dst, offset in ((edge.a, edge.b, edge.offset), (edge.b, edge.a, back)):
                if src in adjacency:
                    raise TopologyError(f"Endpoint {src} appears in more than one edge; node degree exceeds 2")
                adjacency[src] = (dst, offset)
        degree = self.degrees()
        if degree.size and degree.max() > 2:
            raise TopologyError(f"Node {int(degree.argmax())} has degree {int(degree.max())} > 2")
        return adjacency

    def __repr__(self):
        return f"TiledGraph(grid_dims={self.grid_dims}, nodes={self.node_count}, edges={len(self.edges)}, wrap={self.wrap})"


@dataclass
class YarnCurve:
    vertices: np.ndarray
    closed: bool
    closure_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    nodes: Tuple[int, ...] = ()
    junctions: Tuple[int, ...] = ()

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def polyline(self) -> np.ndarray:
        """Vertices with the closing vertex appended for closed curves."""
        if not self.closed:
            return self.vertices
        return np.vstack((self.vertices, self.vertices[:1] + self.closure_offset))

    def __repr__(self):
        return f"YarnCurve(vertices={self.vertex_count}, closed={self.closed})"


# ---------------------- KCF loading ---------------------- #
def _on_boundary(point: np.ndarray, eps_edge: float) -> bool:
    u, v = float(point[0]), float(point[1])
    if u < -eps_edge or u > 1 + eps_edge or v < -eps_edge or v > 1 + eps_edge:
        return False
    return min(abs(u), abs(1 - u), abs(v), abs(1 - v)) <= eps_edge


def _parse_floats(tokens, path, line_no):
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise ParseError(f"{path}:{line_no}: invalid number ({e})", stage='tile')


def load_pattern(path: str, eps_edge: float = EPS_EDGE) -> PatternCell:
    """
    Reads a KCF (Knit Cell Format) file.

    :param path: Path of the .kcf file.
    :param eps_edge: Distance (tile units) within which an endpoint counts as on the tile boundary.
    :raises ParseError: malformed file or a curve with fewer than 2 vertices.
    :raises InvariantError: endpoint off the boundary and not flagged free, or zero-length segment.
    """
    if not os.path.exists(path):
        raise ParseError(f"Pattern file not found: {path}", stage='tile')
    with open(path, 'r', encoding='utf-8') as f:
        lines = [(no, line.strip()) for no, line in enumerate(f, start=1)]
    lines = [(no, line) for no, line in lines if line and not line.startswith('#')]
    if not lines or lines[0][1].split() != ['KCF', '1']:
        raise ParseError(f"{path}: expected header 'KCF 1'", stage='tile')
    if len(lines) < 2 or lines[1][1].split()[0] != 'tile' or len(lines[1][1].split()) != 3:
        raise ParseError(f"{path}: expected 'tile <du> <dv>' on the second line", stage='tile')
    du, dv = _parse_floats(lines[1][1].split()[1:], path, lines[1][0])
    if du <= 0 or dv <= 0:
        raise ParseError(f"{path}: tile size must be positive, got ({du}, {dv})", stage='tile')

    curves: Dict[int, Tuple[List[List[float]], bool, bool]] = {}
    pos = 2
    while pos < len(lines):
        line_no, line = lines[pos]
        tokens = line.split()
        if tokens[0] != 'curve' or len(tokens) < 3:
            raise ParseError(f"{path}:{line_no}: expected 'curve <id> <vertex_count> [flags]'", stage='tile')
        try:
            curve_id, count = int(tokens[1]), int(tokens[2])
        except ValueError:
            raise ParseError(f"{path}:{line_no}: curve id and vertex count must be integers", stage='tile')
        flags = set(tokens[3:])
        unknown = flags - {'free_head', 'free_tail'}
        if unknown:
            raise ParseError(f"{path}:{line_no}: unknown curve flags {sorted(unknown)}", stage='tile')
        if curve_id in curves:
            raise ParseError(f"{path}:{line_no}: duplicate curve id {curve_id}", stage='tile')
        if count < 2:
            raise ParseError(f"{path}:{line_no}: curve {curve_id} has {count} vertices, need at least 2", stage='tile')
        points = []
        for k in range(count):
            pos += 1
            if pos >= len(lines):
                raise ParseError(f"{path}: curve {curve_id} ends after {k} of {count} vertices", stage='tile')
            v_no, v_line = lines[pos]
            v_tokens = v_line.split()
            if v_tokens[0] != 'v' or len(v_tokens) != 4:
                raise ParseError(f"{path}:{v_no}: expected 'v <u> <v> <h>'", stage='tile')
            points.append(_parse_floats(v_tokens[1:], path, v_no))
        curves[curve_id] = (points, 'free_head' in flags, 'free_tail' in flags)
        pos += 1

    if not curves:
        raise ParseError(f"{path}: no curves", stage='tile')
    if sorted(curves) != list(range(len(curves))):
        raise ParseError(f"{path}: curve ids must be dense 0..{len(curves) - 1}, got {sorted(curves)}", stage='tile')

    arrays, free_ends = [], []
    for curve_id in range(len(curves)):
        points, free_head, free_tail = curves[curve_id]
        array = np.asarray(points, dtype=float)
        if np.any(np.linalg.norm(np.diff(array, axis=0), axis=1) == 0):
            raise InvariantError(f"{path}: curve {curve_id} has a zero-length segment", stage='tile')
        for end, free, point in ((TAIL, free_tail, array[0]), (HEAD, free_head, array[-1])):
            if not free and not _on_boundary(point, eps_edge):
                raise InvariantError(
                    f"{path}: curve {curve_id} {end} {point.tolist()} is off the tile boundary and not flagged free",
                    stage='tile')
        arrays.append(array)
        free_ends.append((free_head, free_tail))

    cell = PatternCell(tuple(arrays), (du, dv), tuple(free_ends))
    logger.info(f"Loaded pattern '{path}': {cell.curve_count} curves, {cell.endpoint_count()} boundary endpoints")
    return cell


# ---------------------- Partner endpoints ---------------------- #
def compute_partners(cell: PatternCell, eps_match: float = EPS_MATCH) -> List[EndpointLabel]:
    """
    Pairs every non-free endpoint with the closest endpoint among the four translated
    copies of the cell.

    :raises NoPartnerError: no candidate within eps_match.
    :raises AmbiguityError: two candidates tie within eps_match / 10, or the pairing is not mutual.
    """
    endpoints = [(c, end) for c in range(cell.curve_count) for end in (HEAD, TAIL) if not cell.is_free(c, end)]
    if not endpoints:
        return []
    positions = np.array([cell.endpoint(c, end) for c, end in endpoints])

    directions = list(NEIGHBOR_OFFSETS)
    candidates, meta = [], []
    for direction in directions:
        du, dv = NEIGHBOR_OFFSETS[direction]
        candidates.append(positions + np.array([du, dv, 0.0]))
        meta.extend((direction, k) for k in range(len(endpoints)))
    tree = cKDTree(np.vstack(candidates))

    k = min(2, len(meta))
    dists, idx = tree.query(positions, k=k, distance_upper_bound=eps_match)
    dists = np.asarray(dists).reshape(len(endpoints), k)
    idx = np.asarray(idx).reshape(len(endpoints), k)

    partner_of = {}
    labels = []
    for e, (curve_id, end) in enumerate(endpoints):
        if not np.isfinite(dists[e, 0]):
            raise NoPartnerError(
                f"Endpoint {end} of curve {curve_id} at {positions[e].tolist()} has no partner within {eps_match}",
                stage='tile')
        if k > 1 and np.isfinite(dists[e, 1]) and dists[e, 1] - dists[e, 0] < eps_match / 10:
            raise AmbiguityError(
                f"Endpoint {end} of curve {curve_id} has two partner candidates within {eps_match / 10} of each other",
                stage='tile')
        direction, partner = meta[idx[e, 0]]
        partner_of[e] = (direction, partner)
        p_curve, p_end = endpoints[partner]
        labels.append(EndpointLabel(curve_id, end, direction, p_curve, p_end))

    for e, (direction, partner) in partner_of.items():
        back_direction, back = partner_of[partner]
        if back != e or back_direction != OPPOSITE[direction]:
            curve_id, end = endpoints[e]
            raise AmbiguityError(f"Partnering of curve {curve_id} {end} is not mutual", stage='tile')

    labels.sort(key=EndpointLabel.key)
    logger.info(f"Computed {len(labels)} partner labels")
    return labels


# ---------------------- Tiling ---------------------- #
def tile(cell: PatternCell, labels: Sequence[EndpointLabel], n: int, m: int,
         wrap_u: bool = False, wrap_v: bool = False) -> TiledGraph:
    """
    Instantiates the cell over an n x m grid and connects partnered endpoints.
    The same labels are reused for every cell.
    """
    if n < 1 or m < 1:
        raise ValueError(f"Tiling dimensions must be >= 1, got ({n}, {m})")
    curve_count = cell.curve_count
    edges = {}
    for j in range(m):
        for i in range(n):
            for label in labels:
                di, dj = NEIGHBOR_OFFSETS[label.neighbor]
                ti, tj = i + di, j + dj
                if not 0 <= ti < n:
                    if not wrap_u:
                        continue
                    ti %= n
                if not 0 <= tj < m:
                    if not wrap_v:
                        continue
                    tj %= m
                a = ((j * n + i) * curve_count + label.curve_id, label.end)
                b = ((tj * n + ti) * curve_count + label.partner_curve_id, label.partner_end)
                if (a[0], END_ORDER[a[1]]) < (b[0], END_ORDER[b[1]]):
                    edges[(a, b)] = TiledEdge(a, b, (di, dj))
    ordered = tuple(edges[key] for key in sorted(edges, key=lambda ab: (ab[0][0], END_ORDER[ab[0][1]],
                                                                      ab[1][0], END_ORDER[ab[1][1]])))
    graph = TiledGraph((n, m), curve_count, (wrap_u, wrap_v), ordered)
    logger.info(f"Tiled {n}x{m} cells: {graph.node_count} nodes, {len(ordered)} edges")
    return graph


# ---------------------- Stitching ---------------------- #
def _component(graph: TiledGraph, adjacency, start: int):
    nodes, free = [], []
    seen = {start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        nodes.append(node)
        for end in (HEAD, TAIL):
            link = adjacency.get((node, end))
            if link is None:
                free.append((node, end))
                continue
            other = link[0][0]
            if other not in seen:
                seen.add(other)
                queue.append(other)
    return nodes, free


def stitch(graph: TiledGraph, cell: PatternCell) -> List[YarnCurve]:
    """
    Traverses the degree-2 graph into maximal yarn curves, one per connected component.
    Partnered endpoints are merged into their midpoint; cycles are emitted closed.

    :raises TopologyError: if any node has degree > 2.
    """
    adjacency = graph.adjacency()
    visited = np.zeros(graph.node_count, dtype=bool)
    yarns = []
    for start_node in range(graph.node_count):
        if visited[start_node]:
            continue
        component, free = _component(graph, adjacency, start_node)
        if free:
            start = min(free, key=lambda ep: (ep[0], END_ORDER[ep[1]]))
        else:
            start = (start_node, HEAD)
        yarn = _walk(graph, cell, adjacency, start, visited)
        if len(yarn.nodes) != len(component):
            raise TopologyError(f"Traversal from node {start_node} visited {len(yarn.nodes)} of {len(component)} nodes")
        yarns.append(yarn)

    total = sum(y.vertex_count for y in yarns)
    instantiated = sum(len(c) for c in cell.curves) * graph.grid_dims[0] * graph.grid_dims[1]
    logger.info(f"Stitched {len(yarns)} yarns with {total} vertices ({instantiated} instantiated, {len(graph.edges)} junctions)")
    return yarns


def _walk(graph, cell, adjacency, start, visited) -> YarnCurve:
    start_node, start_end = start
    i, j, _ = graph.node_cell(start_node)
    start_place = np.array([i, j], dtype=float)
    place = start_place.copy()
    node, entry = start_node, start_end
    vertices: List[np.ndarray] = []
    nodes, junctions = [], []
    closed = False
    closure = np.zeros(3)
    du, dv = cell.tile_size
    while True:
        curve_id = node % graph.curve_count
        points = cell.to_texture(curve_id, place)
        if entry == HEAD:
            points = points[::-1]
        if vertices:
            vertices[-1] = (vertices[-1] + points[0]) / 2.0
            junctions.append(len(vertices) - 1)
            vertices.extend(points[1:])
        else:
            vertices.extend(points)
        visited[node] = True
        nodes.append(node)

        link = adjacency.get((node, OTHER_END[entry]))
        if link is None:
            break
        (next_node, next_end), offset = link
        next_place = place + np.asarray(offset, dtype=float)
        if (next_node, next_end) == (start_node, start_end):
            delta = next_place - start_place
            closure = np.array([delta[0] * du, delta[1] * dv, 0.0])
            merged = (vertices[-1] + vertices[0] + closure) / 2.0
            vertices[0] = merged - closure
            vertices.pop()
            junctions.append(0)
            closed = True
            break
        if visited[next_node]:
            raise TopologyError(f"Node {next_node} reached twice while stitching")
        node, entry, place = next_node, next_end, next_place

    array = np.asarray(vertices)
    yarn = YarnCurve(array, closed, closure, tuple(nodes), tuple(junctions))
    seg = np.diff(yarn.polyline(), axis=0)
    if len(seg) and np.any(np.linalg.norm(seg, axis=1) == 0):
        raise DegenerateError(f"Stitched yarn starting at node {start_node} has coincident consecutive vertices")
    return yarn


def junction_angles(yarn: YarnCurve) -> np.ndarray:
    """Angles (radians) between the incoming and outgoing segment directions at every merged junction."""
    line = yarn.polyline()
    n = len(yarn.vertices)
    angles = []
    for k in yarn.junctions:
        if yarn.closed:
            prev_pt = line[k - 1] if k > 0 else line[n - 1] - yarn.closure_offset
            next_pt = line[k + 1]
        else:
            if k == 0 or k >= n - 1:
                continue
            prev_pt, next_pt = line[k - 1], line[k + 1]
        a = line[k] - prev_pt
        b = next_pt - line[k]
        cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
    return np.asarray(angles)


# ---------------------- Brute-force oracle ---------------------- #
def brute_force_edges(cell: PatternCell, n: int, m: int, wrap_u: bool = False, wrap_v: bool = False,
                      eps_match: float = EPS_MATCH) -> List[Tuple[Tuple[int, str], Tuple[int, str]]]:
    """All endpoint pairs within eps_match across the full tiling, without partner labels."""
    entries, positions = [], []
    for j in range(m):
        for i in range(n):
            for c in range(cell.curve_count):
                for end in (HEAD, TAIL):
                    if cell.is_free(c, end):
                        continue
                    u, v, h = cell.endpoint(c, end)
                    entries.append(((j * n + i) * cell.curve_count + c, end))
                    positions.append((i + u, j + v, h))
    if not positions:
        return []
    positions = np.asarray(positions)
    delta = positions[:, None, :] - positions[None, :, :]
    if wrap_u:
        delta[..., 0] -= n * np.round(delta[..., 0] / n)
    if wrap_v:
        delta[..., 1] -= m * np.round(delta[..., 1] / m)
    dist = np.linalg.norm(delta, axis=2)
    a_idx, b_idx = np.nonzero(np.triu(dist <= eps_match, k=1))
    return [(entries[a], entries[b]) for a, b in zip(a_idx, b_idx)]


def component_vertex_counts(cell: PatternCell, node_count: int, edges) -> List[Tuple[int, int]]:
    """
    Union-find over brute-force edges: (smallest node id, stitched vertex count) per component,
    ordered by smallest node id.
    """
    rows = [a[0] for a, _ in edges]
    cols = [b[0] for _, b in edges]
    matrix = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(node_count, node_count))
    count, labels = connected_components(matrix, directed=False)
    vertex_per_node = np.array([len(cell.curves[k % cell.curve_count]) for k in range(node_count)])
    totals = np.bincount(labels, weights=vertex_per_node, minlength=count)
    edge_counts = np.bincount(labels[rows], minlength=count) if rows else np.zeros(count)
    first_node = np.full(count, node_count)
    np.minimum.at(first_node, labels, np.arange(node_count))
    order = np.argsort(first_node)
    return [(int(first_node[k]), int(totals[k] - edge_counts[k])) for k in order]


def tiling_oracle(cell: PatternCell, n: int, m: int, wrap_u: bool = False, wrap_v: bool = False,
                  eps_match: float = EPS_MATCH):
    """
    Independent reference for tile + stitch.

    :return: (brute-force edge list, [(smallest node id, vertex count)] per component)
    """
    edges = brute_force_edges(cell, n, m, wrap_u, wrap_v, eps_match)
    return edges, component_vertex_counts(cell, n * m * cell.curve_count, edges)


# ---------------------- Yarn file I/O ---------------------- #
def write_yarns(yarns: Sequence[YarnCurve], path: str) -> None:
    """Writes stitched yarns in the YRN text format."""
    with open(path, 'w', encoding='utf-8') as f:
        f.write('YRN 1\n')
        for yarn_id, yarn in enumerate(yarns):
            ox, oy, oz = (float(x) for x in yarn.closure_offset)
            f.write(f"yarn {yarn_id} {yarn.vertex_count} {int(yarn.closed)} {ox!r} {oy!r} {oz!r}\n")
            for x, y, z in yarn.vertices:
                f.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
    logger.info(f"Wrote {len(yarns)} yarns to '{path}'")


def read_yarns(path: str) -> List[YarnCurve]:
    if not os.path.exists(path):
        raise ParseError(f"Yarn file not found: {path}", stage='plies')
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line.split() for line in f if line.strip() and not line.startswith('#')]
    if not lines or lines[0] != ['YRN', '1']:
        raise ParseError(f"{path}: expected header 'YRN 1'", stage='plies')
    yarns = []
    pos = 1
    while pos < len(lines):
        tokens = lines[pos]
        if tokens[0] != 'yarn' or len(tokens) != 7:
            raise ParseError(f"{path}: malformed yarn record {tokens}", stage='plies')
        count, closed = int(tokens[2]), tokens[3] == '1'
        offset = np.array([float(t) for t in tokens[4:7]])
        block = lines[pos + 1:pos + 1 + count]
        if len(block) != count or any(t[0] != 'v' or len(t) != 4 for t in block):
            raise ParseError(f"{path}: yarn {tokens[1]} has malformed vertices", stage='plies')
        vertices = np.array([[float(x) for x in t[1:]] for t in block])
        yarns.append(YarnCurve(vertices, closed, offset))
        pos += 1 + count
    logger.info(f"Read {len(yarns)} yarns from '{path}'")
    return yarns
