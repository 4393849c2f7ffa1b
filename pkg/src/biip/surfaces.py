"""Discrete surfaces with boundary: grids, tori, cylinders and a genus-2 surface.

Every constructor is a pure function of its arguments (plus a seed for the
disk meshes of the genus-2 surface) so generated datasets are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import Delaunay


class InvalidSpecError(ValueError):
    """Raised for surface parameters that cannot produce a valid graph."""


class TopologyError(ValueError):
    """Raised when the boundary does not split into disjoint cycle graphs."""


Edge = tuple[int, int]


@dataclass(frozen=True)
class Decomposition:
    interior_nodes: tuple[int, ...]
    regular_edges: tuple[Edge, ...]
    half_edges: tuple[Edge, ...]  # (interior node, boundary node)
    boundary_edges: tuple[Edge, ...]
    boundary_cycles: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class GraphWithBoundary:
    """Undirected simple graph whose boundary is a disjoint union of cycles.

    ``edges`` holds sorted ``(u, v)`` pairs with ``u < v`` in lexicographic
    order. ``parent_nodes`` maps node ids back to the graph this one was cut
    from (a cylinder out of a torus, for instance), if any.
    """

    node_count: int
    edges: tuple[Edge, ...]
    boundary_nodes: frozenset[int] = frozenset()
    positions: np.ndarray | None = field(default=None, compare=False, repr=False)
    parent_nodes: tuple[int, ...] | None = field(default=None, compare=False, repr=False)

    @cached_property
    def decomposition(self) -> Decomposition:
        return _decompose(self.node_count, self.edges, self.boundary_nodes)

    @property
    def boundary_cycles(self) -> tuple[tuple[int, ...], ...]:
        return self.decomposition.boundary_cycles

    @property
    def interior_nodes(self) -> tuple[int, ...]:
        return self.decomposition.interior_nodes

    @property
    def interior_regular_edges(self) -> tuple[Edge, ...]:
        return self.decomposition.regular_edges

    @property
    def half_edges(self) -> tuple[Edge, ...]:
        return self.decomposition.half_edges

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return tuple(tuple(sorted(a)) for a in adj)

    def degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.neighbors], dtype=np.int64)


def make_graph(
    node_count: int,
    edges: Iterable[Sequence[int]],
    boundary_nodes: Iterable[int] = (),
    positions: np.ndarray | None = None,
    parent_nodes: Sequence[int] | None = None,
) -> GraphWithBoundary:
    """Normalise edges, build the graph and validate its boundary."""
    if node_count < 1:
        raise InvalidSpecError("graph needs at least one node")
    canon = set()
    for e in edges:
        u, v = int(e[0]), int(e[1])
        if u == v:
            raise InvalidSpecError(f"self loop at node {u}")
        if not (0 <= u < node_count and 0 <= v < node_count):
            raise InvalidSpecError(f"edge ({u}, {v}) out of range")
        canon.add((min(u, v), max(u, v)))
    bnd = frozenset(int(b) for b in boundary_nodes)
    if any(not 0 <= b < node_count for b in bnd):
        raise InvalidSpecError("boundary node out of range")
    g = GraphWithBoundary(
        node_count=node_count,
        edges=tuple(sorted(canon)),
        boundary_nodes=bnd,
        positions=None if positions is None else np.asarray(positions, dtype=float),
        parent_nodes=None if parent_nodes is None else tuple(int(p) for p in parent_nodes),
    )
    g.decomposition  # validate eagerly
    return g


def _decompose(node_count: int, edges: Sequence[Edge], boundary: frozenset[int]) -> Decomposition:
    regular, half, bedges = [], [], []
    bnb: dict[int, list[int]] = {b: [] for b in boundary}
    for u, v in edges:
        ub, vb = u in boundary, v in boundary
        if ub and vb:
            bedges.append((u, v))
            bnb[u].append(v)
            bnb[v].append(u)
        elif ub:
            half.append((v, u))
        elif vb:
            half.append((u, v))
        else:
            regular.append((u, v))

    for b, nb in bnb.items():
        if len(nb) != 2:
            raise TopologyError(
                f"boundary node {b} has {len(nb)} boundary neighbours; expected 2"
            )

    cycles = []
    seen: set[int] = set()
    for start in sorted(boundary):
        if start in seen:
            continue
        # walk towards the smaller neighbour first
        cycle = [start]
        seen.add(start)
        prev, cur = start, min(bnb[start])
        while cur != start:
            if cur in seen:
                raise TopologyError(f"boundary walk from {start} revisits {cur}")
            cycle.append(cur)
            seen.add(cur)
            a, b = bnb[cur]
            prev, cur = cur, (b if a == prev else a)
        if len(cycle) < 3:
            raise TopologyError("boundary cycle shorter than 3")
        cycles.append(tuple(cycle))

    # each cycle's induced subgraph must be exactly the cycle
    owner = {v: i for i, c in enumerate(cycles) for v in c}
    for u, v in bedges:
        if owner[u] != owner[v]:
            raise TopologyError(f"edge ({u}, {v}) joins two boundary cycles")

    interior = tuple(v for v in range(node_count) if v not in boundary)
    return Decomposition(
        interior_nodes=interior,
        regular_edges=tuple(regular),
        half_edges=tuple(sorted(half)),
        boundary_edges=tuple(bedges),
        boundary_cycles=tuple(cycles),
    )


def decompose(g: GraphWithBoundary):
    """Return ``(interior nodes, regular edges, half edges, boundary cycles)``."""
    d = _decompose(g.node_count, g.edges, g.boundary_nodes)
    return set(d.interior_nodes), list(d.regular_edges), list(d.half_edges), [list(c) for c in d.boundary_cycles]


def _grid_positions(rows: int, cols: int) -> np.ndarray:
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.stack([c, -r], axis=1).astype(float)


def build_grid(rows: int, cols: int) -> GraphWithBoundary:
    """Row-major ``rows x cols`` grid with 4-neighbour adjacency.

    The perimeter is the boundary, so grids thinner than 3 (other than 2x2)
    are rejected by the boundary check.
    """
    if rows < 1 or cols < 1:
        raise InvalidSpecError(f"grid dimensions must be positive, got {rows}x{cols}")
    idx = lambda r, c: r * cols + c  # noqa: E731
    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((idx(r, c), idx(r, c + 1)))
            if r + 1 < rows:
                edges.append((idx(r, c), idx(r + 1, c)))
    perimeter = {idx(r, c) for r in range(rows) for c in range(cols)
                 if r in (0, rows - 1) or c in (0, cols - 1)}
    return make_graph(rows * cols, edges, perimeter, positions=_grid_positions(rows, cols))


def wrap_torus(rows: int, cols: int) -> GraphWithBoundary:
    """Grid with both wrap-arounds added; a closed 4-regular surface."""
    if rows < 3 or cols < 3:
        raise InvalidSpecError("torus needs rows >= 3 and cols >= 3 to avoid multi-edges")
    idx = lambda r, c: (r % rows) * cols + (c % cols)  # noqa: E731
    edges = []
    for r in range(rows):
        for c in range(cols):
            edges.append((idx(r, c), idx(r, c + 1)))
            edges.append((idx(r, c), idx(r + 1, c)))
    return make_graph(rows * cols, edges, (), positions=_grid_positions(rows, cols))


def induced_subgraph(
    g: GraphWithBoundary, nodes: Sequence[int], boundary_nodes: Iterable[int]
) -> GraphWithBoundary:
    """Subgraph on ``nodes`` (relabelled 0..n-1 in the given order).

    ``boundary_nodes`` are given in the ids of ``g``.
    """
    nodes = [int(v) for v in nodes]
    relabel = {v: i for i, v in enumerate(nodes)}
    if len(relabel) != len(nodes):
        raise InvalidSpecError("duplicate nodes in subgraph selection")
    edges = [(relabel[u], relabel[v]) for u, v in g.edges if u in relabel and v in relabel]
    bnd = [relabel[b] for b in boundary_nodes]
    pos = None if g.positions is None else g.positions[nodes]
    return make_graph(len(nodes), edges, bnd, positions=pos, parent_nodes=nodes)


def extract_cylinder(
    torus: GraphWithBoundary, rows: int, cols: int, keep_cols: range | Sequence[int]
) -> GraphWithBoundary:
    """Cut the columns ``keep_cols`` out of a ``rows x cols`` torus.

    The first and last kept columns become the two boundary cycles.
    ``parent_nodes`` of the result index into the torus.
    """
    keep = list(keep_cols)
    if torus.node_count != rows * cols:
        raise InvalidSpecError("torus size does not match rows x cols")
    if len(keep) < 3:
        raise InvalidSpecError("cylinder needs at least 3 columns to have an interior")
    if len(keep) >= cols:
        raise InvalidSpecError("cylinder must be narrower than the torus")
    if any(b - a != 1 for a, b in zip(keep, keep[1:])) or keep[0] < 0 or keep[-1] >= cols:
        raise InvalidSpecError(f"keep_cols must be a contiguous range in [0, {cols})")
    nodes = [r * cols + c for r in range(rows) for c in keep]
    boundary = [r * cols + c for r in range(rows) for c in (keep[0], keep[-1])]
    return induced_subgraph(torus, nodes, boundary)


# ---------------------------------------------------------------------------
# genus-2 surface

GENUS2_CYLINDER_COLS = 8
GENUS2_FILL_POINTS = 63
_RIM = 12
_PENT = 5
_HOLE_CENTERS = ((-0.45, 0.0), (0.45, 0.0))
_HOLE_RADIUS = 0.15


@dataclass(frozen=True)
class Genus2Surface:
    """Closed genus-2 surface plus the node ids of its second handle."""

    graph: GraphWithBoundary
    removable_nodes: tuple[int, ...]  # interior rings of the cylinder to cut away
    detachment_cycles: tuple[tuple[int, ...], ...]  # pentagons left behind


def _regular_polygon(n: int, radius: float, center=(0.0, 0.0), phase: float = 0.0) -> np.ndarray:
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


def _disk_mesh(rng: np.random.Generator, n_fill: int):
    """Triangulated 12-gon with two pentagonal holes.

    Returns ``(points, triangles)``; points are ordered rim (12), hole 0 (5),
    hole 1 (5), then fill points.
    """
    rim = _regular_polygon(_RIM, 1.0)
    holes = [_regular_polygon(_PENT, _HOLE_RADIUS, c, phase=np.pi / 2) for c in _HOLE_CENTERS]
    apothem = np.cos(np.pi / _RIM)
    fill: list[np.ndarray] = []
    min_sep = 0.14
    tries = 0
    while len(fill) < n_fill:
        tries += 1
        if tries > 200_000:
            min_sep *= 0.95
            tries = 0
        p = rng.uniform(-1.0, 1.0, size=2)
        if np.hypot(*p) > 0.9 * apothem:
            continue
        if any(np.hypot(p[0] - cx, p[1] - cy) < _HOLE_RADIUS + 0.09 for cx, cy in _HOLE_CENTERS):
            continue
        if fill and np.min(np.hypot(*(np.asarray(fill) - p).T)) < min_sep:
            continue
        fill.append(p)
    pts = np.vstack([rim, *holes, np.asarray(fill)])
    tri = Delaunay(pts).simplices
    keep = []
    for t in tri:
        cen = pts[t].mean(axis=0)
        if any(np.hypot(cen[0] - cx, cen[1] - cy) < _HOLE_RADIUS for cx, cy in _HOLE_CENTERS):
            continue
        keep.append(tuple(sorted(int(i) for i in t)))
    return pts, keep


def _mesh_is_clean(triangles) -> bool:
    """Rim and hole polygons must appear as chordless cycles in the mesh."""
    edges = {(t[a], t[b]) for t in triangles for a, b in ((0, 1), (0, 2), (1, 2))}
    loops = [list(range(_RIM)), list(range(_RIM, _RIM + _PENT)), list(range(_RIM + _PENT, _RIM + 2 * _PENT))]
    for loop in loops:
        ring = {(min(a, b), max(a, b)) for a, b in zip(loop, loop[1:] + loop[:1])}
        if not ring <= edges:
            return False
        inside = {(a, b) for a, b in edges if a in loop and b in loop}
        if inside != ring:
            return False
    holes = set(loops[1]) | set(loops[2])
    rim = set(loops[0])
    # no edge between the two holes, and no edge from a hole straight to the rim
    for a, b in edges:
        if a in loops[1] and b in loops[2]:
            return False
        if (a in holes and b in rim) or (b in holes and a in rim):
            return False
    return True


def build_genus2(seed: int = 0) -> Genus2Surface:
    """Closed genus-2 surface: two 12-gon disks glued along their rims, each
    with two pentagonal holes, and the holes joined pairwise by two 5x8
    cylinders cut from a 5x16 torus.
    """
    rng = np.random.default_rng(seed)
    disks = []
    for _ in range(2):
        for _attempt in range(100):
            pts, tris = _disk_mesh(rng, GENUS2_FILL_POINTS)
            if _mesh_is_clean(tris):
                break
        else:  # pragma: no cover - the generator practically never fails 100 times
            raise TopologyError("could not mesh a clean disk")
        disks.append((pts, tris))

    local_n = _RIM + 2 * _PENT + GENUS2_FILL_POINTS
    # global ids: shared rim, then the non-rim points of disk A, then disk B
    def gid(disk: int, i: int) -> int:
        if i < _RIM:
            return i
        return _RIM + disk * (local_n - _RIM) + (i - _RIM)

    edges: set[Edge] = set()
    faces = 0
    positions = []
    for d, (pts, tris) in enumerate(disks):
        faces += len(tris)
        for t in tris:
            for a, b in ((0, 1), (0, 2), (1, 2)):
                u, v = gid(d, t[a]), gid(d, t[b])
                edges.add((min(u, v), max(u, v)))
    positions.append(disks[0][0][:_RIM])
    shift = np.array([2.5, 0.0])
    for d, (pts, _) in enumerate(disks):
        positions.append(pts[_RIM:] + shift * d)

    n_disks = _RIM + 2 * (local_n - _RIM)
    hole = lambda d, h: [gid(d, _RIM + h * _PENT + j) for j in range(_PENT)]  # noqa: E731

    # two cylinders from a 5 x 16 torus cut in the middle; end rings are
    # identified node-to-node with the pentagons, interior rings are new.
    w = GENUS2_CYLINDER_COLS
    next_id = n_disks
    handle_nodes = []
    for h in range(2):
        a_ring, b_ring = hole(0, h), hole(1, h)
        # reverse one end so the handle keeps a consistent orientation
        b_ring = [b_ring[0]] + b_ring[:0:-1]
        cols = [a_ring]
        new = []
        for c in range(1, w - 1):
            ring = list(range(next_id, next_id + _PENT))
            next_id += _PENT
            new.extend(ring)
            cols.append(ring)
            positions.append(np.stack([np.full(_PENT, 1.25), 0.3 * (h * 2 - 1) + 0.05 * (c - w / 2) + 0.02 * np.arange(_PENT)], axis=1))
        cols.append(b_ring)
        for c, ring in enumerate(cols):
            if 0 < c < w - 1:
                for j in range(_PENT):
                    u, v = ring[j], ring[(j + 1) % _PENT]
                    edges.add((min(u, v), max(u, v)))
            if c + 1 < len(cols):
                for j in range(_PENT):
                    u, v = ring[j], cols[c + 1][j]
                    edges.add((min(u, v), max(u, v)))
        faces += _PENT * (w - 1)
        handle_nodes.append(tuple(new))

    g = make_graph(next_id, sorted(edges), (), positions=np.vstack(positions))
    euler = g.node_count - len(g.edges) + faces
    if euler != -2:  # pragma: no cover - guarded by construction
        raise TopologyError(f"genus-2 construction has Euler characteristic {euler}")
    return Genus2Surface(
        graph=g,
        removable_nodes=handle_nodes[1],
        detachment_cycles=(tuple(hole(0, 1)), tuple(hole(1, 1))),
    )


def build_genus2_minus_cylinder(seed: int = 0) -> GraphWithBoundary:
    """Genus-2 surface with its second handle cut away.

    The two pentagons where the handle was attached become the boundary.
    ``parent_nodes`` index into ``build_genus2(seed).graph``.
    """
    surf = build_genus2(seed)
    drop = set(surf.removable_nodes)
    nodes = [v for v in range(surf.graph.node_count) if v not in drop]
    boundary = [v for c in surf.detachment_cycles for v in c]
    return induced_subgraph(surf.graph, nodes, boundary)


def build_surface(spec: dict) -> tuple[GraphWithBoundary, GraphWithBoundary]:
    """Build ``(simulation surface, observed surface)`` from a surface spec.

    The simulation surface is closed (or the surface itself for plain
    grids); the observed surface carries ``parent_nodes`` into it.
    """
    kind = spec.get("kind")
    if kind == "grid":
        g = build_grid(int(spec["rows"]), int(spec["cols"]))
        return g, g
    if kind == "torus":
        g = wrap_torus(int(spec["rows"]), int(spec["cols"]))
        return g, g
    if kind == "cylinder":
        rows, cols = int(spec.get("rows", 5)), int(spec.get("cols", 26))
        start, stop = spec.get("keep_cols", [9, 17])
        torus = wrap_torus(rows, cols)
        return torus, extract_cylinder(torus, rows, cols, range(int(start), int(stop)))
    if kind == "genus2_minus_cylinder":
        seed = int(spec.get("seed", 0))
        closed = build_genus2(seed).graph
        return closed, build_genus2_minus_cylinder(seed)
    raise InvalidSpecError(f"unknown surface kind {kind!r}")


def graph_to_json(g: GraphWithBoundary) -> dict:
    out = {
        "nodes": g.node_count,
        "edges": [list(e) for e in g.edges],
        "boundary_cycles": [list(c) for c in g.boundary_cycles],
    }
    if g.positions is not None:
        out["positions"] = g.positions.tolist()
    return out


def graph_from_json(obj: dict) -> GraphWithBoundary:
    try:
        boundary = [v for c in obj.get("boundary_cycles", []) for v in c]
        return make_graph(int(obj["nodes"]), obj["edges"], boundary, positions=obj.get("positions"))
    except KeyError as exc:
        raise InvalidSpecError(f"graph JSON missing key {exc}") from None
