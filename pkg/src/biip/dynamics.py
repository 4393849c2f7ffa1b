"""Ground-truth diffusion simulators and boundary-value datasets.

The simulators use the dissipative heat flow ``df/dt = -alpha * L f`` with
``L`` the (positive semidefinite) Hodge Laplacian, stepped by explicit Euler
exactly once per observation interval.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .hodge import OrientedCliqueComplex, complex_of, lambda_max
from .surfaces import GraphWithBoundary

KINDS = ("dirichlet", "neumann")


class StabilityError(ValueError):
    """Explicit Euler step would violate ``alpha * dt * lambda_max < 2``."""


@dataclass(frozen=True)
class KForm:
    level: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or not np.all(np.isfinite(vals)):
            raise ValueError("k-form values must be a finite 1-D array")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class Trajectory:
    """Snapshots of a k-form; ``values[i]`` is observed at ``timestamps[i]``."""

    level: int
    timestamps: np.ndarray
    values: np.ndarray  # (T, n)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if ts.ndim != 1 or vals.ndim != 2 or vals.shape[0] != ts.shape[0]:
            raise ValueError("timestamps and snapshots must have matching lengths")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    @property
    def snapshots(self) -> list[KForm]:
        return [KForm(self.level, v) for v in self.values]

    def restrict(self, items: Sequence[int]) -> "Trajectory":
        return Trajectory(self.level, self.timestamps, self.values[:, np.asarray(items, dtype=int)])


@dataclass(frozen=True)
class DiffusionParams:
    alpha: float = 1.0
    lambda_pm: float = 10.0
    dt: float | tuple[float, ...] = 0.1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.lambda_pm > 0:
            raise ValueError("lambda_pm must be positive")
        if np.any(np.asarray(self.dt, dtype=float) <= 0):
            raise ValueError("time increments must be positive")

    def increments(self, steps: int) -> np.ndarray:
        dt = np.asarray(self.dt, dtype=float)
        if dt.ndim == 0:
            return np.full(steps, float(dt))
        if dt.shape[0] < steps:
            raise ValueError(f"dt schedule has {dt.shape[0]} increments, {steps} steps requested")
        return dt[:steps].copy()


def random_heat_sources(g: GraphWithBoundary, num_sources: int, magnitude: float, seed: int) -> KForm:
    """``num_sources`` distinct nodes at ``magnitude``, the rest at zero."""
    if not 0 <= num_sources <= g.node_count:
        raise ValueError(f"num_sources must be in [0, {g.node_count}], got {num_sources}")
    rng = np.random.default_rng(seed)
    f = np.zeros(g.node_count)
    f[rng.choice(g.node_count, size=num_sources, replace=False)] = magnitude
    return KForm(0, f)


def random_edge_sources(c: OrientedCliqueComplex, num_sources: int, magnitude: float, seed: int) -> KForm:
    """Signed sources on edges: a 1-form with ``num_sources`` entries at +-magnitude."""
    n = c.size(1)
    if not 0 <= num_sources <= n:
        raise ValueError(f"num_sources must be in [0, {n}], got {num_sources}")
    rng = np.random.default_rng(seed)
    f = np.zeros(n)
    idx = rng.choice(n, size=num_sources, replace=False)
    f[idx] = magnitude * rng.choice([-1.0, 1.0], size=num_sources)
    return KForm(1, f)


def _check_stable(op: sp.spmatrix, alpha: float, dts: np.ndarray, force: bool) -> None:
    lam = lambda_max(op)
    worst = alpha * float(np.max(dts, initial=0.0)) * lam
    if worst >= 2.0:
        msg = f"unstable explicit step: alpha*dt*lambda_max = {worst:.4g} >= 2"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        if not force:
            raise StabilityError(msg)


def _timestamps(dts: np.ndarray, t0: float) -> np.ndarray:
    return t0 + np.concatenate([[0.0], np.cumsum(dts)])


def simulate_linear_diffusion(
    c: OrientedCliqueComplex,
    k: int,
    p: DiffusionParams,
    f0: KForm,
    steps: int,
    *,
    t0: float = 0.0,
    force: bool = False,
) -> Trajectory:
    if f0.level != k:
        raise ValueError(f"initial form is at level {f0.level}, expected {k}")
    lap = c.hodge_laplacian(k).astype(float)
    if f0.values.shape != (lap.shape[0],):
        raise ValueError("initial form does not match the complex")
    dts = p.increments(steps)
    _check_stable(lap, p.alpha, dts, force)
    out = np.empty((steps + 1, lap.shape[0]))
    out[0] = f0.values
    for i, dt in enumerate(dts, start=1):
        out[i] = out[i - 1] - p.alpha * dt * (lap @ out[i - 1])
    return Trajectory(k, _timestamps(dts, t0), out)


def perona_malik_conductance(x, lam: float):
    return 1.0 / (1.0 + (np.asarray(x) / lam) ** 2)


def perona_malik_rate(c: OrientedCliqueComplex, f: np.ndarray, alpha: float, lam: float) -> np.ndarray:
    """Right-hand side ``-alpha * B^T (g(|B f|) * B f)`` on node values."""
    grad = c.grad().astype(float)
    gf = grad @ f
    return -alpha * (grad.T @ (perona_malik_conductance(np.abs(gf), lam) * gf))


def simulate_perona_malik(
    c: OrientedCliqueComplex,
    p: DiffusionParams,
    f0: KForm,
    steps: int,
    *,
    t0: float = 0.0,
    force: bool = False,
) -> Trajectory:
    if f0.level != 0:
        raise ValueError("Perona-Malik diffusion acts on node values (level 0)")
    dts = p.increments(steps)
    # conductance <= 1, so the linear bound is a safe stability bound
    _check_stable(c.hodge_laplacian(0).astype(float), p.alpha, dts, force)
    out = np.empty((steps + 1, c.size(0)))
    out[0] = f0.values
    for i, dt in enumerate(dts, start=1):
        out[i] = out[i - 1] + dt * perona_malik_rate(c, out[i - 1], p.alpha, p.lambda_pm)
    return Trajectory(0, _timestamps(dts, t0), out)


def add_gaussian_noise(t: Trajectory, level: float, seed: int) -> Trajectory:
    """Independent normal noise with std ``level * RMS(t.values)`` per entry."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return Trajectory(t.level, t.timestamps.copy(), t.values.copy())
    rms = float(np.sqrt(np.mean(t.values ** 2)))
    rng = np.random.default_rng(seed)
    noisy = t.values + rng.normal(0.0, level * rms, size=t.values.shape)
    return Trajectory(t.level, t.timestamps.copy(), noisy)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class MessageGraph:
    """Items carrying the field (nodes or edges) with their adjacency.

    ``boundary_pairs`` lists ``(interior item, boundary slot)``: the slot
    indexes the boundary observations of a dataset (a boundary item for
    Dirichlet data, a half edge for Neumann data).
    """

    size: int
    pairs: tuple[tuple[int, int], ...]
    interior: tuple[int, ...]
    boundary: tuple[int, ...]
    boundary_pairs: tuple[tuple[int, int], ...]
    num_slots: int = 0


def message_graph(g: GraphWithBoundary, level: int, kind: str = "dirichlet") -> MessageGraph:
    if level == 0:
        bnd = tuple(sorted(g.boundary_nodes))
        if kind == "neumann":
            bpairs = tuple((u, h) for h, (u, _v) in enumerate(g.half_edges))
        else:
            slot = {b: i for i, b in enumerate(bnd)}
            bpairs = tuple((u, slot[v]) for u, v in g.half_edges)
        slots = len(g.half_edges) if kind == "neumann" else len(bnd)
        return MessageGraph(g.node_count, g.edges, tuple(g.interior_nodes), bnd, bpairs, slots)
    if level == 1:
        if kind != "dirichlet":
            raise ValueError("edge-valued data supports the dirichlet kind only")
        edges = list(g.edges)
        # edges are adjacent when they share a vertex (support of the Hodge 1-Laplacian)
        incident: list[list[int]] = [[] for _ in range(g.node_count)]
        for i, (u, v) in enumerate(edges):
            incident[u].append(i)
            incident[v].append(i)
        pairs = sorted({(a, b) for inc in incident for a in inc for b in inc if a < b})
        interior = tuple(i for i, (u, v) in enumerate(edges)
                         if u not in g.boundary_nodes and v not in g.boundary_nodes)
        interior_set = set(interior)
        bnd = tuple(i for i in range(len(edges)) if i not in interior_set)
        slot = {b: i for i, b in enumerate(bnd)}
        bpairs = []
        for a, b in pairs:
            if a in interior_set and b in slot:
                bpairs.append((a, slot[b]))
            elif b in interior_set and a in slot:
                bpairs.append((b, slot[a]))
        return MessageGraph(len(edges), tuple(pairs), interior, bnd, tuple(sorted(bpairs)), len(bnd))
    raise ValueError(f"datasets support levels 0 and 1, got {level}")


@dataclass
class BVPDataset:
    """Interior observations and boundary data at each timestamp.

    ``full_values`` (all items, shape ``(T, n)``) is kept for Dirichlet data
    so the vanilla ablation can run on the whole graph.
    """

    kind: str
    level: int
    graph: GraphWithBoundary
    timestamps: np.ndarray
    interior_index: np.ndarray
    boundary_index: np.ndarray  # item ids (dirichlet) or half-edge ids (neumann)
    interior_obs: np.ndarray  # (T, n_int)
    boundary_obs: np.ndarray  # (T, n_bnd)
    noise_level: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.interior_index = np.asarray(self.interior_index, dtype=np.int64)
        self.boundary_index = np.asarray(self.boundary_index, dtype=np.int64)
        self.interior_obs = np.asarray(self.interior_obs, dtype=float).reshape(len(self.timestamps), -1)
        self.boundary_obs = np.asarray(self.boundary_obs, dtype=float).reshape(len(self.timestamps), -1)
        if self.interior_obs.shape[1] != len(self.interior_index):
            raise ValueError("interior observations do not match the interior index")
        if self.boundary_obs.shape[1] != len(self.boundary_index):
            raise ValueError("boundary observations do not match the boundary index")
        if self.kind == "dirichlet" and set(self.interior_index) & set(self.boundary_index):
            raise ValueError("interior and boundary index sets overlap")

    @property
    def num_times(self) -> int:
        return len(self.timestamps)

    def messages(self) -> MessageGraph:
        return message_graph(self.graph, self.level, self.kind)

    @property
    def full_values(self) -> np.ndarray:
        if self.kind != "dirichlet":
            raise ValueError("full-graph values are only available for dirichlet data")
        n = self.messages().size
        out = np.zeros((self.num_times, n))
        out[:, self.interior_index] = self.interior_obs
        out[:, self.boundary_index] = self.boundary_obs
        return out

    def slice(self, start: int, stop: int | None = None) -> "BVPDataset":
        sl = slice(start, stop)
        return BVPDataset(
            kind=self.kind, level=self.level, graph=self.graph,
            timestamps=self.timestamps[sl], interior_index=self.interior_index,
            boundary_index=self.boundary_index, interior_obs=self.interior_obs[sl],
            boundary_obs=self.boundary_obs[sl], noise_level=self.noise_level, meta=dict(self.meta),
        )


def make_dataset(t: Trajectory, g: GraphWithBoundary, kind: str, *, noise_level: float = 0.0,
                 meta: dict | None = None) -> BVPDataset:
    """Split a trajectory on ``g``'s items into interior and boundary observations."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if kind == "neumann" and t.level != 0:
        raise ValueError("neumann datasets need a level-0 trajectory")
    mg = message_graph(g, t.level, kind)
    if t.values.shape[1] != mg.size:
        raise ValueError(f"trajectory has {t.values.shape[1]} entries per snapshot, graph has {mg.size} items")
    interior = np.asarray(mg.interior, dtype=np.int64)
    if kind == "dirichlet":
        bidx = np.asarray(mg.boundary, dtype=np.int64)
        bobs = t.values[:, bidx]
    else:
        he = np.asarray(g.half_edges, dtype=np.int64).reshape(-1, 2)
        bidx = np.arange(len(he), dtype=np.int64)
        # flux along each half edge, oriented interior -> boundary
        bobs = t.values[:, he[:, 1]] - t.values[:, he[:, 0]]
    return BVPDataset(kind, t.level, g, t.timestamps.copy(), interior, bidx,
                      t.values[:, interior], bobs, noise_level, dict(meta or {}))


def simulate(closed: GraphWithBoundary, level: int, process: str, p: DiffusionParams, f0: KForm,
             steps: int, force: bool = False) -> Trajectory:
    c = complex_of(closed, max_level=min(3, level + 1))
    if process == "linear":
        return simulate_linear_diffusion(c, level, p, f0, steps, force=force)
    if process == "perona_malik":
        if level != 0:
            raise ValueError("Perona-Malik runs on level 0 only")
        return simulate_perona_malik(c, p, f0, steps, force=force)
    raise ValueError(f"unknown process {process!r}")


def restrict_to(t: Trajectory, closed: GraphWithBoundary, observed: GraphWithBoundary) -> Trajectory:
    """Restrict a trajectory simulated on ``closed`` to the cut-out ``observed``."""
    if observed.parent_nodes is None:
        return t
    parent = np.asarray(observed.parent_nodes)
    if t.level == 0:
        return t.restrict(parent)
    if t.level == 1:
        idx = {e: i for i, e in enumerate(closed.edges)}
        items, signs = [], []
        for u, v in observed.edges:
            pu, pv = int(parent[u]), int(parent[v])
            items.append(idx[(min(pu, pv), max(pu, pv))])
            # orientation flips when relabelling reverses the vertex order
            signs.append(1.0 if pu < pv else -1.0)
        vals = t.values[:, items] * np.asarray(signs)
        return Trajectory(1, t.timestamps, vals)
    raise ValueError("restriction supports levels 0 and 1")


def dataset_to_json(d: BVPDataset) -> dict:
    from .surfaces import graph_to_json

    return {
        "kind": d.kind,
        "level": d.level,
        "graph": graph_to_json(d.graph),
        "timestamps": d.timestamps.tolist(),
        "interior_index": d.interior_index.tolist(),
        "boundary_index": d.boundary_index.tolist(),
        "interior_obs": d.interior_obs.tolist(),
        "boundary_obs": d.boundary_obs.tolist(),
        "noise_level": d.noise_level,
        "meta": d.meta,
    }


def dataset_from_json(obj: dict) -> BVPDataset:
    """Inverse of :func:`dataset_to_json`; floats round-trip exactly."""
    from .surfaces import InvalidSpecError, graph_from_json

    try:
        g = graph_from_json(obj["graph"])
        T = len(obj["timestamps"])
        d = BVPDataset(
            kind=obj["kind"], level=int(obj["level"]), graph=g, timestamps=obj["timestamps"],
            interior_index=obj["interior_index"], boundary_index=obj["boundary_index"],
            interior_obs=np.asarray(obj["interior_obs"], dtype=float).reshape(T, -1),
            boundary_obs=np.asarray(obj["boundary_obs"], dtype=float).reshape(T, -1),
            noise_level=float(obj.get("noise_level", 0.0)), meta=dict(obj.get("meta", {})),
        )
    except KeyError as exc:
        raise InvalidSpecError(f"dataset JSON missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InvalidSpecError(f"malformed dataset JSON: {exc}") from None
    if np.any(np.diff(d.timestamps) <= 0):
        raise InvalidSpecError("timestamps must be strictly increasing")
    return d
