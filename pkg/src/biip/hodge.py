"""Oriented clique complex of a graph and its discrete differential operators.

Cliques are oriented by ascending vertex order. With unit weights every
operator here keeps integer entries, so identities such as
``coboundary(1) @ coboundary(0) == 0`` hold exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .surfaces import GraphWithBoundary

MAX_LEVEL = 3


def enumerate_cliques(g: GraphWithBoundary, k: int) -> list[tuple[int, ...]]:
    """All (k+1)-node cliques of ``g`` as ascending tuples, in lexicographic order."""
    if not 0 <= k <= MAX_LEVEL:
        raise ValueError(f"clique level must be in [0, {MAX_LEVEL}], got {k}")
    return _all_cliques(g, k)[k]


def _all_cliques(g: GraphWithBoundary, kmax: int) -> list[list[tuple[int, ...]]]:
    # only extend by higher-numbered neighbours so each clique is found once
    up = [set(v for v in nb if v > u) for u, nb in enumerate(g.neighbors)]
    levels = [[(v,) for v in range(g.node_count)]]
    for _ in range(kmax):
        nxt = []
        for c in levels[-1]:
            cand = set.intersection(*(up[v] for v in c))
            nxt.extend(c + (w,) for w in cand)
        levels.append(sorted(nxt))
    return levels


@dataclass(frozen=True)
class OrientedCliqueComplex:
    graph: GraphWithBoundary
    cliques: tuple[tuple[tuple[int, ...], ...], ...]
    weights: tuple[np.ndarray, ...] = field(repr=False)

    @classmethod
    def from_graph(cls, g: GraphWithBoundary, max_level: int = MAX_LEVEL, weights=None):
        if not 0 <= max_level <= MAX_LEVEL:
            raise ValueError(f"max_level must be in [0, {MAX_LEVEL}]")
        cliques = tuple(tuple(c) for c in _all_cliques(g, max_level))
        if weights is None:
            weights = [np.ones(len(c)) for c in cliques]
        weights = tuple(np.asarray(w, dtype=float) for w in weights)
        if len(weights) != len(cliques):
            raise ValueError(f"need weights for {len(cliques)} levels, got {len(weights)}")
        for k, (c, w) in enumerate(zip(cliques, weights)):
            if w.shape != (len(c),):
                raise ValueError(f"weights at level {k} have shape {w.shape}, expected ({len(c)},)")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError(f"weights at level {k} must be positive and finite")
        return cls(g, cliques, weights)

    @property
    def max_level(self) -> int:
        return len(self.cliques) - 1

    def size(self, k: int) -> int:
        return len(self.cliques[k]) if 0 <= k <= self.max_level else 0

    @cached_property
    def _index(self) -> tuple[dict, ...]:
        return tuple({c: i for i, c in enumerate(level)} for level in self.cliques)

    def index_of(self, k: int, clique) -> int:
        return self._index[k][tuple(clique)]

    @cached_property
    def unit_weights(self) -> bool:
        return all(np.all(w == 1.0) for w in self.weights)

    def coboundary(self, k: int) -> sp.csr_matrix:
        """Matrix of the coboundary from level k to level k+1 (integer entries)."""
        return _coboundary(self, k)

    def adjoint(self, k: int) -> sp.csr_matrix:
        """Adjoint of ``coboundary(k)`` for the weighted inner products."""
        d = self.coboundary(k)
        if self.unit_weights:
            return d.T.tocsr()
        w_lo = self.weights[k] if k <= self.max_level else np.ones(d.shape[1])
        w_hi = self.weights[k + 1] if k + 1 <= self.max_level else np.ones(d.shape[0])
        return (sp.diags(1.0 / w_lo) @ d.T.astype(float) @ sp.diags(w_hi)).tocsr()

    def hodge_laplacian(self, k: int) -> sp.csr_matrix:
        if not 0 <= k <= MAX_LEVEL:
            raise ValueError(f"Hodge level must be in [0, {MAX_LEVEL}], got {k}")
        n = self.size(k)
        dtype = np.int64 if self.unit_weights else float
        lap = sp.csr_matrix((n, n), dtype=dtype)
        if k >= 1:
            lap = lap + self.coboundary(k - 1) @ self.adjoint(k - 1)
        if self.size(k + 1):
            lap = lap + self.adjoint(k) @ self.coboundary(k)
        lap = lap.tocsr()
        lap.sum_duplicates()
        lap.eliminate_zeros()
        lap.sort_indices()
        return lap

    # named first-order operators
    def grad(self) -> sp.csr_matrix:
        return self.coboundary(0)

    def div(self) -> sp.csr_matrix:
        return (-self.adjoint(0)).tocsr()

    def curl(self) -> sp.csr_matrix:
        return self.coboundary(1)

    def inner_product(self, k: int, f, g) -> float:
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        if f.shape != (self.size(k),) or g.shape != (self.size(k),):
            raise ValueError(
                f"forms must have length {self.size(k)} at level {k}, got {f.shape} and {g.shape}"
            )
        return float(np.sum(self.weights[k] * f * g))


def _coboundary(c: OrientedCliqueComplex, k: int) -> sp.csr_matrix:
    if not 0 <= k < MAX_LEVEL:
        raise ValueError(f"coboundary level must be in [0, {MAX_LEVEL - 1}], got {k}")
    n_lo = c.size(k)
    hi = c.cliques[k + 1] if k + 1 <= c.max_level else ()
    rows, cols, vals = [], [], []
    idx = c._index[k]
    for r, clique in enumerate(hi):
        for j in range(len(clique)):
            face = clique[:j] + clique[j + 1:]
            rows.append(r)
            cols.append(idx[face])
            vals.append(-1 if j % 2 else 1)
    m = sp.csr_matrix((np.array(vals, dtype=np.int64), (rows, cols)), shape=(len(hi), n_lo))
    m.sort_indices()
    return m


def complex_of(g: GraphWithBoundary, max_level: int = MAX_LEVEL) -> OrientedCliqueComplex:
    return OrientedCliqueComplex.from_graph(g, max_level)


def dump_triplets(m: sp.spmatrix) -> str:
    """``row col value`` lines in canonical (row, col) order, explicit zeros dropped."""
    coo = sp.coo_matrix(m)
    order = np.lexsort((coo.col, coo.row))
    lines = []
    for i in order:
        v = coo.data[i]
        if v == 0:
            continue
        val = str(int(v)) if float(v).is_integer() else repr(float(v))
        lines.append(f"{coo.row[i]} {coo.col[i]} {val}")
    return "\n".join(lines) + ("\n" if lines else "")


def lambda_max(op: sp.spmatrix) -> float:
    """Largest eigenvalue of a symmetric PSD operator (Lanczos; dense below 3 rows)."""
    n = op.shape[0]
    if n == 0:
        return 0.0
    op = sp.csr_matrix(op, dtype=float)
    if n < 3:
        return float(np.linalg.eigvalsh(op.toarray()).max())
    v0 = np.ones(n) / np.sqrt(n) + np.linspace(0.0, 1e-3, n)
    return float(spla.eigsh(op, k=1, which="LA", v0=v0, return_eigenvectors=False, tol=1e-12)[0])
