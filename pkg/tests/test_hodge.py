import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from conftest import path_graph, random_graph, triangle

from biip.hodge import OrientedCliqueComplex, complex_of, dump_triplets, enumerate_cliques, lambda_max
from biip.surfaces import make_graph


def dense(m):
    return np.asarray(m.todense())


def brute_cliques(g, k):
    adj = {e for e in g.edges}
    out = []
    for c in itertools.combinations(range(g.node_count), k + 1):
        if all((a, b) in adj for a, b in itertools.combinations(c, 2)):
            out.append(c)
    return out


class TestCliques:
    def test_triangle(self):
        assert enumerate_cliques(triangle(), 2) == [(0, 1, 2)]

    def test_cylinder_has_no_triangles(self, cylinder):
        assert enumerate_cliques(cylinder, 2) == []

    def test_path(self):
        assert enumerate_cliques(path_graph(3), 1) == [(0, 1), (1, 2)]

    def test_matches_brute_force(self, rng):
        for _ in range(30):
            g = random_graph(rng)
            for k in range(4):
                assert enumerate_cliques(g, k) == brute_cliques(g, k)

    def test_faces_present(self):
        k4 = make_graph(5, [(a, b) for a, b in itertools.combinations(range(5), 2)])
        c = complex_of(k4, 3)
        for k in range(1, 4):
            lower = set(c.cliques[k - 1])
            for q in c.cliques[k]:
                assert all(q[:j] + q[j + 1:] in lower for j in range(k + 1))

    def test_level_out_of_range(self):
        with pytest.raises(ValueError):
            enumerate_cliques(triangle(), 4)


class TestCoboundary:
    def test_path_gradient(self):
        c = complex_of(path_graph(2), 1)
        a, b = 2.5, -1.25
        assert (c.grad() @ np.array([a, b]))[0] == b - a

    def test_triangle_curl_signs(self):
        c = complex_of(triangle(), 2)
        g = np.array([3.0, 5.0, 7.0])  # on (0,1), (0,2), (1,2)
        assert (c.curl() @ g)[0] == 7.0 - 5.0 + 3.0

    def test_row_nonzeros(self):
        k5 = make_graph(5, list(itertools.combinations(range(5), 2)))
        c = complex_of(k5, 3)
        for k in range(3):
            nnz = np.diff(c.coboundary(k).indptr)
            assert set(nnz) == {k + 2}

    def test_exactness_integer(self):
        k5 = make_graph(5, list(itertools.combinations(range(5), 2)))
        c = complex_of(k5, 3)
        for k in range(2):
            prod = c.coboundary(k + 1) @ c.coboundary(k)
            assert prod.dtype.kind == "i"
            assert prod.count_nonzero() == 0

    def test_grad_is_B_and_div_is_minus_Bt(self):
        c = complex_of(path_graph(2), 1)
        assert dense(c.grad()).tolist() == [[-1, 1]]
        cval = 4.0
        np.testing.assert_array_equal(c.div() @ np.array([cval]), [cval, -cval])


class TestAdjoint:
    def test_unit_weights_transpose(self, rng):
        g = random_graph(rng, 8, p=0.7)
        c = complex_of(g, 2)
        for k in range(2):
            np.testing.assert_array_equal(dense(c.adjoint(k)), dense(c.coboundary(k)).T)

    def test_weighted_adjointness(self, rng):
        g = make_graph(6, list(itertools.combinations(range(6), 2)))
        base = complex_of(g, 2)
        w = [rng.uniform(0.5, 2.0, len(q)) for q in base.cliques]
        c = OrientedCliqueComplex.from_graph(g, 2, weights=w)
        for k in range(2):
            f = rng.standard_normal(c.size(k))
            h = rng.standard_normal(c.size(k + 1))
            lhs = c.inner_product(k + 1, c.coboundary(k) @ f, h)
            rhs = c.inner_product(k, f, c.adjoint(k) @ h)
            assert lhs == pytest.approx(rhs, rel=1e-12)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_nonpositive_weight_rejected(self, bad):
        g = path_graph(2)
        with pytest.raises(ValueError):
            OrientedCliqueComplex.from_graph(g, 1, weights=[[1.0, bad], [1.0]])


class TestLaplacian:
    def test_path(self):
        assert dense(complex_of(path_graph(2), 1).hodge_laplacian(0)).tolist() == [[1, -1], [-1, 1]]

    def test_triangle(self):
        lap = dense(complex_of(triangle(), 2).hodge_laplacian(0))
        assert lap.tolist() == [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]]

    def test_degree_minus_adjacency(self, rng):
        for _ in range(50):
            g = random_graph(rng)
            A = np.zeros((g.node_count, g.node_count), dtype=np.int64)
            for u, v in g.edges:
                A[u, v] = A[v, u] = 1
            lap = dense(complex_of(g, 1).hodge_laplacian(0))
            assert np.array_equal(lap, np.diag(A.sum(1)) - A)

    def test_constants_in_kernel(self, torus):
        lap = complex_of(torus, 1).hodge_laplacian(0)
        assert np.all(lap @ np.ones(torus.node_count, dtype=np.int64) == 0)

    def test_triangle_free_delta1(self, cylinder):
        c = complex_of(cylinder, 2)
        B = c.coboundary(0)
        assert (c.hodge_laplacian(1) != (B @ B.T)).nnz == 0

    def test_delta1_with_triangles(self):
        k4 = make_graph(4, list(itertools.combinations(range(4), 2)))
        c = complex_of(k4, 3)
        B, C = dense(c.coboundary(0)), dense(c.coboundary(1))
        np.testing.assert_array_equal(dense(c.hodge_laplacian(1)), B @ B.T + C.T @ C)

    def test_symmetric_psd(self, rng):
        for _ in range(20):
            g = random_graph(rng)
            c = complex_of(g, 3)
            for k in range(4):
                if c.size(k) == 0:
                    continue
                L = dense(c.hodge_laplacian(k)).astype(float)
                assert np.array_equal(L, L.T)
                assert np.linalg.eigvalsh(L).min() >= -1e-10

    def test_quadratic_form_is_gradient_energy(self, rng, cylinder):
        c = complex_of(cylinder, 1)
        f = rng.standard_normal(cylinder.node_count)
        assert f @ (c.hodge_laplacian(0) @ f) == pytest.approx(np.sum((c.grad() @ f) ** 2), rel=1e-12)


class TestInnerProduct:
    def test_indicator(self):
        c = complex_of(triangle(), 1)
        e = np.array([0.0, 1.0, 0.0])
        assert c.inner_product(1, e, e) == 1.0

    def test_weighted(self):
        g = triangle()
        c = OrientedCliqueComplex.from_graph(g, 1, weights=[np.ones(3), 2 * np.ones(3)])
        e = np.array([0.0, 1.0, 0.0])
        assert c.inner_product(1, e, e) == 2.0

    def test_dimension_mismatch(self):
        c = complex_of(triangle(), 1)
        with pytest.raises(ValueError):
            c.inner_product(1, np.ones(2), np.ones(3))


def test_triplet_dump_golden():
    text = dump_triplets(complex_of(triangle(), 2).hodge_laplacian(0))
    assert text == "0 0 2\n0 1 -1\n0 2 -1\n1 0 -1\n1 1 2\n1 2 -1\n2 0 -1\n2 1 -1\n2 2 2\n"


def test_lambda_max(torus):
    lap = complex_of(torus, 1).hodge_laplacian(0).astype(float)
    exact = np.linalg.eigvalsh(dense(lap)).max()
    assert lambda_max(lap) == pytest.approx(exact, rel=1e-6)


def test_sparse_format(torus):
    lap = complex_of(torus, 1).hodge_laplacian(0)
    assert sp.issparse(lap) and lap.nnz == 130 + 2 * 260
