import json

import numpy as np
import pytest
from conftest import path_graph

from biip.dynamics import (
    BVPDataset,
    DiffusionParams,
    KForm,
    StabilityError,
    Trajectory,
    add_gaussian_noise,
    dataset_from_json,
    dataset_to_json,
    make_dataset,
    message_graph,
    perona_malik_conductance,
    random_edge_sources,
    random_heat_sources,
    restrict_to,
    simulate,
    simulate_linear_diffusion,
    simulate_perona_malik,
)
from biip.hodge import complex_of
from biip.surfaces import InvalidSpecError


@pytest.fixture(scope="module")
def torus_complex(torus):
    return complex_of(torus, 2)


def sources(g, n=26, seed=7):
    return random_heat_sources(g, n, 100.0, seed)


class TestSources:
    def test_zero_sources(self, cylinder):
        assert not random_heat_sources(cylinder, 0, 100.0, 0).values.any()

    def test_deterministic_and_support(self, cylinder):
        a = random_heat_sources(cylinder, 3, 100.0, 7)
        b = random_heat_sources(cylinder, 3, 100.0, 7)
        assert np.array_equal(a.values, b.values)
        assert np.count_nonzero(a.values) == 3 and set(a.values) == {0.0, 100.0}

    @pytest.mark.parametrize("n", [-1, 41])
    def test_out_of_range(self, cylinder, n):
        with pytest.raises(ValueError):
            random_heat_sources(cylinder, n, 1.0, 0)

    def test_edge_sources_signed(self, cylinder):
        f = random_edge_sources(complex_of(cylinder, 1), 10, 5.0, 3)
        assert np.count_nonzero(f.values) == 10 and set(np.abs(f.values[f.values != 0])) == {5.0}


class TestLinear:
    def test_one_step_path(self):
        c = complex_of(path_graph(2), 1)
        t = simulate_linear_diffusion(c, 0, DiffusionParams(1.0, 10.0, 0.1), KForm(0, [1.0, 0.0]), 1)
        np.testing.assert_allclose(t.values[1], [0.9, 0.1], rtol=0, atol=1e-15)
        np.testing.assert_allclose(t.timestamps, [0.0, 0.1])

    def test_mass_conserved_on_torus(self, torus, torus_complex):
        t = simulate_linear_diffusion(torus_complex, 0, DiffusionParams(), sources(torus), 100)
        mass = t.values.sum(axis=1)
        assert np.all(np.abs(mass - mass[0]) <= 1e-9 * abs(mass[0]))

    def test_constant_stays_constant(self, torus_complex):
        t = simulate_linear_diffusion(torus_complex, 0, DiffusionParams(), KForm(0, np.full(130, 3.5)), 20)
        assert np.all(t.values == 3.5)

    def test_energy_non_increasing(self, torus, torus_complex):
        t = simulate_linear_diffusion(torus_complex, 0, DiffusionParams(), sources(torus), 100)
        lap = torus_complex.hodge_laplacian(0)
        energy = np.einsum("ti,ti->t", t.values, (lap @ t.values.T).T)
        assert np.all(np.diff(energy) <= 1e-9 * energy[0])

    def test_maximum_principle(self, torus, torus_complex):
        f0 = sources(torus)
        t = simulate_linear_diffusion(torus_complex, 0, DiffusionParams(), f0, 100)
        assert t.values.min() >= f0.values.min() - 1e-12 and t.values.max() <= f0.values.max() + 1e-12

    def test_level_one(self, torus, torus_complex):
        f0 = random_edge_sources(torus_complex, 10, 50.0, 1)
        t = simulate_linear_diffusion(torus_complex, 1, DiffusionParams(), f0, 10)
        assert t.values.shape == (11, 260)
        # the 1-form energy decays as well
        assert np.linalg.norm(t.values[-1]) < np.linalg.norm(t.values[0])

    def test_unstable_refused(self, torus_complex):
        p = DiffusionParams(alpha=1.0, dt=0.3)
        with pytest.warns(RuntimeWarning), pytest.raises(StabilityError):
            simulate_linear_diffusion(torus_complex, 0, p, KForm(0, np.zeros(130)), 2)

    def test_unstable_forced(self, torus_complex):
        p = DiffusionParams(alpha=1.0, dt=0.3)
        with pytest.warns(RuntimeWarning):
            t = simulate_linear_diffusion(torus_complex, 0, p, KForm(0, np.zeros(130)), 2, force=True)
        assert t.values.shape == (3, 130)

    def test_dt_schedule(self):
        c = complex_of(path_graph(2), 1)
        t = simulate_linear_diffusion(c, 0, DiffusionParams(dt=(0.1, 0.2)), KForm(0, [1.0, 0.0]), 2)
        np.testing.assert_allclose(t.timestamps, [0.0, 0.1, 0.3])

    def test_deterministic(self, torus, torus_complex):
        a = simulate_linear_diffusion(torus_complex, 0, DiffusionParams(), sources(torus), 30)
        b = simulate_linear_diffusion(torus_complex, 0, DiffusionParams(), sources(torus), 30)
        assert np.array_equal(a.values, b.values)


class TestPeronaMalik:
    def test_conductance(self):
        assert perona_malik_conductance(0.0, 3.0) == 1.0
        assert perona_malik_conductance(3.0, 3.0) == 0.5

    def test_mass_conserved(self, torus, torus_complex):
        t = simulate_perona_malik(torus_complex, DiffusionParams(lambda_pm=10.0), sources(torus), 100)
        mass = t.values.sum(axis=1)
        assert np.all(np.abs(mass - mass[0]) <= 1e-9 * abs(mass[0]))

    def test_large_lambda_is_linear(self, torus, torus_complex):
        p = DiffusionParams(lambda_pm=1e9)
        a = simulate_perona_malik(torus_complex, p, sources(torus), 5)
        b = simulate_linear_diffusion(torus_complex, 0, p, sources(torus), 5)
        for i in range(1, 6):
            assert np.linalg.norm(a.values[i] - b.values[i]) <= 1e-6 * np.linalg.norm(b.values[i])

    def test_edges_diffuse_slower_than_linear(self, torus, torus_complex):
        f0 = sources(torus)
        a = simulate_perona_malik(torus_complex, DiffusionParams(lambda_pm=5.0), f0, 1)
        b = simulate_linear_diffusion(torus_complex, 0, DiffusionParams(), f0, 1)
        # sharp spikes lose less heat under Perona-Malik
        assert a.values[1].max() > b.values[1].max()


class TestNoise:
    def test_zero_level_identity(self, torus, torus_complex):
        t = simulate_linear_diffusion(torus_complex, 0, DiffusionParams(), sources(torus), 5)
        assert np.array_equal(add_gaussian_noise(t, 0.0, 1).values, t.values)

    def test_std_matches_definition(self):
        vals = np.full((200, 100), 100.0)  # RMS 100
        t = Trajectory(0, np.arange(200.0), vals)
        noisy = add_gaussian_noise(t, 0.01, 5)
        std = np.std(noisy.values - vals)
        assert abs(std - 1.0) < 0.1

    def test_negative_rejected(self):
        t = Trajectory(0, [0.0], [[1.0]])
        with pytest.raises(ValueError):
            add_gaussian_noise(t, -0.1, 0)

    def test_deterministic(self):
        t = Trajectory(0, [0.0, 1.0], [[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(add_gaussian_noise(t, 0.1, 9).values, add_gaussian_noise(t, 0.1, 9).values)


@pytest.fixture(scope="module")
def traj(torus, cylinder):
    t = simulate(torus, 0, "linear", DiffusionParams(), sources(torus), 9)
    return restrict_to(t, torus, cylinder)


class TestDatasets:
    def test_dirichlet_shapes(self, traj, cylinder):
        d = make_dataset(traj, cylinder, "dirichlet")
        assert d.interior_obs.shape == (10, 30) and d.boundary_obs.shape == (10, 10)
        assert not set(d.interior_index) & set(d.boundary_index)

    def test_neumann_fluxes(self, traj, cylinder):
        d = make_dataset(traj, cylinder, "neumann")
        assert d.boundary_obs.shape == (10, len(cylinder.half_edges))
        u, v = cylinder.half_edges[0]
        np.testing.assert_array_equal(d.boundary_obs[:, 0], traj.values[:, v] - traj.values[:, u])

    def test_constant_field_zero_flux(self, cylinder):
        t = Trajectory(0, [0.0, 1.0], np.full((2, 40), 7.0))
        assert not make_dataset(t, cylinder, "neumann").boundary_obs.any()

    def test_neumann_needs_level_zero(self, cylinder):
        t = Trajectory(1, [0.0], np.zeros((1, len(cylinder.edges))))
        with pytest.raises(ValueError):
            make_dataset(t, cylinder, "neumann")

    def test_restriction_matches_parent_values(self, torus, cylinder):
        full = simulate(torus, 0, "linear", DiffusionParams(), sources(torus), 3)
        obs = restrict_to(full, torus, cylinder)
        np.testing.assert_array_equal(obs.values, full.values[:, list(cylinder.parent_nodes)])

    def test_edge_restriction_keeps_orientation(self, torus, cylinder):
        c = complex_of(torus, 1)
        full = simulate(torus, 1, "linear", DiffusionParams(), random_edge_sources(c, 20, 10.0, 2), 2)
        obs = restrict_to(full, torus, cylinder)
        # gradient of a node field restricts consistently
        f = np.arange(130.0)
        g_full = c.grad() @ f
        g_obs = complex_of(cylinder, 1).grad() @ f[list(cylinder.parent_nodes)]
        sub = restrict_to(Trajectory(1, [0.0], g_full[None]), torus, cylinder)
        np.testing.assert_array_equal(sub.values[0], g_obs)
        assert obs.values.shape == (3, len(cylinder.edges))

    def test_level_one_message_graph(self, cylinder):
        mg = message_graph(cylinder, 1)
        assert mg.size == len(cylinder.edges)
        interior = set(cylinder.interior_nodes)
        for i in mg.interior:
            u, v = cylinder.edges[i]
            assert u in interior and v in interior

    def test_json_round_trip_exact(self, traj, cylinder):
        d = make_dataset(traj, cylinder, "dirichlet", noise_level=0.01, meta={"alpha": 1.0, "lambda": 10.0, "seed": 7})
        obj = json.loads(json.dumps(dataset_to_json(d)))
        assert set(obj) == {"kind", "level", "graph", "timestamps", "interior_index", "boundary_index",
                            "interior_obs", "boundary_obs", "noise_level", "meta"}
        e = dataset_from_json(obj)
        assert np.array_equal(e.interior_obs, d.interior_obs) and np.array_equal(e.boundary_obs, d.boundary_obs)
        assert np.array_equal(e.timestamps, d.timestamps) and e.noise_level == 0.01

    def test_json_missing_key(self):
        with pytest.raises(InvalidSpecError):
            dataset_from_json({"kind": "dirichlet"})

    def test_overlapping_indices_rejected(self, cylinder):
        with pytest.raises(ValueError):
            BVPDataset("dirichlet", 0, cylinder, [0.0], [0, 1], [1], [[0.0, 0.0]], [[0.0]])

    def test_slice(self, traj, cylinder):
        d = make_dataset(traj, cylinder, "dirichlet")
        s = d.slice(3, 6)
        assert s.num_times == 3 and np.array_equal(s.interior_obs, d.interior_obs[3:6])
