import numpy as np
import pytest
import torch

from biip.mpnn import DTYPE, MPLayerParams, ModelParams, VectorField, init_model
from biip.odeint import SolverConfig, integrate, integrate_with_gradient
from biip.surfaces import build_grid, extract_cylinder, make_graph, wrap_torus

torch.set_num_threads(1)


def path_graph(n=2):
    return make_graph(n, [(i, i + 1) for i in range(n - 1)])


def triangle():
    return make_graph(3, [(0, 1), (1, 2), (0, 2)])


def random_graph(rng, n_max=8, p=None):
    n = int(rng.integers(1, n_max + 1))
    p = rng.uniform(0.2, 0.9) if p is None else p
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    return make_graph(n, edges)


def linear_model(a, b, *, kind="dirichlet", teacher_forced=True, agg="mean"):
    """One identity layer ``a * x_u + b * agg``: the heat flow when ``a = -b * degree``."""
    t = lambda v: torch.tensor([[float(v)]], dtype=torch.float64)  # noqa: E731
    layer = MPLayerParams(t(a), t(b), torch.zeros(1, dtype=torch.float64), "identity")
    return ModelParams([layer], kind, agg, teacher_forced, 1.0, 0)


def fd_gradient_error(d, h=1e-5, seed=3):
    """Max relative gap between autograd and central differences of a segment loss.

    A 2-layer model, a three-interval segment, every parameter perturbed.
    """
    from biip.trainer import data_scale

    m = init_model(hidden_dim=6, num_layers=2, seed=seed, scale=data_scale(d))
    vf = VectorField(m, d)
    cfg = SolverConfig("rk4_fixed", 0.0125)
    y0 = vf.initial_state(d, 0)
    t0, t1 = d.timestamps[0], d.timestamps[3]
    target = torch.as_tensor(d.interior_obs[3], dtype=DTYPE)

    def loss_fn(y):
        return ((y[vf.loss_index] - target) ** 2).mean()

    params = m.parameters()
    _, grads, _, _ = integrate_with_gradient(vf, params, y0, t0, t1, cfg, loss_fn)
    for p in params:
        p.requires_grad_(False)

    def loss_at():
        with torch.no_grad():
            return float(loss_fn(integrate(vf, y0, t0, t1, cfg)))

    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.view(-1), g.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            up = loss_at()
            flat[k] = old - h
            down = loss_at()
            flat[k] = old
            fd = (up - down) / (2 * h)
            ad = gflat[k].item()
            worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-6))
    return worst


def grid_data():
    from biip.experiments import generate

    spec = {"surface": {"kind": "grid", "rows": 3, "cols": 3}, "sources": {"count": 3, "seed": 1},
            "timestamps": 8, "train_timestamps": 5, "dt": 0.05}
    return generate(spec)


@pytest.fixture(scope="session")
def torus():
    return wrap_torus(5, 26)


@pytest.fixture(scope="session")
def cylinder(torus):
    return extract_cylinder(torus, 5, 26, range(9, 17))


@pytest.fixture(scope="session")
def grid3():
    return build_grid(3, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
