"""Segment-sampling training of the message-passing field, and RMSE evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .dynamics import BVPDataset
from .mpnn import DTYPE, ModelParams, VectorField
from .odeint import DivergenceError, SolverConfig, integrate_path, integrate_with_gradient

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    segment_length: int = 4
    learning_rate: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    solver: SolverConfig | None = None  # None: rk4 at 1/8 of the data spacing
    steps_per_interval: int = 8
    val_every: int = 25
    lr_schedule: str = "cosine"  # or "constant"; cosine decays to lr_final_fraction * lr
    lr_final_fraction: float = 0.01

    def __post_init__(self):
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        frac = epoch / (self.epochs - 1)
        lo = self.lr_final_fraction
        return self.learning_rate * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * frac)))

    def train_solver(self, d: BVPDataset) -> SolverConfig:
        if self.solver is not None:
            return self.solver
        return default_solver(d, "rk4_fixed", self.steps_per_interval)


def data_scale(d: BVPDataset) -> float:
    """RMS of the interior observations: the fixed field scale a model is built with."""
    rms = float(np.sqrt(np.mean(d.interior_obs ** 2)))
    return rms if rms > 0 else 1.0


def default_solver(d: BVPDataset, method: str = "rk4_fixed", steps_per_interval: int = 8) -> SolverConfig:
    if method == "dopri5":
        return SolverConfig(method="dopri5")
    dt = float(np.min(np.diff(d.timestamps)))
    return SolverConfig(method=method, fixed_step=dt / steps_per_interval)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[torch.Tensor], grads: list[torch.Tensor], cfg: TrainConfig,
              lr: float | None = None):
    """Bias-corrected Adam update. Non-finite gradients skip the step."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    if not all(torch.isfinite(g).all() for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient; Adam step skipped (%d so far)", state.skipped)
        return state, params
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    new = []
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            state.m[i] = b1 * state.m[i] + (1 - b1) * g
            state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
            m_hat = state.m[i] / c1
            v_hat = state.v[i] / c2
            new.append(p - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps))
    return state, new


# ---------------------------------------------------------------------------
# segments and losses


def sample_segment(d: BVPDataset, m: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform start ``i`` in ``[0, T - m - 1]``; returns ``(i, i + m)``."""
    T = d.num_times
    if m < 1 or m >= T:
        raise ValueError(f"segment length {m} needs 1 <= m < {T} timestamps")
    i = int(rng.integers(0, T - m))
    return i, i + m


def _target(d: BVPDataset, i: int) -> torch.Tensor:
    return torch.as_tensor(d.interior_obs[i], dtype=DTYPE)


def segment_loss(model: ModelParams, d: BVPDataset, seg: tuple[int, int], solver: SolverConfig,
                 field: VectorField | None = None) -> float:
    """Interior MSE after integrating from ``f(t_i)`` to ``t_{i+m}``."""
    from .odeint import integrate

    vf = field or VectorField(model, d)
    i, j = seg
    with torch.no_grad():
        y = integrate(vf, vf.initial_state(d, i), d.timestamps[i], d.timestamps[j], solver)
        return float(((y[vf.loss_index] - _target(d, j)) ** 2).mean())


def mean_segment_loss(model: ModelParams, d: BVPDataset, m: int, solver: SolverConfig) -> float:
    """Average segment loss over every start index (a deterministic training MSE)."""
    vf = VectorField(model, d)
    losses = [segment_loss(model, d, (i, i + m), solver, vf) for i in range(d.num_times - m)]
    return float(np.mean(losses))


@dataclass
class TrainResult:
    model: ModelParams
    history: list[dict]
    skipped_steps: int = 0


def train(model: ModelParams, d: BVPDataset, cfg: TrainConfig, *, val: BVPDataset | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on one random segment per epoch; deterministic given ``cfg.seed``."""
    model = model.detached()
    vf = VectorField(model, d)
    solver = cfg.train_solver(d)
    m = min(cfg.segment_length, d.num_times - 1)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    history = []
    skipped = 0
    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        i, j = sample_segment(d, m, rng)
        target = _target(d, j)
        idx = vf.loss_index

        def loss_fn(y):
            return ((y[idx] - target) ** 2).mean()

        try:
            _, grads, _, loss = integrate_with_gradient(
                vf, params, vf.initial_state(d, i), d.timestamps[i], d.timestamps[j], solver, loss_fn)
        except DivergenceError as exc:
            skipped += 1
            log.warning("epoch %d: solver diverged on segment (%d, %d); step skipped: %s", epoch, i, j, exc)
            continue
        if not math.isfinite(loss):
            raise TrainingDivergence(
                f"non-finite loss at epoch {epoch} on segment ({i}, {j}); "
                f"parameter norm {float(np.linalg.norm(model.flat())):.4g}")
        state, new = adam_step(state, params, grads, cfg, cfg.lr_at(epoch))
        with torch.no_grad():
            for p, q in zip(params, new):
                p.copy_(q)
        rec = {"epoch": epoch, "train_mse": loss, "val_rmse": None}
        if val is not None and cfg.val_every and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
            try:
                rec["val_rmse"] = rollout_rmse(model, val, default_solver(val))
            except DivergenceError:
                rec["val_rmse"] = float("inf")
        rec["wall_ms"] = (time.perf_counter() - tic) * 1e3
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    for p in params:
        p.requires_grad_(False)
    return TrainResult(model, history, skipped + state.skipped)


# ---------------------------------------------------------------------------
# evaluation


def rollout(model: ModelParams, d: BVPDataset, solver: SolverConfig, stats=None) -> np.ndarray:
    """Predicted interior values at every timestamp, starting from the observed ``f(t_0)``."""
    vf = VectorField(model, d)
    with torch.no_grad():
        ys = integrate_path(vf, vf.initial_state(d, 0), d.timestamps, solver, stats)
    return ys[:, vf.loss_index].numpy()


def rollout_full(model: ModelParams, d: BVPDataset, solver: SolverConfig) -> np.ndarray:
    """Predicted values on every item; boundary items carry the data the model was given."""
    vf = VectorField(model, d)
    with torch.no_grad():
        ys = integrate_path(vf, vf.initial_state(d, 0), d.timestamps, solver).numpy()
    n = vf.mg.size
    if not model.teacher_forced:
        return ys
    out = np.full((d.num_times, n), np.nan)
    out[:, np.asarray(vf.mg.interior)] = ys
    if d.kind == "dirichlet":
        out[:, d.boundary_index] = d.boundary_obs
    return out


def interior_rmse(pred: np.ndarray, d: BVPDataset) -> float:
    err = pred[1:] - d.interior_obs[1:]
    return float(np.sqrt(np.mean(err ** 2))) if err.size else 0.0


def rollout_rmse(model: ModelParams, d: BVPDataset, solver: SolverConfig) -> float:
    return interior_rmse(rollout(model, d, solver), d)


@dataclass
class EvalReport:
    rmse: dict[str, float | None]
    per_node_rmse: dict[str, list[float]] = field(default_factory=dict)
    interior_index: list[int] = field(default_factory=list)
    noise_level: float = 0.0
    wall_clock_s: float = 0.0

    @property
    def rmse_train(self):
        return self.rmse.get("train")

    @property
    def rmse_test(self):
        return self.rmse.get("test")

    @property
    def rmse_new(self):
        return self.rmse.get("new")

    def to_json(self) -> dict:
        # wall clock is excluded so reports are byte-reproducible
        return {
            "rmse": {k: self.rmse.get(k) for k in ("train", "test", "new")},
            "per_node_rmse": self.per_node_rmse,
            "interior_index": self.interior_index,
            "noise_level": self.noise_level,
        }


def evaluate(model: ModelParams, datasets: dict[str, BVPDataset], solver: SolverConfig | None = None) -> EvalReport:
    """Interior RMSE of free rollouts on each of the ``train``/``test``/``new`` datasets."""
    tic = time.perf_counter()
    rmse: dict[str, float | None] = {"train": None, "test": None, "new": None}
    per_node = {}
    interior: list[int] = []
    noise = 0.0
    for name, d in datasets.items():
        if d is None:
            continue
        sol = solver or default_solver(d, "dopri5")
        pred = rollout(model, d, sol)
        err = pred[1:] - d.interior_obs[1:]
        rmse[name] = float(np.sqrt(np.mean(err ** 2)))
        per_node[name] = np.sqrt(np.mean(err ** 2, axis=0)).tolist()
        interior = d.interior_index.tolist()
        noise = max(noise, d.noise_level)
    return EvalReport(rmse, per_node, interior, noise, time.perf_counter() - tic)


def with_solver(cfg: TrainConfig, solver: SolverConfig | None) -> TrainConfig:
    return replace(cfg, solver=solver)
