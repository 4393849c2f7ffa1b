"""Synthetic experiment pipeline: surface -> simulation -> datasets."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import (
    BVPDataset,
    DiffusionParams,
    add_gaussian_noise,
    make_dataset,
    random_edge_sources,
    random_heat_sources,
    restrict_to,
    simulate,
)
from .hodge import complex_of
from .mpnn import ModelParams, init_model
from .surfaces import GraphWithBoundary, InvalidSpecError, build_surface
from .trainer import EvalReport, TrainConfig, data_scale, evaluate, mean_segment_loss, train

DEFAULT_SPEC = {
    "surface": {"kind": "cylinder", "rows": 5, "cols": 26, "keep_cols": [9, 17]},
    "process": "linear",
    "level": 0,
    "kind": "dirichlet",
    "alpha": 1.0,
    "lambda_pm": 20.0,
    "dt": 0.1,
    "timestamps": 40,
    "train_timestamps": 20,
    "sources": {"count": 26, "magnitude": 100.0, "seed": 7},
    "new_seed": 1007,
    "noise": 0.0,
    "noise_seed": 0,
}


def merge_spec(spec: dict | None) -> dict:
    out = copy.deepcopy(DEFAULT_SPEC)
    for key, val in (spec or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            # a new surface kind replaces the surface block wholesale
            if key == "surface" and val.get("kind", out[key].get("kind")) != out[key].get("kind"):
                out[key] = dict(val)
            else:
                out[key].update(val)
        else:
            out[key] = val
    return out


@dataclass
class GeneratedData:
    spec: dict
    closed: GraphWithBoundary
    observed: GraphWithBoundary
    full: BVPDataset
    train: BVPDataset
    test: BVPDataset
    new: BVPDataset | None


def _trajectory(spec: dict, closed: GraphWithBoundary, seed: int):
    level = int(spec["level"])
    src = spec["sources"]
    params = DiffusionParams(alpha=float(spec["alpha"]), lambda_pm=float(spec["lambda_pm"]), dt=spec["dt"])
    if level == 0:
        f0 = random_heat_sources(closed, int(src["count"]), float(src["magnitude"]), seed)
    elif level == 1:
        f0 = random_edge_sources(complex_of(closed, 1), int(src["count"]), float(src["magnitude"]), seed)
    else:
        raise InvalidSpecError(f"level must be 0 or 1, got {level}")
    return simulate(closed, level, spec["process"], params, f0, int(spec["timestamps"]) - 1)


def _dataset(spec: dict, closed, observed, seed: int, noise_seed: int) -> BVPDataset:
    traj = restrict_to(_trajectory(spec, closed, seed), closed, observed)
    noise = float(spec.get("noise", 0.0))
    traj = add_gaussian_noise(traj, noise, noise_seed)
    meta = {"alpha": float(spec["alpha"]), "lambda": float(spec["lambda_pm"]), "seed": seed,
            "process": spec["process"]}
    return make_dataset(traj, observed, spec["kind"], noise_level=noise, meta=meta)


def generate(spec: dict | None = None) -> GeneratedData:
    """Simulate on the closed surface, cut out the observed one, split in time.

    ``train`` holds the first ``train_timestamps`` snapshots; ``test`` starts
    at the last training snapshot and runs to the end; ``new`` is a fresh
    trajectory (sources seeded by ``new_seed``) on the same surface.
    """
    spec = merge_spec(spec)
    T = int(spec["timestamps"])
    n_train = int(spec["train_timestamps"])
    if T < 3 or not 2 <= n_train < T:
        raise InvalidSpecError("need timestamps >= 3 and 2 <= train_timestamps < timestamps")
    if spec["kind"] not in ("dirichlet", "neumann"):
        raise InvalidSpecError(f"unknown dataset kind {spec['kind']!r}")
    closed, observed = build_surface(spec["surface"])
    seed = int(spec["sources"]["seed"])
    full = _dataset(spec, closed, observed, seed, int(spec.get("noise_seed", 0)))
    new = None
    if spec.get("new_seed") is not None:
        new_seed = int(spec["new_seed"])
        new = _dataset(spec, closed, observed, new_seed, int(spec.get("noise_seed", 0)) + 1)
    return GeneratedData(spec, closed, observed, full, full.slice(0, n_train), full.slice(n_train - 1), new)


def field_rms(d: BVPDataset) -> float:
    return float(np.sqrt(np.mean(d.interior_obs ** 2)))


@dataclass
class RunResult:
    model: ModelParams
    report: EvalReport
    initial_loss: float  # mean segment MSE before training
    final_loss: float
    seconds: float


def run_model(data: GeneratedData, *, teacher_forced: bool, seed: int, cfg: TrainConfig | None = None,
              **model_kw) -> RunResult:
    """Train one model on ``data.train`` and evaluate it on train/test/new.

    Teacher-forced and vanilla runs with the same ``seed`` share the
    initial parameters, the segment sequence and the field scale.
    """
    cfg = replace(cfg or TrainConfig(), seed=seed)
    d = data.train
    model = init_model(message_kind=d.kind, teacher_forced=teacher_forced, seed=seed,
                       scale=data_scale(d), **model_kw)
    solver = cfg.train_solver(d)
    tic = time.perf_counter()
    before = mean_segment_loss(model, d, cfg.segment_length, solver)
    result = train(model, d, cfg)
    after = mean_segment_loss(result.model, d, cfg.segment_length, solver)
    report = evaluate(result.model, {"train": data.train, "test": data.test, "new": data.new})
    return RunResult(result.model, report, before, after, time.perf_counter() - tic)
