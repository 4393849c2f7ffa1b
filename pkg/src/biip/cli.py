"""Command-line entry point: ``biip generate | train | eval | export-plot``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dynamics import BVPDataset, StabilityError, dataset_from_json, dataset_to_json
from .experiments import generate, merge_spec
from .mpnn import checkpoint_dict, checkpoint_from_dict, init_model
from .odeint import DivergenceError, SolverConfig
from .surfaces import InvalidSpecError, TopologyError, graph_to_json
from .trainer import (
    TrainConfig,
    TrainingDivergence,
    data_scale,
    evaluate,
    rollout_full,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
MODEL_KEYS = ("hidden_dim", "num_layers", "aggregation", "boundary_lift", "scale")
SEED_ENV = "BIIP_SEED"

log = logging.getLogger("biip")


class ConfigError(ValueError):
    pass


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError:
        raise  # I/O error, exit 4
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    """Collects written artifacts and timings for the run manifest."""

    def __init__(self, command: str, out_dir: Path, config: dict, seeds: dict, inputs: dict):
        self.command = command
        self.out_dir = out_dir
        self.config = config
        self.seeds = seeds
        self.inputs = {k: str(v) for k, v in inputs.items() if v is not None}
        self.artifacts: dict[str, dict] = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def write(self, name: str, path: Path, data: bytes, deterministic: bool = True) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.artifacts[name] = {"path": str(path), "sha256": _sha256(data), "deterministic": deterministic}

    def record(self, name: str, path: Path, deterministic: bool = True) -> None:
        self.artifacts[name] = {"path": str(path), "sha256": _sha256(path.read_bytes()),
                                "deterministic": deterministic}

    def finish(self, path: Path) -> None:
        self.timings["total_s"] = time.perf_counter() - self._t0
        manifest = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "timings": self.timings,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(_dump(manifest))


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    spec = _read_json(args.spec)
    if not isinstance(spec, dict):
        raise ConfigError("spec must be a JSON object")
    spec = merge_spec(spec)
    seed = _env_seed()
    if seed is not None:
        spec["sources"]["seed"] = seed
        spec["new_seed"] = seed + 1000
        spec["noise_seed"] = seed
    data = generate(spec)
    out = Path(args.out)
    run = Run("generate", out, spec, {"sources": spec["sources"]["seed"], "new": spec.get("new_seed"),
                                      "noise": spec.get("noise_seed")}, {"spec": args.spec})
    run.write("graph", out / "graph.json", _dump(graph_to_json(data.observed)))
    for name in ("train", "test", "new"):
        d = getattr(data, name)
        if d is not None:
            run.write(name, out / f"{name}.json", _dump(dataset_to_json(d)))
    run.finish(out / "manifest.json")
    print(f"wrote {len(run.artifacts)} artifacts to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_dataset(path) -> BVPDataset:
    return dataset_from_json(_read_json(path))


def _split_config(cfg: dict) -> tuple[dict, TrainConfig]:
    train_keys = {f.name for f in fields(TrainConfig)} - {"solver"}
    unknown = set(cfg) - train_keys - set(MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = {k: cfg[k] for k in MODEL_KEYS if k in cfg}
    try:
        tcfg = TrainConfig(**{k: v for k, v in cfg.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from None
    return model, tcfg


def cmd_train(args) -> int:
    d = _load_dataset(args.data)
    raw = _read_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    seed = _env_seed()
    if seed is not None:
        raw["seed"] = seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    model_cfg, tcfg = _split_config(raw)
    val = _load_dataset(args.val) if args.val else None
    scale = model_cfg.pop("scale", "rms")
    if scale == "rms":
        scale = data_scale(d)
    teacher_forced = not args.vanilla
    if not teacher_forced and d.kind != "dirichlet":
        raise ConfigError("the vanilla ablation needs dirichlet data")
    try:
        model = init_model(message_kind=d.kind, teacher_forced=teacher_forced, scale=float(scale),
                           seed=tcfg.seed, **model_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {**raw, "scale": float(scale), "vanilla": not teacher_forced}
    run = Run("train", out, config, {"train": tcfg.seed, "init": tcfg.seed},
              {"data": args.data, "config": args.config, "val": args.val})
    log_path = out / "train_log.ndjson"
    with open(log_path, "w") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec) + "\n")

        tic = time.perf_counter()
        result = train(model, d, tcfg, val=val, on_epoch=on_epoch)
        run.timings["train_s"] = time.perf_counter() - tic
    run.record("train_log", log_path, deterministic=False)
    run.write("checkpoint", out / "checkpoint.json", _dump(checkpoint_dict(result.model)))
    run.finish(out / "manifest.json")
    last = result.history[-1]["train_mse"] if result.history else float("nan")
    print(f"trained {tcfg.epochs} epochs; last segment mse {last:.6g}; "
          f"{result.model.num_parameters()} parameters")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval and export


def _solver(args, d: BVPDataset) -> SolverConfig:
    if args.solver == "dopri5":
        return SolverConfig(method="dopri5", rtol=args.rtol, atol=args.atol)
    step = args.step if args.step else float(np.min(np.diff(d.timestamps)))
    return SolverConfig(method=args.solver, fixed_step=step)


def _load_model(path):
    try:
        return checkpoint_from_dict(_read_json(path))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed checkpoint ({exc})") from None


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    datasets = {name: _load_dataset(p) for name, p in
                (("train", args.train), ("test", args.test), ("new", args.new)) if p}
    for name, d in datasets.items():
        if model.teacher_forced and model.message_kind != d.kind:
            raise ConfigError(f"checkpoint expects {model.message_kind} data, {name} is {d.kind}")
    solver = _solver(args, datasets["train"])
    report = evaluate(model, datasets, solver)
    out = Path(args.out)
    data = _dump(report.to_json())
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    run = Run("eval", out.parent, {"solver": solver.__dict__}, {}, {"ckpt": args.ckpt, **{
        k: getattr(args, k) for k in ("train", "test", "new")}})
    run.artifacts["report"] = {"path": str(out), "sha256": _sha256(data), "deterministic": True}
    run.timings["eval_s"] = report.wall_clock_s
    run.finish(out.with_name(out.stem + ".manifest.json"))
    print(json.dumps(report.rmse))
    return EXIT_OK


def _parse_nodes(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"node list must be comma-separated integers, got {text!r}") from None


def cmd_export_plot(args) -> int:
    model = _load_model(args.ckpt)
    d = _load_dataset(args.data)
    nodes = _parse_nodes(args.nodes)
    mg = d.messages()
    bad = [v for v in nodes if not 0 <= v < mg.size]
    if bad:
        raise ConfigError(f"unknown node id(s) {bad}; valid ids are 0..{mg.size - 1}")
    if model.teacher_forced and model.message_kind != d.kind:
        raise ConfigError(f"checkpoint expects {model.message_kind} data, dataset is {d.kind}")
    pred = rollout_full(model, d, _solver(args, d))
    observed = np.full((d.num_times, mg.size), np.nan)
    observed[:, d.interior_index] = d.interior_obs
    if d.kind == "dirichlet":
        observed[:, d.boundary_index] = d.boundary_obs
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "observed", "predicted"])
        for v in nodes:
            for i, t in enumerate(d.timestamps):
                w.writerow([repr(float(t)), v, repr(float(observed[i, v])), repr(float(pred[i, v]))])
    print(f"wrote {len(nodes) * d.num_times} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biip", description="Learn diffusion operators on graphs with boundary.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a surface and simulate train/test/new datasets")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a message-passing field to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--vanilla", action="store_true", help="treat boundary nodes as ordinary nodes")
    t.add_argument("--epochs", type=int)
    t.add_argument("--val", help="dataset rolled out for validation RMSE in the log")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def solver_flags(q):
        q.add_argument("--solver", default="dopri5", choices=("dopri5", "rk4_fixed", "euler_fixed"))
        q.add_argument("--step", type=float, help="fixed step (default: data spacing)")
        q.add_argument("--rtol", type=float, default=1e-6)
        q.add_argument("--atol", type=float, default=1e-8)

    e = sub.add_parser("eval", help="RMSE of free rollouts on train/test/new datasets")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--train", required=True)
    e.add_argument("--test")
    e.add_argument("--new")
    e.add_argument("--out", required=True)
    solver_flags(e)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-plot", help="per-node observed vs predicted curves as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--nodes", required=True)
    x.add_argument("--out", required=True)
    solver_flags(x)
    x.set_defaults(func=cmd_export_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DivergenceError, TrainingDivergence) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, InvalidSpecError, TopologyError, StabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
