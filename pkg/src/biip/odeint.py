"""Explicit ODE integrators for method-of-lines fields.

Fixed-step RK4 is differentiated by unrolling it under torch autograd
(discretize-then-optimize). Dormand-Prince 5(4) is used for inference.
States are torch tensors; fields are callables ``field(t, y)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

Field = Callable[[float, torch.Tensor], torch.Tensor]
METHODS = ("rk4_fixed", "dopri5", "euler_fixed")


class DivergenceError(RuntimeError):
    """The integrator exceeded its step budget, underflowed or went non-finite."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    fixed_step: float = 0.0125
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 100_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not (self.fixed_step > 0 and self.rtol > 0 and self.atol > 0):
            raise ValueError("step size and tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class SolverStats:
    steps: int = 0
    rejected: int = 0
    nfev: int = 0
    step_sizes: list[float] = field(default_factory=list)


def _fixed_grid(t0: float, t1: float, h: float, max_steps: int) -> tuple[int, float]:
    n = max(1, math.ceil((t1 - t0) / h - 1e-9))
    if n > max_steps:
        raise DivergenceError(f"{n} fixed steps requested, max_steps is {max_steps}")
    return n, (t1 - t0) / n


def _euler(f: Field, y, t0, t1, cfg, stats):
    n, h = _fixed_grid(t0, t1, cfg.fixed_step, cfg.max_steps)
    for i in range(n):
        t = t0 + i * h
        y = y + h * f(t, y)
    stats.steps += n
    stats.nfev += n
    return y


def _rk4(f: Field, y, t0, t1, cfg, stats):
    n, h = _fixed_grid(t0, t1, cfg.fixed_step, cfg.max_steps)
    for i in range(n):
        t = t0 + i * h
        k1 = f(t, y)
        k2 = f(t + h / 2, y + (h / 2) * k1)
        k3 = f(t + h / 2, y + (h / 2) * k2)
        k4 = f(t + h, y + h * k3)
        y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    stats.steps += n
    stats.nfev += 4 * n
    return y


# Dormand & Prince (1980) coefficients
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

_SAFETY, _FAC_MIN, _FAC_MAX = 0.9, 0.2, 10.0
_BETA = 0.04  # PI stabilisation
_EXPO = 0.2 - 0.75 * _BETA


def _err_norm(err, y0, y1, cfg) -> float:
    scale = cfg.atol + cfg.rtol * torch.maximum(y0.abs(), y1.abs())
    return float((err.abs() / scale).max()) if err.numel() else 0.0


def _initial_step(f, t0, y0, f0, cfg, span) -> float:
    # Hairer, Norsett & Wanner, Solving ODEs I, II.4
    scale = cfg.atol + cfg.rtol * y0.abs()
    d0 = float((y0 / scale).pow(2).mean().sqrt()) if y0.numel() else 0.0
    d1 = float((f0 / scale).pow(2).mean().sqrt()) if y0.numel() else 0.0
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(t0 + h0, y0 + h0 * f0)
    d2 = float(((f1 - f0) / scale).pow(2).mean().sqrt()) / h0 if y0.numel() else 0.0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def _dopri5(f: Field, y, t0, t1, cfg, stats, h=None):
    span = t1 - t0
    t = t0
    k1 = f(t, y)
    stats.nfev += 1
    if h is None:
        h = _initial_step(f, t0, y, k1, cfg, span)
        stats.nfev += 1
    err_prev = 1e-4
    attempts = 0
    while t < t1:
        if attempts >= cfg.max_steps:
            raise DivergenceError(f"dopri5 exceeded max_steps={cfg.max_steps}")
        attempts += 1
        h = min(h, t1 - t)
        if h <= 1e-14 * max(1.0, abs(t)):
            raise DivergenceError(f"dopri5 step size underflow at t={t}")
        ks = [k1]
        for i in range(1, 7):
            yi = y
            for a, k in zip(_A[i], ks):
                if a:
                    yi = yi + (h * a) * k
            ks.append(f(t + _C[i] * h, yi))
        stats.nfev += 6
        y_new = yi  # stage 7 evaluates at the 5th-order solution (FSAL)
        err = sum((h * e) * k for e, k in zip(_E, ks) if e)
        en = _err_norm(err, y, y_new, cfg)
        if not math.isfinite(en):
            raise DivergenceError(f"non-finite error estimate at t={t}")
        if en <= 1.0:
            t = t1 if t1 - (t + h) <= 1e-14 * max(1.0, abs(t1)) else t + h
            y = y_new
            k1 = ks[6]
            stats.steps += 1
            stats.step_sizes.append(h)
            fac = _SAFETY * max(en, 1e-10) ** -_EXPO * err_prev ** _BETA
            fac = min(_FAC_MAX, max(_FAC_MIN, fac))
            err_prev = max(en, 1e-4)
        else:
            stats.rejected += 1
            fac = max(_FAC_MIN, _SAFETY * en ** -0.2)
        h = h * fac
    return y, h


def solve(field: Field, y0: torch.Tensor, t0: float, t1: float, cfg: SolverConfig):
    """Integrate from ``t0`` to ``t1``; returns ``(state, stats)``."""
    t0, t1 = float(t0), float(t1)
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    stats = SolverStats()
    if cfg.method == "rk4_fixed":
        y = _rk4(field, y0, t0, t1, cfg, stats)
    elif cfg.method == "euler_fixed":
        y = _euler(field, y0, t0, t1, cfg, stats)
    else:
        y, _ = _dopri5(field, y0, t0, t1, cfg, stats)
    if not torch.isfinite(y).all():
        raise DivergenceError("integration produced non-finite values")
    return y, stats


def integrate(field: Field, y0: torch.Tensor, t0: float, t1: float, cfg: SolverConfig) -> torch.Tensor:
    return solve(field, y0, t0, t1, cfg)[0]


def integrate_path(field: Field, y0: torch.Tensor, ts: Sequence[float], cfg: SolverConfig,
                   stats: SolverStats | None = None) -> torch.Tensor:
    """States at every time in ``ts`` (the first row is ``y0``)."""
    ts = [float(t) for t in ts]
    out = [y0]
    y = y0
    h = None
    st = stats if stats is not None else SolverStats()
    for a, b in zip(ts, ts[1:]):
        if cfg.method == "dopri5":
            y, h = _dopri5(field, y, a, b, cfg, st, h)
        elif cfg.method == "rk4_fixed":
            y = _rk4(field, y, a, b, cfg, st)
        else:
            y = _euler(field, y, a, b, cfg, st)
        if not torch.isfinite(y).all():
            raise DivergenceError(f"integration produced non-finite values before t={b}")
        out.append(y)
    return torch.stack(out)


def integrate_with_gradient(
    field: Field,
    params: Sequence[torch.Tensor],
    y0: torch.Tensor,
    t0: float,
    t1: float,
    cfg: SolverConfig,
    cotangent,
):
    """Fixed-step RK4 solve with reverse-mode gradients.

    ``cotangent`` is either a tensor shaped like the state (the vector in the
    vector-Jacobian product) or a callable mapping the final state to a
    scalar loss. Returns ``(state, parameter gradients, y0 gradient)``, plus
    the loss value as a fourth element when a callable is given.
    """
    if cfg.method != "rk4_fixed":
        raise ValueError("gradients are only supported through rk4_fixed")
    params = list(params)
    y0 = y0.detach().clone().requires_grad_(True)
    for p in params:
        p.requires_grad_(True)
    with torch.enable_grad():
        y1, _ = solve(field, y0, t0, t1, cfg)
        if callable(cotangent):
            loss = cotangent(y1)
            grads = torch.autograd.grad(loss, params + [y0], allow_unused=True)
        else:
            loss = None
            grads = torch.autograd.grad(y1, params + [y0], grad_outputs=cotangent, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params + [y0])]
    out = (y1.detach(), grads[:-1], grads[-1])
    if loss is not None:
        return out + (float(loss.detach()),)
    return out


def order_check(field: Field, exact: Callable[[float], torch.Tensor], y0: torch.Tensor,
                t0: float, t1: float, method: str = "rk4_fixed", step: float = 0.1) -> float:
    """Observed order ``log2(err(h) / err(h/2))`` of a fixed-step method."""
    errs = []
    for h in (step, step / 2):
        y = integrate(field, y0, t0, t1, SolverConfig(method=method, fixed_step=h))
        errs.append(float((y - exact(t1)).abs().max()))
    return math.log2(errs[0] / errs[1])
