"""Message-passing vector field over the interior of a graph with boundary.

The teacher-forced operator feeds the true (interpolated) boundary data into
every layer. Deeper layers see it lifted into their hidden space as the
encoding of a constant field at the boundary value. The vanilla operator
treats boundary items as ordinary nodes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dynamics import BVPDataset, MessageGraph

DTYPE = torch.float64
ACTIVATIONS = ("softplus", "identity")
AGGREGATIONS = ("mean", "maxpool", "sum")
BOUNDARY_LIFTS = ("uniform", "broadcast")
CHECKPOINT_FORMAT = "biip-checkpoint"
CHECKPOINT_VERSION = 1


class InterpolationError(ValueError):
    pass


@dataclass
class MPLayerParams:
    self_weight: torch.Tensor  # (out, in)
    neighbor_weight: torch.Tensor  # (out, in)
    bias: torch.Tensor  # (out,)
    activation: str = "softplus"

    @property
    def in_dim(self) -> int:
        return self.self_weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.self_weight.shape[0]

    def tensors(self) -> list[torch.Tensor]:
        return [self.self_weight, self.neighbor_weight, self.bias]


@dataclass
class ModelParams:
    layers: list[MPLayerParams]
    message_kind: str = "dirichlet"
    aggregation: str = "mean"
    teacher_forced: bool = True
    scale: float = 1.0  # fixed field scale: D(f) = scale * net(f / scale)
    seed: int | None = None
    boundary_lift: str = "uniform"

    def __post_init__(self):
        if self.message_kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown message kind {self.message_kind!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.boundary_lift not in BOUNDARY_LIFTS:
            raise ValueError(f"unknown boundary lift {self.boundary_lift!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError("layer dimensions do not chain")
        if self.layers and self.layers[0].in_dim != self.layers[-1].out_dim:
            raise ValueError("output dimension must equal the feature dimension")

    @property
    def feature_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].out_dim if len(self.layers) > 1 else self.feature_dim

    def parameters(self) -> list[torch.Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def detached(self) -> "ModelParams":
        layers = [MPLayerParams(*(t.detach().clone() for t in layer.tensors()), layer.activation)
                  for layer in self.layers]
        return ModelParams(layers, self.message_kind, self.aggregation, self.teacher_forced,
                           self.scale, self.seed, self.boundary_lift)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.detach().numpy().ravel() for p in self.parameters()])


def init_model(
    *,
    feature_dim: int = 1,
    hidden_dim: int = 64,
    num_layers: int = 5,
    message_kind: str = "dirichlet",
    aggregation: str = "mean",
    teacher_forced: bool = True,
    scale: float = 1.0,
    seed: int = 0,
    boundary_lift: str = "uniform",
) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) initialisation; softplus everywhere but the last layer."""
    if num_layers < 1:
        raise ValueError("need at least one layer")
    gen = torch.Generator().manual_seed(int(seed))
    dims = [feature_dim] + [hidden_dim] * (num_layers - 1) + [feature_dim]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / math.sqrt(d_in)

        def u(*shape):
            return (torch.rand(*shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound

        act = "identity" if i == num_layers - 1 else "softplus"
        layers.append(MPLayerParams(u(d_out, d_in), u(d_out, d_in), u(d_out), act))
    return ModelParams(layers, message_kind, aggregation, teacher_forced, float(scale), int(seed), boundary_lift)


def message(kind: str, x_u, x_v):
    """Message from ``v`` to ``u``: ``x_v`` (dirichlet) or ``x_v - x_u`` (neumann)."""
    if x_u.shape != x_v.shape:
        raise ValueError(f"message endpoints differ in shape: {tuple(x_u.shape)} vs {tuple(x_v.shape)}")
    if kind == "dirichlet":
        return x_v
    if kind == "neumann":
        return x_v - x_u
    raise ValueError(f"unknown message kind {kind!r}")


def activate(name: str, x: torch.Tensor) -> torch.Tensor:
    if name == "softplus":
        return F.softplus(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MPGraph:
    """Index tensors for message passing on ``n`` active nodes.

    ``src -> dst`` are directed active edges; ``bnd_dst`` receives the
    boundary message stored in slot ``bnd_slot`` of the boundary tensor.
    ``items`` maps active positions to item ids of the underlying graph.
    The ``*_adj``/``*_bnd`` properties hold the same incidences as dense
    matrices for the sum and mean aggregations (graphs here have at most a
    few hundred items, where dense products beat sparse ones under autograd).
    """

    n: int
    src: torch.Tensor
    dst: torch.Tensor
    bnd_dst: torch.Tensor
    bnd_slot: torch.Tensor
    deg: torch.Tensor
    items: tuple[int, ...] = field(default=())
    n_slots: int = 0

    @classmethod
    def build(cls, n: int, pairs: Sequence[tuple[int, int]], boundary_pairs=(), items=(), n_slots: int = 0):
        pairs = list(pairs)
        src = [a for a, b in pairs] + [b for a, b in pairs]
        dst = [b for a, b in pairs] + [a for a, b in pairs]
        bp = list(boundary_pairs)
        deg = torch.zeros(n, dtype=DTYPE)
        for d in dst:
            deg[d] += 1
        for d, _ in bp:
            deg[d] += 1
        long = lambda x: torch.tensor(x, dtype=torch.long)  # noqa: E731
        n_slots = max(n_slots, 1 + max((s for _, s in bp), default=-1))
        return cls(n, long(src), long(dst), long([d for d, _ in bp]), long([s for _, s in bp]),
                   deg, tuple(items), n_slots)

    @classmethod
    def interior(cls, mg: MessageGraph) -> "MPGraph":
        local = {v: i for i, v in enumerate(mg.interior)}
        pairs = [(local[a], local[b]) for a, b in mg.pairs if a in local and b in local]
        bpairs = [(local[u], s) for u, s in mg.boundary_pairs]
        return cls.build(len(local), pairs, bpairs, mg.interior, mg.num_slots)

    @classmethod
    def full(cls, mg: MessageGraph) -> "MPGraph":
        return cls.build(mg.size, mg.pairs, (), range(mg.size))

    @property
    def has_boundary(self) -> bool:
        return self.bnd_dst.numel() > 0

    def _sparse(self, rows, cols, ncols, mean):
        w = torch.ones(rows.numel(), dtype=DTYPE)
        if mean:
            w = w / self.deg.clamp(min=1)[rows]
        out = torch.zeros(self.n, ncols, dtype=DTYPE)
        return out.index_put_((rows, cols), w, accumulate=True)

    @cached_property
    def mean_adj(self):
        return self._sparse(self.dst, self.src, self.n, True)

    @cached_property
    def sum_adj(self):
        return self._sparse(self.dst, self.src, self.n, False)

    @cached_property
    def mean_bnd(self):
        return self._sparse(self.bnd_dst, self.bnd_slot, self.n_slots, True)

    @cached_property
    def sum_bnd(self):
        return self._sparse(self.bnd_dst, self.bnd_slot, self.n_slots, False)

    @cached_property
    def slot_dst(self) -> torch.Tensor:
        """Active node attached to each boundary slot."""
        out = torch.zeros(self.n_slots, dtype=torch.long)
        return out.index_put_((self.bnd_slot,), self.bnd_dst)

    @cached_property
    def neighbor_weight_total(self) -> torch.Tensor:
        """Row sums of the mean/sum operators over active neighbours, shape (n, 1)."""
        cnt = torch.zeros(self.n, dtype=DTYPE).index_add(0, self.dst, torch.ones(self.dst.numel(), dtype=DTYPE))
        return cnt.unsqueeze(1)


def _tile(msg: torch.Tensor, dim: int) -> torch.Tensor:
    # boundary messages live in feature space; repeat them across hidden channels
    d = msg.shape[1]
    if d == dim:
        return msg
    reps = -(-dim // d)
    return msg.repeat(1, reps)[:, :dim]


def _aggregate(agg: str, msgs: torch.Tensor, dst: torch.Tensor, n: int, deg: torch.Tensor) -> torch.Tensor:
    out = torch.zeros(n, msgs.shape[1], dtype=msgs.dtype)
    if msgs.shape[0] == 0:
        return out
    idx = dst.unsqueeze(1).expand_as(msgs)
    if agg == "maxpool":
        # empty neighbourhoods keep the zero aggregate
        return out.scatter_reduce(0, idx, msgs, reduce="amax", include_self=False)
    out = out.index_add(0, dst, msgs)
    if agg == "mean":
        out = out / deg.clamp(min=1).unsqueeze(1)
    return out


def layer_forward(
    p: MPLayerParams,
    x: torch.Tensor,
    g: MPGraph,
    agg: str,
    kind: str,
    boundary_msgs: torch.Tensor | None = None,
) -> torch.Tensor:
    """One message-passing layer ``act(A x_u + B agg(messages) + bias)``."""
    if x.shape[0] != g.n:
        raise ValueError(f"encodings cover {x.shape[0]} nodes, graph has {g.n}")
    if g.has_boundary and boundary_msgs is None:
        raise ValueError("graph has half edges but no boundary messages were given")
    if agg == "maxpool":
        msgs = message(kind, x[g.dst], x[g.src])
        dst = g.dst
        if g.has_boundary:
            msgs = torch.cat([msgs, _tile(boundary_msgs[g.bnd_slot], x.shape[1])])
            dst = torch.cat([g.dst, g.bnd_dst])
        a = _aggregate(agg, msgs, dst, g.n, g.deg)
    else:
        # linear aggregations as sparse products; same result as _aggregate
        mean = agg == "mean"
        adj = g.mean_adj if mean else g.sum_adj
        a = adj @ x
        if kind == "neumann":
            w = g.neighbor_weight_total
            a = a - x * (w / g.deg.clamp(min=1).unsqueeze(1) if mean else w)
        if g.has_boundary:
            bnd = g.mean_bnd if mean else g.sum_bnd
            b = bnd @ boundary_msgs
            # a single feature channel broadcasts over the hidden channels
            a = a + (b if b.shape[1] in (1, x.shape[1]) else _tile(b, x.shape[1]))
    return activate(p.activation, torch.addmm(p.bias, x, p.self_weight.T) + a @ p.neighbor_weight.T)


def boundary_messages(kind: str, x0: torch.Tensor, boundary: torch.Tensor, g: MPGraph) -> torch.Tensor:
    """First-layer messages from true boundary data, one per boundary slot.

    Dirichlet slots hold boundary values (the message is the value itself).
    Neumann slots hold half-edge fluxes ``f(v) - f(u)``, which already are
    the first-layer message ``x_v - x_u``.
    """
    if boundary.dim() == 1:
        boundary = boundary.unsqueeze(1)
    if g.has_boundary and boundary.shape[0] != g.n_slots:
        raise ValueError(f"boundary snapshot has {boundary.shape[0]} values, the graph has {g.n_slots} slots")
    return boundary


def _lift(p: MPLayerParams, e: torch.Tensor) -> torch.Tensor:
    # the layer applied to a node whose neighbourhood is uniformly e
    return activate(p.activation, torch.addmm(p.bias, e, (p.self_weight + p.neighbor_weight).T))


def forward_teacher_forced(m: ModelParams, interior_field: torch.Tensor, boundary: torch.Tensor,
                           g: MPGraph) -> torch.Tensor:
    """Learned rate on the interior nodes, given the true boundary snapshot.

    Every layer receives the first-layer boundary messages. With the
    ``uniform`` lift they are carried into each layer's hidden space by the
    preceding layers evaluated on a locally constant field, so a Dirichlet
    value ``b`` arrives as the encoding a node at constant ``b`` would have.
    Neumann fluxes arrive as the difference of the lifted endpoint values.
    ``broadcast`` repeats the raw message over the hidden channels instead.
    """
    squeeze = interior_field.dim() == 1
    x = interior_field.unsqueeze(1) if squeeze else interior_field
    x = x / m.scale
    b = boundary_messages(m.message_kind, x, boundary / m.scale, g)
    if m.boundary_lift == "broadcast" or not g.has_boundary:
        for layer in m.layers:
            x = layer_forward(layer, x, g, m.aggregation, m.message_kind, b)
    elif m.message_kind == "dirichlet":
        for layer in m.layers:
            x, b = layer_forward(layer, x, g, m.aggregation, m.message_kind, b), _lift(layer, b)
    else:
        lo = x[g.slot_dst]
        hi = lo + b
        for layer in m.layers:
            x = layer_forward(layer, x, g, m.aggregation, m.message_kind, hi - lo)
            lo, hi = _lift(layer, lo), _lift(layer, hi)
    x = x * m.scale
    return x.squeeze(1) if squeeze else x


def forward_vanilla(m: ModelParams, full_field: torch.Tensor, g: MPGraph) -> torch.Tensor:
    """Learned rate on every node; boundary nodes are ordinary nodes."""
    if g.has_boundary:
        raise ValueError("vanilla message passing expects a graph without half edges")
    squeeze = full_field.dim() == 1
    x = full_field.unsqueeze(1) if squeeze else full_field
    x = x / m.scale
    for layer in m.layers:
        x = layer_forward(layer, x, g, m.aggregation, m.message_kind)
    x = x * m.scale
    return x.squeeze(1) if squeeze else x


class BoundarySeries:
    """Piecewise-linear interpolation of boundary observations in time."""

    def __init__(self, timestamps, values, clamp: bool = False):
        self.t = torch.as_tensor(np.asarray(timestamps, dtype=float), dtype=DTYPE)
        self.v = torch.as_tensor(np.asarray(values, dtype=float), dtype=DTYPE)
        self.clamp = clamp
        self._t_list = self.t.tolist()

    def __call__(self, t: float) -> torch.Tensor:
        t = float(t)
        ts = self._t_list
        lo, hi = ts[0], ts[-1]
        tol = 1e-12 * max(1.0, abs(hi))
        if t < lo - tol or t > hi + tol:
            if not self.clamp:
                raise InterpolationError(f"time {t} outside the observed range [{lo}, {hi}]")
        if t <= lo:
            return self.v[0]
        if t >= hi:
            return self.v[-1]
        i = int(np.searchsorted(ts, t, side="right")) - 1
        t0, t1 = ts[i], ts[i + 1]
        if t == t0:
            return self.v[i]
        w = (t - t0) / (t1 - t0)
        return self.v[i] + w * (self.v[i + 1] - self.v[i])


def interpolate_boundary(d: BVPDataset, t: float, clamp: bool = False) -> np.ndarray:
    return BoundarySeries(d.timestamps, d.boundary_obs, clamp)(t).numpy()


class VectorField:
    """``dy/dt = D(t, y)`` on the state a model evolves for one dataset.

    The teacher-forced state is the interior field; the vanilla state is
    the field on every item.
    """

    def __init__(self, model: ModelParams, d: BVPDataset):
        self.model = model
        self.mg = d.messages()
        if model.teacher_forced:
            if model.message_kind != d.kind:
                raise ValueError(f"model expects {model.message_kind} data, dataset is {d.kind}")
            self.graph = MPGraph.interior(self.mg)
            self.series = BoundarySeries(d.timestamps, d.boundary_obs)
        else:
            if d.kind != "dirichlet":
                raise ValueError("the vanilla model needs full-graph (dirichlet) observations")
            self.graph = MPGraph.full(self.mg)
            self.series = None
        self.state_index = np.asarray(self.graph.items, dtype=np.int64)
        pos = {v: i for i, v in enumerate(self.graph.items)}
        self.loss_index = torch.tensor([pos[v] for v in self.mg.interior], dtype=torch.long)

    def __call__(self, t: float, y: torch.Tensor) -> torch.Tensor:
        if self.model.teacher_forced:
            return forward_teacher_forced(self.model, y, self.series(t), self.graph)
        return forward_vanilla(self.model, y, self.graph)

    def initial_state(self, d: BVPDataset, i: int) -> torch.Tensor:
        if self.model.teacher_forced:
            vals = d.interior_obs[i]
        else:
            vals = d.full_values[i]
        return torch.as_tensor(vals, dtype=DTYPE).clone()


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(m: ModelParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "message_kind": m.message_kind,
        "aggregation": m.aggregation,
        "teacher_forced": m.teacher_forced,
        "scale": m.scale,
        "seed": m.seed,
        "boundary_lift": m.boundary_lift,
        "feature_dim": m.feature_dim,
        "hidden_dim": m.hidden_dim,
        "num_parameters": m.num_parameters(),
        "layers": [
            {
                "in_dim": layer.in_dim,
                "out_dim": layer.out_dim,
                "activation": layer.activation,
                "self_weight": layer.self_weight.detach().reshape(-1).tolist(),
                "neighbor_weight": layer.neighbor_weight.detach().reshape(-1).tolist(),
                "bias": layer.bias.detach().tolist(),
            }
            for layer in m.layers
        ],
    }


def checkpoint_from_dict(obj: dict) -> ModelParams:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    layers = []
    for spec in obj["layers"]:
        shape = (spec["out_dim"], spec["in_dim"])
        t = lambda key, s: torch.tensor(spec[key], dtype=DTYPE).reshape(s)  # noqa: E731
        layers.append(MPLayerParams(t("self_weight", shape), t("neighbor_weight", shape),
                                    t("bias", (spec["out_dim"],)), spec["activation"]))
    return ModelParams(layers, obj["message_kind"], obj["aggregation"], bool(obj["teacher_forced"]),
                       float(obj["scale"]), obj.get("seed"), obj.get("boundary_lift", "uniform"))


def save_checkpoint(m: ModelParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(m), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path) as fh:
        return checkpoint_from_dict(json.load(fh))
