"""Neural-ODE deformation back-end.

A small MLP ``u(p, t)`` defines the flow ``dp/dt = u(p, t)``. The forward map
integrates it from t=0 to t=1 with fixed-step RK4; the inverse integrates the
reversed field ``w(p, t) = -u(p, 1 - t)`` with the same scheme. Training
backpropagates through the unrolled steps.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .connectivity import SkeletonTemplate
from .energy import EnergyBreakdown, EnergyConfig, EnergyLog, EnergyState, total_energy
from .explicit import DivergenceError, SolverReport
from .spatial import DistanceGrid, NearestIndex

Field = Callable[[torch.Tensor, float], torch.Tensor]


class VelocityNet(nn.Module):
    """``u(x, y, z, t)``: tanh MLP with a zero-initialized output layer, so ``u = 0`` at init."""

    def __init__(self, hidden: tuple[int, ...] = (64, 64, 64), seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        sizes = (4, *self.hidden, 3)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.layers = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:]))
        with torch.no_grad():
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    @property
    def layer_sizes(self) -> list[int]:
        return [4, *self.hidden, 3]

    def forward(self, p: torch.Tensor, t) -> torch.Tensor:
        if isinstance(t, torch.Tensor) and t.ndim == 2:
            t_col = t
        else:
            t_col = torch.full((p.shape[0], 1), float(t), dtype=p.dtype)
        h = torch.cat([p, t_col], dim=1)
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        return self.layers[-1](h)


def velocity(net: VelocityNet, p: np.ndarray, t: float) -> np.ndarray:
    """Evaluate ``u(p, t)`` for numpy points in the network's dtype."""
    dtype = next(net.parameters()).dtype
    pts = torch.as_tensor(np.asarray(p).reshape(-1, 3), dtype=dtype)
    with torch.no_grad():
        return net(pts, float(t)).numpy().astype(np.float64).reshape(np.shape(p))


@dataclass(frozen=True)
class IntegratorConfig:
    steps: int = 20

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("step count must be at least 1")


def _reversed(field: Field) -> Field:
    return lambda p, t: -field(p, 1.0 - t)


def _rk4_step(field: Field, p: torch.Tensor, t: float, h: float) -> torch.Tensor:
    k1 = field(p, t)
    k2 = field(p + 0.5 * h * k1, t + 0.5 * h)
    k3 = field(p + 0.5 * h * k2, t + 0.5 * h)
    k4 = field(p + h * k3, t + h)
    return p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_finite(p: torch.Tensor, where: str) -> None:
    if not bool(torch.isfinite(p).all()):
        raise DivergenceError(f"non-finite state during {where}")


def rk4(field: Field, p: torch.Tensor, steps: int) -> torch.Tensor:
    """Integrate ``dp/dt = field(p, t)`` over [0, 1] with ``steps`` RK4 steps."""
    h = 1.0 / steps
    for k in range(steps):
        p = _rk4_step(field, p, k * h, h)
        _check_finite(p, "integration")
    return p


def _float64_field(field: Field) -> Field:
    """Evaluate ``field`` in its own precision while the state stays float64."""
    if not isinstance(field, nn.Module):
        return field
    dtype = next(field.parameters()).dtype
    if dtype == torch.float64:
        return field
    return lambda p, t: field(p.to(dtype), t).to(torch.float64)


def _numpy_points(points) -> torch.Tensor:
    return torch.as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3))


def integrate_forward(net, points, cfg: IntegratorConfig = IntegratorConfig()):
    """``p(x, 1)``.

    A tensor input stays in the graph (differentiable); an array input is
    integrated with a float64 state and returned as a float64 array.
    """
    if isinstance(points, torch.Tensor):
        return rk4(net, points, cfg.steps)
    with torch.no_grad():
        return rk4(_float64_field(net), _numpy_points(points), cfg.steps).numpy()


def integrate_inverse(net, points, cfg: IntegratorConfig = IntegratorConfig()):
    """Integrate ``-u(p, 1 - t)`` over [0, 1]: the reversed-field inverse map."""
    if isinstance(points, torch.Tensor):
        return rk4(_reversed(net), points, cfg.steps)
    with torch.no_grad():
        return rk4(_reversed(_float64_field(net)), _numpy_points(points), cfg.steps).numpy()


def sample_trajectory(net, points, t_values, cfg: IntegratorConfig = IntegratorConfig()) -> list[np.ndarray]:
    """States ``p(x, t)`` at each requested time.

    The regular RK4 grid of ``cfg.steps`` steps is integrated once; a requested
    time between grid nodes is reached by one partial step branching off the
    last grid state, so samples at grid times coincide with the plain integrator.
    """
    ts = [float(t) for t in t_values]
    if any(t < 0.0 or t > 1.0 for t in ts):
        raise ValueError("trajectory times must lie in [0, 1]")
    if any(b < a for a, b in zip(ts[:-1], ts[1:])):
        raise ValueError("trajectory times must be sorted")
    p = _numpy_points(points)
    net = _float64_field(net)
    n = cfg.steps
    h = 1.0 / n
    out = []
    k = 0
    with torch.no_grad():
        state = p
        for t in ts:
            target_k = min(int(np.floor(t * n + 1e-12)), n)
            while k < target_k:
                state = _rk4_step(net, state, k * h, h)
                _check_finite(state, "trajectory sampling")
                k += 1
            rem = t - k * h
            s = _rk4_step(net, state, k * h, rem) if rem > 0 else state
            out.append(s.numpy().copy())
    return out


def bijection_error(net, points, cfg: IntegratorConfig = IntegratorConfig()) -> tuple[float, float]:
    """Max and mean of ``|p - D^-1(D(p))|`` over the points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    back = integrate_inverse(net, integrate_forward(net, p, cfg), cfg)
    eps = np.linalg.norm(back - p, axis=1)
    return float(eps.max()), float(eps.mean())


# ---------------------------------------------------------------- losses in torch

def grid_distance_torch(values: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup matching :func:`odeform.spatial.query_distance`, differentiable in ``p``."""
    r = values.shape[0]
    u = torch.clamp(torch.clamp(p, 0.0, 1.0) * r - 0.5, 0.0, r - 1.0)
    i0 = torch.clamp(torch.floor(u.detach()).long(), max=r - 2)
    f = u - i0.to(u.dtype)
    flat = values.reshape(-1)
    x, y, z = i0[:, 0], i0[:, 1], i0[:, 2]

    def c(dx, dy, dz):
        return flat[((x + dx) * r + (y + dy)) * r + (z + dz)]

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = c(0, 0, 0) + fx * (c(1, 0, 0) - c(0, 0, 0))
    c10 = c(0, 1, 0) + fx * (c(1, 1, 0) - c(0, 1, 0))
    c01 = c(0, 0, 1) + fx * (c(1, 0, 1) - c(0, 0, 1))
    c11 = c(0, 1, 1) + fx * (c(1, 1, 1) - c(0, 1, 1))
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    return c0 + fz * (c1 - c0)


def euler_matrices_torch(angles: torch.Tensor) -> torch.Tensor:
    a, b, c = angles[:, 0], angles[:, 1], angles[:, 2]
    ca, cb, cc = torch.cos(a), torch.cos(b), torch.cos(c)
    sa, sb, sc = torch.sin(a), torch.sin(b), torch.sin(c)
    rows = [
        torch.stack([cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa], -1),
        torch.stack([sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa], -1),
        torch.stack([-sb, cb * sa, cb * ca], -1),
    ]
    return torch.stack(rows, 1)


@dataclass
class FlowDirection:
    """One fitting direction: which nodes move, where they should land, and how the map is applied.

    ``inverse`` selects the reversed-field map, used for the B -> A direction of
    the two-way objective.
    """

    rest_nodes: np.ndarray
    edges: np.ndarray
    config: EnergyConfig
    grid: DistanceGrid | None = None
    target_nodes: np.ndarray | None = None
    inverse: bool = False

    @classmethod
    def from_skeleton(cls, skeleton: SkeletonTemplate, config: EnergyConfig, grid=None,
                      target_nodes=None, inverse=False) -> "FlowDirection":
        return cls(np.asarray(skeleton.nodes, dtype=np.float64), np.asarray(skeleton.edges),
                   config, grid, None if target_nodes is None else np.asarray(target_nodes, dtype=np.float64),
                   inverse)

    def deform(self, net, points, cfg: IntegratorConfig):
        return integrate_inverse(net, points, cfg) if self.inverse else integrate_forward(net, points, cfg)

    def state(self, net, angles: np.ndarray, cfg: IntegratorConfig) -> EnergyState:
        moved = self.deform(net, self.rest_nodes, cfg)
        return EnergyState(moved, self.rest_nodes, self.edges, angles, self.grid, self.target_nodes)


def _nn_matches(query: np.ndarray, points: np.ndarray) -> np.ndarray:
    return NearestIndex(points).query(query)[0]


def compute_matches(direction: FlowDirection, moved: np.ndarray) -> dict:
    """Nearest-neighbor correspondences for the point-based fitting terms at ``moved``."""
    cfg = direction.config
    out = {}
    tn = direction.target_nodes
    if cfg.part_aware:
        for lab in np.intersect1d(cfg.source_labels, cfg.target_labels):
            s = np.flatnonzero(cfg.source_labels == lab)
            t = np.flatnonzero(cfg.target_labels == lab)
            if cfg.uses_forward:
                out[("f", int(lab))] = (s, t[_nn_matches(moved[s], tn[t])])
            if cfg.uses_backward:
                out[("b", int(lab))] = (s[_nn_matches(tn[t], moved[s])], t)
    elif cfg.uses_backward:
        out["b"] = (_nn_matches(tn, moved), np.arange(len(tn)))
    return out


def joint_field(net: VelocityNet, n_forward: int, n_inverse: int) -> Field:
    """Field moving the first ``n_forward`` rows by ``u`` and the rest by the reversed field.

    Integrating this once is row-for-row the same computation as integrating
    the two point sets separately, with half the network calls.
    """
    dtype = next(net.parameters()).dtype
    inv = torch.cat([torch.zeros(n_forward, 1, dtype=dtype), torch.ones(n_inverse, 1, dtype=dtype)])
    sign = 1.0 - 2.0 * inv

    def field(p, t):
        tt = (1.0 - inv) * t + inv * (1.0 - t)
        return sign * net(p, tt)

    return field


def direction_loss(net: VelocityNet, angles: torch.Tensor, direction: FlowDirection,
                   integ: IntegratorConfig, matches: dict | None = None, tensors: dict | None = None,
                   moved: torch.Tensor | None = None):
    """Single-direction energy as a torch scalar plus its (E_Da, E_Db, E_R) parts.

    ``matches`` freezes the nearest-neighbor correspondences; by default they are
    recomputed from the current deformed nodes (a fresh index every call).
    ``moved`` supplies already integrated node positions.
    """
    dtype = next(net.parameters()).dtype
    tensors = tensors if tensors is not None else _direction_tensors(direction, dtype)
    rest = tensors["rest"]
    if moved is None:
        moved = direction.deform(net, rest, integ)
    cfg = direction.config
    if matches is None:
        matches = compute_matches(direction, moved.detach().numpy().astype(np.float64))
    zero = moved.new_zeros(())
    ef, eb = zero, zero
    if cfg.part_aware:
        for key, (s, t) in matches.items():
            diff = moved[torch.as_tensor(s)] - tensors["target"][torch.as_tensor(t)]
            term = torch.sum(diff * diff)
            if key[0] == "f":
                ef = ef + term
            else:
                eb = eb + term
    else:
        if cfg.uses_forward:
            d = grid_distance_torch(tensors["grid"], moved)
            ef = torch.sum(d * d)
        if cfg.uses_backward:
            s, t = matches["b"]
            diff = moved[torch.as_tensor(s)] - tensors["target"][torch.as_tensor(t)]
            eb = torch.sum(diff * diff)
    er = zero
    if len(direction.edges) and cfg.lam > 0:
        e = tensors["edges"]
        i, j = e[:, 0], e[:, 1]
        R = euler_matrices_torch(angles)[i]
        r = (moved[i] - moved[j]) - torch.einsum("eab,eb->ea", R, rest[i] - rest[j])
        er = torch.sum(r * r)
    loss = ef + eb + cfg.lam * er
    return loss, (float(ef.detach()), float(eb.detach()), float(er.detach()))


def _direction_tensors(direction: FlowDirection, dtype) -> dict:
    out = {
        "rest": torch.as_tensor(direction.rest_nodes, dtype=dtype),
        "edges": torch.as_tensor(np.sort(np.asarray(direction.edges, dtype=np.int64).reshape(-1, 2), axis=1)),
    }
    if direction.grid is not None:
        out["grid"] = torch.as_tensor(np.ascontiguousarray(direction.grid.values), dtype=dtype)
    if direction.target_nodes is not None:
        out["target"] = torch.as_tensor(direction.target_nodes, dtype=dtype)
    return out


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class FlowTrainConfig:
    lr: float = 1e-3
    iters: int = 1000
    lam: float = 0.1
    bidirectional: bool = False
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64, 64)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.iters < 0:
            raise ValueError("iteration count must be non-negative")


@dataclass
class FlowDeformation:
    net: VelocityNet
    angles: np.ndarray
    angles_inverse: np.ndarray | None = None


@dataclass
class FlowTrainLog:
    rows: list = field(default_factory=list)

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "E_Da", "E_Db", "E_R", "E_Da_inv", "E_Db_inv", "E_R_inv"])
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def _net64(net: VelocityNet) -> VelocityNet:
    return copy.deepcopy(net).double()


def evaluate_direction(net: VelocityNet, angles: np.ndarray, direction: FlowDirection,
                       integ: IntegratorConfig) -> EnergyBreakdown:
    """Float64 numpy evaluation of a direction's energy, independent of the torch loss."""
    return total_energy(direction.state(_net64(net), angles, integ), direction.config)


def _sum_breakdowns(parts: list[EnergyBreakdown], lam: float) -> EnergyBreakdown:
    return EnergyBreakdown(sum(p.fitting_forward for p in parts), sum(p.fitting_backward for p in parts),
                           sum(p.rigidity for p in parts), lam, sum(p.total for p in parts))


def optimize_flow(forward: FlowDirection, backward: FlowDirection | None = None,
                  train: FlowTrainConfig = FlowTrainConfig(),
                  integ: IntegratorConfig = IntegratorConfig(),
                  dtype: torch.dtype = torch.float32,
                  log_every: int = 1) -> tuple[FlowDeformation, SolverReport, FlowTrainLog]:
    """Train the velocity field with Adam; per-node Euler angles are optimized jointly.

    With ``backward`` given (and ``train.bidirectional``), the loss is the
    two-way energy: ``forward`` nodes move through the forward map and
    ``backward`` nodes through the reversed-field inverse. The parameters with
    the lowest observed loss are returned, so the final energy never exceeds
    the initial one.
    """
    t0 = time.perf_counter()
    directions = [forward]
    if train.bidirectional:
        if backward is None:
            raise ValueError("bidirectional training needs the inverse direction")
        directions.append(backward)
    net = VelocityNet(train.hidden, seed=train.seed, dtype=dtype)
    angles = [torch.zeros((len(d.rest_nodes), 3), dtype=dtype, requires_grad=True) for d in directions]
    tensors = [_direction_tensors(d, dtype) for d in directions]
    opt = torch.optim.Adam(list(net.parameters()) + angles, lr=train.lr)

    def snapshot():
        return ({k: v.detach().clone() for k, v in net.state_dict().items()},
                [a.detach().clone() for a in angles])

    sizes = [len(d.rest_nodes) for d in directions]
    if len(directions) == 2:
        both = torch.cat([tensors[0]["rest"], tensors[1]["rest"]])
        field_ = joint_field(net, *sizes)

    def loss_now():
        if len(directions) == 2:
            moved = torch.split(rk4(field_, both, integ.steps), sizes)
        else:
            moved = [None]
        total = 0.0
        parts = []
        for d, a, tt, mv in zip(directions, angles, tensors, moved):
            loss, p = direction_loss(net, a, d, integ, tensors=tt, moved=mv)
            total = total + loss
            parts.extend(p)
        return total, parts

    log = FlowTrainLog()
    best_val, best_state = np.inf, None
    for it in range(train.iters + 1):
        opt.zero_grad(set_to_none=True)
        loss, parts = loss_now()
        val = float(loss.detach())
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite flow loss at iteration {it}")
        if it % log_every == 0 or it == train.iters:
            log.rows.append([it, val, *parts, *([0.0] * (6 - len(parts)))])
        if val < best_val:
            best_val, best_state = val, snapshot()
        if it == train.iters:
            break
        loss.backward()
        opt.step()

    params, best_angles = best_state
    net.load_state_dict(params)
    ang_np = [a.numpy().astype(np.float64) for a in best_angles]

    zero_net = VelocityNet(train.hidden, seed=train.seed, dtype=dtype)
    zero_angles = [np.zeros_like(a) for a in ang_np]
    initial = _sum_breakdowns([evaluate_direction(zero_net, a, d, integ)
                               for d, a in zip(directions, zero_angles)], forward.config.lam)
    final = _sum_breakdowns([evaluate_direction(net, a, d, integ)
                             for d, a in zip(directions, ang_np)], forward.config.lam)
    elog = EnergyLog()
    for r in log.rows:
        lam = forward.config.lam
        fa, fb, er = r[2] + r[5], r[3] + r[6], r[4] + r[7]
        elog.rows.append([r[0], fa, fb, er, fa + fb + lam * er])
    report = SolverReport(train.iters, initial, final, True, time.perf_counter() - t0, elog)
    deformation = FlowDeformation(net, ang_np[0], ang_np[1] if len(ang_np) > 1 else None)
    return deformation, report, log


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, net: VelocityNet) -> None:
    """JSON header line followed by the parameters as little-endian float32."""
    params = [p.detach().numpy().astype("<f4").ravel() for p in net.parameters()]
    header = {
        "layers": net.layer_sizes,
        "activation": "tanh",
        "seed": net.seed,
        "shapes": [list(p.shape) for p in net.parameters()],
    }
    blob = np.concatenate(params).tobytes() if params else b""
    Path(path).write_bytes(json.dumps(header).encode() + b"\n" + blob)


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> VelocityNet:
    raw = Path(path).read_bytes()
    head, blob = raw.split(b"\n", 1)
    header = json.loads(head)
    if header.get("activation") != "tanh":
        raise ValueError(f"unsupported activation {header.get('activation')!r}")
    layers = header["layers"]
    net = VelocityNet(tuple(layers[1:-1]), seed=header["seed"], dtype=dtype)
    flat = np.frombuffer(blob, dtype="<f4")
    offset = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            p.copy_(torch.as_tensor(flat[offset:offset + n].reshape(tuple(p.shape)).astype(np.float32)))
            offset += n
    if offset != len(flat):
        raise ValueError(f"{path}: parameter blob size mismatch")
    return net
