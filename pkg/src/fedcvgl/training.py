"""Per-client supervised training through the unrolled solver.

One epoch: shuffle, batch the images through both feature branches at once,
run the per-sample coarse-to-fine solve inside the same graph, sum the traced
pose losses, backprop, and apply a clipped Adam step. The loss charges every
recorded (level, iteration) pose with its translation error plus a weighted
wrapped-yaw error, which rewards fast convergence from the perturbed inits.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .features import FeaturePyramid, ModelParams, forward_pyramid
from .geometry import Pose, wrap_pi
from .solver import SolveTrace, SolverConfig, solve_coarse_to_fine
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    local_epochs: int = 1
    rotation_weight: float = 1.0  # scales yaw error (rad) into the metric sum
    grad_clip: float = 10.0  # global norm
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")


@dataclass(frozen=True)
class GroundTruth:
    pose_star: Pose


class Adam:
    """Adam with bias correction and global-norm gradient clipping.

    Update math runs in float64 and is stored back at storage precision, so a
    zero learning rate reproduces the parameters bit for bit.
    """

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.lr
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: ModelParams, grads: dict, clip: float = 0.0) -> None:
        names = sorted(grads)
        if clip and clip > 0:
            total = math.sqrt(sum(float(np.sum(grads[n].astype(np.float64) ** 2)) for n in names))
            scale = clip / total if total > clip else 1.0
        else:
            scale = 1.0
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        updates = {}
        for n in names:
            g = grads[n].astype(np.float64) * scale
            m = self.beta1 * self.m.get(n, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(n, 0.0) + (1 - self.beta2) * g * g
            self.m[n] = m
            self.v[n] = v
            p = params[n].data.astype(np.float64)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            updates[n] = p.astype(params[n].data.dtype)
        params.replace(updates)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        self.m = {k: np.asarray(v) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v) for k, v in state["v"].items()}


def pose_loss(trace: SolveTrace, gt, rho: float = 1.0) -> Tensor:
    """Sum over every traced pose of Euclidean translation error (m) plus
    rho * |wrapped yaw error| (rad). Differentiable through the trace."""
    gtp = gt.pose_star if isinstance(gt, GroundTruth) else gt
    if not trace.entries:
        raise ValueError("pose_loss: empty solve trace")
    cx = Tensor(np.asarray(gtp.x_m))
    cy = Tensor(np.asarray(gtp.y_m))
    cyaw = Tensor(np.asarray(gtp.yaw_rad))
    terms = []
    for entry in trace.entries:
        px = T.gather_scalar(entry.pose, 0)
        py = T.gather_scalar(entry.pose, 1)
        pyaw = T.gather_scalar(entry.pose, 2)
        dx = T.sub(px, cx)
        dy = T.sub(py, cy)
        dist = T.sqrt(T.add(T.mul(dx, dx), T.mul(dy, dy)))
        dyaw = T.absval(T.wrap_angle(T.sub(pyaw, cyaw)))
        terms.append(T.add(dist, T.scalar_mul(dyaw, rho)))
    return T.sum_scalars(terms)


def _batch_pyramids(samples, params: ModelParams):
    sat = Tensor(np.stack([s.aerial for s in samples]))
    grd = Tensor(np.stack([s.ground for s in samples]))
    pyr_s = forward_pyramid(sat, params.branch("sat"))
    pyr_g = forward_pyramid(grd, params.branch("grd"))
    return pyr_s, pyr_g


def _sample_view(batch_pyr, k: int) -> FeaturePyramid:
    return FeaturePyramid([T.select_batch(lv, k) for lv in batch_pyr.levels])


def train_epoch(params: ModelParams, dataset, cfg: TrainConfig, seed: int,
                optimizer: Adam = None, grd_hw: tuple = (64, 64)):
    """One shuffled pass over a client dataset. Returns (params, stats).

    The parameter store is updated in place (fresh leaf tensors per step); an
    optimizer may be passed in to keep its moments across epochs/rounds.
    """
    if len(dataset.samples) == 0:
        raise ValueError("train_epoch: empty dataset")
    opt = optimizer or Adam(cfg)
    order = np.random.default_rng(seed).permutation(len(dataset.samples))
    t0 = time.monotonic()
    losses = []
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        batch = [dataset.samples[i] for i in idx]
        pyr_s_b, pyr_g_b = _batch_pyramids(batch, params)
        loss_sum = None
        for k, sample in enumerate(batch):
            _, trace = solve_coarse_to_fine(
                sample.init_pose, _sample_view(pyr_s_b, k), _sample_view(pyr_g_b, k),
                sample.intr, sample.georef, cfg.solver, grd_hw, strict=False,
            )
            term = pose_loss(trace, sample.gt_pose, cfg.rotation_weight)
            loss_sum = term if loss_sum is None else T.add(loss_sum, term)
        loss = T.scalar_mul(loss_sum, 1.0 / len(batch))
        value = loss.item()
        if not math.isfinite(value):
            raise RuntimeError(
                f"non-finite loss {value} on samples {list(map(int, idx))} "
                f"(client {getattr(dataset, 'client_id', '?')})"
            )
        T.backward(loss)
        grads = {}
        for name in params.names():
            g = params[name].grad
            grads[name] = g if g is not None else np.zeros_like(params[name].data)
        opt.step(params, grads, cfg.grad_clip)
        losses.append(value)
    stats = {
        "mean_loss": float(np.mean(losses)),
        "batches": len(losses),
        "wall_time_s": time.monotonic() - t0,
    }
    return params, stats


def decompose_pose_error(pred: Pose, gt: Pose):
    """(lateral m, longitudinal m, |yaw| deg) of a prediction against GT.

    Longitudinal is the component along the GT heading, lateral the component
    across it; both reported as magnitudes. Yaw error is wrapped to [0, 180].
    """
    dx = pred.x_m - gt.x_m
    dy = pred.y_m - gt.y_m
    c, s = math.cos(gt.yaw_rad), math.sin(gt.yaw_rad)
    lon = abs(dx * -s + dy * c)
    lat = abs(dx * c + dy * s)
    yaw_deg = abs(math.degrees(wrap_pi(pred.yaw_rad - gt.yaw_rad)))
    return lat, lon, yaw_deg


def evaluate_pose_errors(params: ModelParams, dataset, cfg: TrainConfig = None,
                         grd_hw: tuple = (64, 64), chunk: int = 8) -> list:
    """Solve every sample from its stored init pose; no training side effects."""
    cfg = cfg or TrainConfig()
    out = []
    with T.no_grad():
        for lo in range(0, len(dataset.samples), chunk):
            batch = dataset.samples[lo : lo + chunk]
            pyr_s_b, pyr_g_b = _batch_pyramids(batch, params)
            for k, sample in enumerate(batch):
                final, _ = solve_coarse_to_fine(
                    sample.init_pose, _sample_view(pyr_s_b, k), _sample_view(pyr_g_b, k),
                    sample.intr, sample.georef, cfg.solver, grd_hw, strict=False,
                )
                out.append(decompose_pose_error(final, sample.gt_pose))
    return out
