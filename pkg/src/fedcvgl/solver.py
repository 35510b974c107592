"""Coarse-to-fine damped Gauss-Newton pose refinement, unrolled and
differentiable.

Each level compares the warped satellite feature map against the ground map
(the feature-metric residual), assembles the 3-DoF normal equations from the
sampled satellite image gradients and the analytic pose Jacobian, and applies
multiplicatively damped updates with accept/reject on the masked residual RMS.
Every quantity on the accepted path is an autodiff op, so a training loss on
the traced poses backpropagates into the feature extractor.

For speed, a level bundles the satellite features with their two spatial
gradient maps into one 3C-channel map: each candidate evaluation is then a
single warp + sample, and the accepted sample provides both the residual and
the next iteration's Jacobian ingredients. The normal equations are built by
one fused op (`_gauss_newton_packed`), mathematically the per-pixel J^T J and
J^T e sums with float64 accumulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .features import FeaturePyramid
from .geometry import AerialGeoref, CameraIntrinsics, Pose, build_warp_grid, pose_jacobian_grid
from .tensor import SingularSystem, Tensor


class DegenerateView(RuntimeError):
    """Raised when too few ground pixels land inside the aerial crop."""


@dataclass
class SolverConfig:
    max_iters_per_level: int = 5
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    convergence_tol: tuple = (1e-3, 1e-3, 1e-4)  # meters, meters, radians
    min_valid_fraction: float = 0.05

    def __post_init__(self):
        if self.max_iters_per_level < 1:
            raise ValueError("max_iters_per_level must be >= 1")
        if self.damping_init <= 0:
            raise ValueError("damping_init must be positive")


@dataclass
class TraceEntry:
    level: int
    iteration: int
    pose: Tensor  # (3,) graph node recorded after this iteration
    residual_norm: float
    lamda: float
    valid_fraction: float
    accepted: bool
    converged: bool
    note: str = ""


@dataclass
class SolveTrace:
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def final_pose(self) -> Pose:
        return Pose.from_array(self.entries[-1].pose.data)

    def to_json_dict(self) -> dict:
        return {
            "entries": [
                {
                    "level": e.level,
                    "iteration": e.iteration,
                    "pose": [float(x) for x in e.pose.data],
                    "residual_norm": e.residual_norm,
                    "lambda": e.lamda,
                    "valid_fraction": e.valid_fraction,
                    "accepted": e.accepted,
                    "converged": e.converged,
                    "note": e.note,
                }
                for e in self.entries
            ],
            "final_pose": [float(x) for x in self.entries[-1].pose.data] if self.entries else None,
        }

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=1)


def masked_rms(e_data: np.ndarray, mask: np.ndarray) -> float:
    """RMS of residual entries over valid pixels; expects entries outside the
    mask to be zero (residual() guarantees that)."""
    n = int(mask.sum())
    if e_data.ndim == 3:
        n *= e_data.shape[0]
    if n == 0:
        return 0.0
    flat = e_data.reshape(-1)
    return float(np.sqrt(np.dot(flat, flat) / n))


def _level_scale(pyr_grd: FeaturePyramid, level: int, grd_hw: tuple) -> int:
    hg = pyr_grd.levels[level].shape[-2]
    scale = grd_hw[0] // hg
    if scale * hg != grd_hw[0]:
        raise T.ShapeError(f"level {level} dims {hg} do not divide ground height {grd_hw[0]}")
    return scale


def residual(level: int, pose, pyr_sat: FeaturePyramid, pyr_grd: FeaturePyramid,
             intr: CameraIntrinsics, geo: AerialGeoref, grd_hw: tuple = (64, 64),
             min_valid_fraction: float = 0.05):
    """Feature-metric residual at one level: warp the satellite map to the
    ground view at ``pose`` and subtract the ground map.

    Returns (e Tensor C x Hg x Wg zeroed outside the mask, mask bool Hg x Wg,
    coords Tensor). Raises DegenerateView if the valid fraction is below
    ``min_valid_fraction``.
    """
    ctx = _LevelCtx(level, pyr_sat, pyr_grd, intr, geo, grd_hw, min_valid_fraction,
                    with_grads=False)
    state = ctx.eval_at(pose)
    return state.e, state.mask, state.coords


@dataclass
class _State:
    """Residual evaluation at one pose within a level."""

    pose: Tensor
    e: Tensor
    mask: np.ndarray
    coords: Tensor
    norm: float
    warped: Tensor = None  # 3C-channel bundle sample when gradients are bundled


class _LevelCtx:
    """Per-level precomputation: the feature+gradient bundle and geometry."""

    def __init__(self, level, pyr_sat, pyr_grd, intr, geo, grd_hw, min_valid_fraction,
                 with_grads=True):
        self.level = level
        self.m_grd = pyr_grd.levels[level]
        m_sat = pyr_sat.levels[level]
        self.channels = m_sat.shape[0]
        self.scale = _level_scale(pyr_grd, level, grd_hw)
        sat_scale = geo.width_px // m_sat.shape[-1]
        if sat_scale != self.scale:
            raise T.ShapeError(
                f"level {level}: satellite scale {sat_scale} != ground scale {self.scale} "
                f"(sat {m_sat.shape}, grd {self.m_grd.shape})"
            )
        self.intr = intr
        self.geo = geo
        self.grd_hw = grd_hw
        self.min_valid_fraction = min_valid_fraction
        if with_grads:
            du, dv = T.spatial_gradient(m_sat)
            self.bundle = T.concat_channels([m_sat, du, dv])
        else:
            self.bundle = m_sat

    def eval_at(self, pose) -> _State:
        coords, horizon_ok = build_warp_grid(pose, self.intr, self.geo, self.scale, self.grd_hw)
        warped, in_bounds = T.grid_sample_bilinear(self.bundle, coords)
        mask = horizon_ok & in_bounds
        frac = float(mask.mean())
        if frac < self.min_valid_fraction:
            raise DegenerateView(
                f"level {self.level}: valid fraction {frac:.4f} < {self.min_valid_fraction} "
                f"(horizon {float(horizon_ok.mean()):.3f}, in-crop {float(in_bounds.mean()):.3f})"
            )
        c = self.channels
        feats = T.slice_channels(warped, 0, c) if warped.shape[0] != c else warped
        e = T.apply_mask(T.sub(feats, self.m_grd), mask)
        pose_t = pose if isinstance(pose, Tensor) else Tensor(pose.normalized().as_array())
        return _State(pose=pose_t, e=e, mask=mask, coords=coords, norm=masked_rms(e.data, mask),
                      warped=warped if warped.shape[0] == 3 * c else None)


def _gauss_newton_packed(gu: Tensor, gv: Tensor, jac: Tensor, e: Tensor) -> Tensor:
    """Fused normal equations: returns (12,) = [H row-major (9), J^T e (3)].

    J_c,k = gu_c * d(u_s)/d xi_k + gv_c * d(v_s)/d xi_k per pixel; H = J J^T
    and g = J e summed over channels and valid pixels (operands are zero off
    the mask), accumulated in float64.
    """
    c = gu.data.shape[0]
    n = gu.data.shape[1] * gu.data.shape[2]
    dt = gu.data.dtype
    j6 = jac.data.reshape(6, n)
    gu2 = gu.data.reshape(c, n)
    gv2 = gv.data.reshape(c, n)
    rows = np.empty((3, c, n), dtype=dt)
    for k in range(3):
        np.multiply(gu2, j6[k], out=rows[k])
        rows[k] += gv2 * j6[k + 3]
    rows = rows.reshape(3, c * n)
    ev = e.data.reshape(-1)
    rows64 = rows.astype(np.float64)
    h = rows64 @ rows64.T
    g = rows64 @ ev.astype(np.float64)
    out = np.concatenate([h.reshape(-1), g]).astype(T.get_default_dtype())

    def bwd(grad):
        gh = grad[:9].reshape(3, 3).astype(dt)
        gg = grad[9:12].astype(dt)
        grad_rows = (gh + gh.T) @ rows + np.outer(gg, ev)
        if e.requires_grad:
            e.accumulate_grad((rows.T @ gg).reshape(e.data.shape).astype(e.data.dtype))
        gr = grad_rows.reshape(3, c, n)
        if gu.requires_grad:
            ggu = gr[0] * j6[0] + gr[1] * j6[1] + gr[2] * j6[2]
            gu.accumulate_grad(ggu.reshape(gu.data.shape).astype(gu.data.dtype))
        if gv.requires_grad:
            ggv = gr[0] * j6[3] + gr[1] * j6[4] + gr[2] * j6[5]
            gv.accumulate_grad(ggv.reshape(gv.data.shape).astype(gv.data.dtype))
        if jac.requires_grad:
            gj = np.empty((6, n), dtype=dt)
            for k in range(3):
                gj[k] = np.einsum("cn,cn->n", gr[k].reshape(c, n), gu2)
                gj[k + 3] = np.einsum("cn,cn->n", gr[k].reshape(c, n), gv2)
            jac.accumulate_grad(gj.reshape(jac.data.shape).astype(jac.data.dtype))

    return Tensor.from_op(out, (gu, gv, jac, e), bwd, "gauss_newton")


# ---------------------------------------------------------------------------
# damped solve shared with tensor.solve3's scalar core
# ---------------------------------------------------------------------------


def _damped_delta(packed: Tensor, lam: float):
    """-solve(H + lam*diag(H), g) from the packed normal equations, built on
    the same differentiable scalar core as tensor.solve3."""
    s = [T.gather_scalar(packed, i) for i in range(12)]
    a00 = T.scalar_mul(s[0], 1.0 + lam)
    a11 = T.scalar_mul(s[4], 1.0 + lam)
    a22 = T.scalar_mul(s[8], 1.0 + lam)
    amax = float(np.max(np.abs(packed.data[:9]))) * (1.0 + lam)
    x = T.solve3_scalars(a00, s[1], s[2], a11, s[5], a22,
                         s[9], s[10], s[11], amax)
    return T.neg(x)


def lm_step(level: int, pose, pyr_sat: FeaturePyramid, pyr_grd: FeaturePyramid,
            intr: CameraIntrinsics, geo: AerialGeoref, lam: float,
            cfg: SolverConfig = None, grd_hw: tuple = (64, 64),
            ctx: "_LevelCtx" = None, state: "_State" = None):
    """One damped Gauss-Newton iteration at ``level``.

    Returns (delta (3,) ndarray, new_lam, diagnostics). ``ctx``/``state`` come
    from previous iterations when chaining; public callers can omit them.
    diagnostics carries the (possibly advanced) pose and residual state.
    """
    cfg = cfg or SolverConfig()
    if isinstance(pose, Pose):
        pose = Tensor(pose.normalized().as_array())
    if ctx is None:
        ctx = _LevelCtx(level, pyr_sat, pyr_grd, intr, geo, grd_hw, cfg.min_valid_fraction)
    if state is None:
        state = ctx.eval_at(pose)

    diag = {"note": "", "accepted": False, "pose": pose, "state": state, "norm": state.norm,
            "proposed": np.zeros(3)}

    if state.warped is not None:
        c = ctx.channels
        gu = T.slice_channels(state.warped, c, 2 * c)
        gv = T.slice_channels(state.warped, 2 * c, 3 * c)
    else:
        du, dv = T.spatial_gradient(pyr_sat.levels[level])
        gu, _ = T.grid_sample_bilinear(du, state.coords)
        gv, _ = T.grid_sample_bilinear(dv, state.coords)
    jac = pose_jacobian_grid(pose, ctx.intr, ctx.geo, ctx.scale, ctx.grd_hw)
    packed = _gauss_newton_packed(gu, gv, jac, state.e)
    if float(np.max(np.abs(packed.data[:9]))) == 0.0:
        # textureless satellite features: J = 0, nothing to solve
        diag["note"] = "no-gradient"
        return np.zeros(3), lam, diag

    try:
        delta = _damped_delta(packed, lam)
    except SingularSystem as exc:
        raise SingularSystem(f"level {level}: {exc}") from exc
    diag["proposed"] = delta.data.astype(np.float64)

    candidate = _updated_pose(pose, delta)
    try:
        new_state = ctx.eval_at(candidate)
    except DegenerateView:
        new_state = None  # candidate walked off the crop: treat as a failed step

    if new_state is not None and new_state.norm < state.norm:
        diag.update(accepted=True, pose=candidate, state=new_state, norm=new_state.norm)
        return delta.data.astype(np.float64), lam / cfg.damping_down, diag
    return np.zeros(3), lam * cfg.damping_up, diag


def _updated_pose(pose: Tensor, delta: Tensor) -> Tensor:
    """pose + delta with the yaw component rewrapped; the wrap is a constant
    2*pi shift, so the gradient passes straight through to both parents."""
    out = pose.data + delta.data
    out[2] = np.mod(out[2] + np.pi, 2.0 * np.pi) - np.pi

    def bwd(g):
        if pose.requires_grad:
            pose.accumulate_grad(g)
        if delta.requires_grad:
            delta.accumulate_grad(g)

    return Tensor.from_op(out, (pose, delta), bwd, "pose_step")


def solve_coarse_to_fine(init_pose, pyr_sat: FeaturePyramid, pyr_grd: FeaturePyramid,
                         intr: CameraIntrinsics, geo: AerialGeoref,
                         cfg: SolverConfig = None, grd_hw: tuple = (64, 64),
                         strict: bool = True):
    """Run the full coarse-to-fine refinement. Returns (Pose, SolveTrace).

    The pose is carried from each level to the next; within a level, damped
    steps run until the proposed update drops below the convergence tolerance
    or the per-level iteration budget is spent. Inside a recording graph the
    traced poses are differentiable w.r.t. the feature maps.

    With ``strict=False`` a view that degenerates when entering a finer level
    stops the refinement there and returns the partial trace instead of
    raising (training on random features wanders; the loss must still see the
    wandering poses). A degenerate view at the first level always raises.
    """
    cfg = cfg or SolverConfig()
    if len(pyr_sat) != len(pyr_grd):
        raise T.ShapeError(f"pyramid depth mismatch: sat {len(pyr_sat)} vs grd {len(pyr_grd)}")
    if isinstance(init_pose, Pose):
        pose = Tensor(init_pose.normalized().as_array())
    else:
        pose = init_pose
    trace = SolveTrace()
    tol = np.asarray(cfg.convergence_tol, dtype=np.float64)

    for level in range(len(pyr_grd)):
        lam = cfg.damping_init
        ctx = _LevelCtx(level, pyr_sat, pyr_grd, intr, geo, grd_hw, cfg.min_valid_fraction)
        try:
            state = ctx.eval_at(pose)
        except DegenerateView as exc:
            if not strict and trace.entries:
                break
            raise DegenerateView(f"level {level}, entry: {exc}") from exc

        for it in range(cfg.max_iters_per_level):
            try:
                delta, lam_next, diag = lm_step(level, pose, pyr_sat, pyr_grd, intr, geo, lam,
                                                cfg, grd_hw, ctx=ctx, state=state)
            except (DegenerateView, SingularSystem) as exc:
                raise type(exc)(f"level {level}, iteration {it}: {exc}") from exc
            pose = diag["pose"]
            state = diag["state"]
            # the *proposed* step going sub-tolerance means convergence even
            # when it was rejected (a zero step never strictly improves)
            converged = bool(diag["note"] != "no-gradient" and np.all(np.abs(diag["proposed"]) < tol))
            trace.entries.append(
                TraceEntry(
                    level=level,
                    iteration=it,
                    pose=pose,
                    residual_norm=diag["norm"],
                    lamda=lam,
                    valid_fraction=float(state.mask.mean()),
                    accepted=diag["accepted"],
                    converged=converged,
                    note=diag["note"],
                )
            )
            lam = lam_next
            if converged or diag["note"] == "no-gradient":
                break

    return trace.final_pose(), trace
