"""Projective relations between the ground camera, the ground plane and the
aerial (orthographic) image.

Axis conventions, pinned once for every module:
  * world: x east, y north, z up; the ground plane is z = 0;
  * camera: x right, y down, z forward (optical axis);
  * heading: yaw = 0 looks along +y (north), positive counter-clockwise;
  * images: u grows right, v grows down; aerial v grows southward.

All functions here are pure and safe to call concurrently. The two fused
autodiff primitives (``build_warp_grid`` and ``pose_jacobian_grid``) produce
graph nodes whose backward uses the analytic pose Jacobian below, which in
turn is checked against finite differences of the per-pixel composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

HORIZON_EPS = 1e-3  # pixels; rays closer than this to the horizon never hit the plane
_FAR_OUT = -1.0e4  # placeholder coordinate for above-horizon pixels


def wrap_pi(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(angle + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    height_m: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.height_m <= 0:
            raise ValueError(f"camera height must be positive, got {self.height_m}")

    def scaled(self, level_scale: int) -> "CameraIntrinsics":
        s = float(level_scale)
        return CameraIntrinsics(self.fx / s, self.fy / s, self.cx / s, self.cy / s, self.height_m)


@dataclass(frozen=True)
class Pose:
    """Planar ground-camera pose: translation in meters, heading in radians."""

    x_m: float
    y_m: float
    yaw_rad: float

    def normalized(self) -> "Pose":
        return Pose(self.x_m, self.y_m, wrap_pi(self.yaw_rad))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_m, self.y_m, self.yaw_rad], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Pose":
        a = np.asarray(a, dtype=np.float64).reshape(3)
        return Pose(float(a[0]), float(a[1]), wrap_pi(float(a[2])))


@dataclass(frozen=True)
class AerialGeoref:
    """Orthographic georeferencing of an aerial crop: meters per pixel and the
    world position of the image center."""

    mpp: float
    center_x_m: float
    center_y_m: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if self.mpp <= 0:
            raise ValueError(f"mpp must be positive, got {self.mpp}")

    def scaled(self, level_scale: int) -> "AerialGeoref":
        s = int(level_scale)
        return AerialGeoref(self.mpp * s, self.center_x_m, self.center_y_m,
                            self.width_px // s, self.height_px // s)


def pose_to_Rt(pose: Pose, intr: CameraIntrinsics):
    """Camera-to-world rotation and world translation (t_z = camera height)."""
    c, s = math.cos(pose.yaw_rad), math.sin(pose.yaw_rad)
    r = np.array([[c, 0.0, -s], [s, 0.0, c], [0.0, -1.0, 0.0]], dtype=np.float64)
    t = np.array([pose.x_m, pose.y_m, intr.height_m], dtype=np.float64)
    return r, t


def Rt_to_pose(r: np.ndarray, t: np.ndarray) -> Pose:
    yaw = math.atan2(-float(r[0, 2]), float(r[1, 2]))
    return Pose(float(t[0]), float(t[1]), wrap_pi(yaw))


def project_world_to_ground(xyz, pose: Pose, intr: CameraIntrinsics):
    """Project world points into the ground image. Returns (u, v, depth);
    points with depth <= 0 are behind the camera.

    This is the forward x_g = P X_w relation, used as the round-trip oracle
    for ``ground_pixel_to_world``.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    r, t = pose_to_Rt(pose, intr)
    pc = (xyz - t) @ r  # R^T (X - t), row-vector form
    depth = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[..., 0] / depth + intr.cx
        v = intr.fy * pc[..., 1] / depth + intr.cy
    return u, v, depth


def ground_pixel_to_world(u, v, pose: Pose, intr: CameraIntrinsics):
    """Back-project ground pixels onto the plane z = 0.

    Accepts scalars or arrays. Returns (x, y, valid); pixels at or above the
    horizon (v <= cy + HORIZON_EPS) are invalid and get placeholder coords.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dv = v - intr.cy
    valid = dv > HORIZON_EPS
    dv_safe = np.where(valid, dv, 1.0)
    rng = intr.height_m * intr.fy / dv_safe
    d0x = (u - intr.cx) / intr.fx
    c, s = math.cos(pose.yaw_rad), math.sin(pose.yaw_rad)
    x = pose.x_m + rng * (c * d0x - s)
    y = pose.y_m + rng * (s * d0x + c)
    x = np.where(valid, x, _FAR_OUT)
    y = np.where(valid, y, _FAR_OUT)
    if x.ndim == 0:
        return float(x), float(y), bool(valid)
    return x, y, valid


def world_to_aerial_pixel(x, y, geo: AerialGeoref):
    """Affine world -> aerial pixel map (v grows southward). No clamping."""
    u_s = geo.width_px / 2.0 + (np.asarray(x, dtype=np.float64) - geo.center_x_m) / geo.mpp
    v_s = geo.height_px / 2.0 - (np.asarray(y, dtype=np.float64) - geo.center_y_m) / geo.mpp
    if u_s.ndim == 0:
        return float(u_s), float(v_s)
    return u_s, v_s


def aerial_pixel_to_world(u_s, v_s, geo: AerialGeoref):
    x = geo.center_x_m + (np.asarray(u_s, dtype=np.float64) - geo.width_px / 2.0) * geo.mpp
    y = geo.center_y_m - (np.asarray(v_s, dtype=np.float64) - geo.height_px / 2.0) * geo.mpp
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


# ---------------------------------------------------------------------------
# pose-independent ray constants per (intrinsics, level, ground dims)
# ---------------------------------------------------------------------------

_ray_cache: dict = {}


def _ray_constants(intr: CameraIntrinsics, level_scale: int, grd_hw: tuple):
    """Per-pixel A = r*d0x, B = r and the below-horizon mask, where r is the
    ray scale h*fy/(v - cy). These do not depend on the pose."""
    key = (intr.fx, intr.fy, intr.cx, intr.cy, intr.height_m, level_scale, grd_hw)
    hit = _ray_cache.get(key)
    if hit is not None:
        return hit
    li = intr.scaled(level_scale)
    hg, wg = grd_hw[0] // level_scale, grd_hw[1] // level_scale
    v = np.arange(hg, dtype=np.float64)[:, None]
    u = np.arange(wg, dtype=np.float64)[None, :]
    dv = v - li.cy
    valid = np.broadcast_to(dv > HORIZON_EPS, (hg, wg)).copy()
    rng = li.height_m * li.fy / np.where(dv > HORIZON_EPS, dv, 1.0)
    d0x = (u - li.cx) / li.fx
    a = np.broadcast_to(rng * d0x, (hg, wg)).copy()
    b = np.broadcast_to(rng * np.ones_like(d0x), (hg, wg)).copy()
    a[~valid] = 0.0
    b[~valid] = 0.0
    _ray_cache[key] = (a, b, valid)
    return a, b, valid


def _pose_values(pose):
    if isinstance(pose, Tensor):
        p = pose.data.astype(np.float64).reshape(3)
        return float(p[0]), float(p[1]), float(p[2]), pose
    if isinstance(pose, Pose):
        return pose.x_m, pose.y_m, pose.yaw_rad, None
    raise TypeError(f"pose must be a Pose or a (3,) Tensor, got {type(pose)!r}")


def build_warp_grid(pose, intr: CameraIntrinsics, geo: AerialGeoref,
                    level_scale: int = 1, grd_hw: tuple = (64, 64)):
    """Aerial-pixel coordinates of every ground pixel's ground-plane point.

    Composition world_to_aerial_pixel . ground_pixel_to_world, evaluated on
    the full level grid in one fused op. ``pose`` may be a Pose (constant) or
    a (3,) Tensor, in which case the coords are differentiable w.r.t. it.
    Returns (coords Tensor 2 x Hg x Wg, validity bool Hg x Wg). Above-horizon
    pixels are invalid and their coords are pushed far out of bounds.
    """
    if level_scale < 1 or (level_scale & (level_scale - 1)) != 0:
        raise ValueError(f"level_scale must be a power of two, got {level_scale}")
    x, y, yaw, pose_t = _pose_values(pose)
    a, b, valid = _ray_constants(intr, level_scale, grd_hw)
    lg = geo.scaled(level_scale)
    c, s = math.cos(yaw), math.sin(yaw)
    xw = x + c * a - s * b
    yw = y + s * a + c * b
    inv = 1.0 / lg.mpp
    u_s = lg.width_px / 2.0 + (xw - lg.center_x_m) * inv
    v_s = lg.height_px / 2.0 - (yw - lg.center_y_m) * inv
    u_s[~valid] = _FAR_OUT
    v_s[~valid] = _FAR_OUT
    from .tensor import get_default_dtype

    coords = np.stack([u_s, v_s]).astype(get_default_dtype())
    if pose_t is None:
        return Tensor(coords), valid

    du_dyaw = -(s * a + c * b) * inv
    dv_dyaw = -(c * a - s * b) * inv

    def bwd(g):
        gu = np.where(valid, g[0], 0.0)
        gv = np.where(valid, g[1], 0.0)
        gx = gu.sum(dtype=np.float64) * inv
        gy = -gv.sum(dtype=np.float64) * inv
        gyaw = np.sum(gu * du_dyaw + gv * dv_dyaw, dtype=np.float64)
        pose_t.accumulate_grad(np.array([gx, gy, gyaw], dtype=pose_t.data.dtype))

    return Tensor.from_op(coords, (pose_t,), bwd, "warp_grid"), valid


def pose_jacobian_grid(pose, intr: CameraIntrinsics, geo: AerialGeoref,
                       level_scale: int = 1, grd_hw: tuple = (64, 64)) -> Tensor:
    """Per-pixel d(p_s)/d(x, y, yaw) as a 6 x Hg x Wg tensor.

    Row order: du/dx, du/dy, du/dyaw, dv/dx, dv/dy, dv/dyaw, in level-pixel
    units per meter (and per radian). Differentiable w.r.t. the pose (only the
    yaw columns depend on it). Invalid pixels carry zeros.
    """
    x, y, yaw, pose_t = _pose_values(pose)
    a, b, valid = _ray_constants(intr, level_scale, grd_hw)
    lg = geo.scaled(level_scale)
    inv = 1.0 / lg.mpp
    c, s = math.cos(yaw), math.sin(yaw)
    hg, wg = valid.shape
    jac = np.zeros((6, hg, wg), dtype=np.float64)
    jac[0][valid] = inv
    jac[4][valid] = -inv
    jac[2] = -(s * a + c * b) * inv
    jac[5] = -(c * a - s * b) * inv
    jac[2][~valid] = 0.0
    jac[5][~valid] = 0.0
    from .tensor import get_default_dtype

    out = jac.astype(get_default_dtype())
    if pose_t is None:
        return Tensor(out)

    d2u = -(c * a - s * b) * inv
    d2v = (s * a + c * b) * inv

    def bwd(g):
        gyaw = np.sum(np.where(valid, g[2] * d2u + g[5] * d2v, 0.0), dtype=np.float64)
        pose_t.accumulate_grad(np.array([0.0, 0.0, gyaw], dtype=pose_t.data.dtype))

    return Tensor.from_op(out, (pose_t,), bwd, "pose_jacobian_grid")


def jacobian_dps_dxi(u: float, v: float, pose: Pose, intr: CameraIntrinsics,
                     geo: AerialGeoref) -> np.ndarray:
    """Analytic 2x3 Jacobian of the aerial coords of one ground pixel w.r.t.
    (x_m, y_m, yaw_rad). Raises for pixels at or above the horizon."""
    dv = v - intr.cy
    if dv <= HORIZON_EPS:
        raise ValueError(f"pixel (u={u}, v={v}) is above the horizon (cy={intr.cy})")
    rng = intr.height_m * intr.fy / dv
    d0x = (u - intr.cx) / intr.fx
    a = rng * d0x
    b = rng
    c, s = math.cos(pose.yaw_rad), math.sin(pose.yaw_rad)
    inv = 1.0 / geo.mpp
    return np.array(
        [
            [inv, 0.0, -(s * a + c * b) * inv],
            [0.0, -inv, -(c * a - s * b) * inv],
        ],
        dtype=np.float64,
    )
