"""Procedural generator of geometrically consistent aerial/ground scene pairs.

A world is a color texture on the ground plane: piecewise-bilinear with 1.6 m
knot spacing, stored as a 1024 x 1024 raster at 0.2 m/px (the coarse surface
sampled on a nested grid, so bilinear lookups reproduce it exactly). Aerial
crops are snapped to the 1.6 m knot lattice; together with the nesting this
makes warping a rendered aerial crop onto the rendered ground view *exact* at
every pyramid level, which the solver-consistency tests rely on.

Three environment classes with distinct spatial statistics stand in for
heterogeneous client worlds: city blocks with a street grid, smooth rural
blobs, and oriented highway stripes with faint cross dashes (the dashes keep
the along-stripe direction observable).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import AerialGeoref, CameraIntrinsics, Pose, aerial_pixel_to_world, ground_pixel_to_world, wrap_pi

TEX_MPP = 0.2
TEX_SIZE = 1024
KNOT_M = 1.6  # texture knot pitch == coarsest pyramid raster pitch
KNOT_N = TEX_SIZE // 8 + 1  # 129 knots spanning 204.8 m
TEX_ORIGIN = -(TEX_SIZE // 2) * TEX_MPP  # world coordinate of raster index 0

SKY_VALUE = 0.6
GROUND_HW = (64, 64)
AERIAL_PX = 128
DEFAULT_INTR = CameraIntrinsics(fx=48.0, fy=48.0, cx=32.0, cy=24.0, height_m=1.6)

ENV_KINDS = ("urban_grid", "rural_blobs", "highway_stripes")


@dataclass(frozen=True)
class EnvironmentClass:
    kind: str
    grid_period_m: float = 9.6
    blob_scale_m: float = 8.0
    stripe_period_m: float = 12.8

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}, expected one of {ENV_KINDS}")


@dataclass
class WorldTexture:
    """Ground-plane color field: raster 3 x N x N plus its georeferencing.

    raster[c, i, j] sits at world (origin + j*mpp, origin + i*mpp); lookups
    are bilinear with clamp-to-edge.
    """

    raster: np.ndarray
    mpp: float = TEX_MPP
    origin: float = TEX_ORIGIN

    def sample(self, x, y) -> np.ndarray:
        fx = (np.asarray(x, dtype=np.float64) - self.origin) / self.mpp
        fy = (np.asarray(y, dtype=np.float64) - self.origin) / self.mpp
        n = self.raster.shape[-1]
        fx = np.clip(fx, 0.0, n - 1.0)
        fy = np.clip(fy, 0.0, n - 1.0)
        x0 = np.minimum(fx.astype(np.int64), n - 2)
        y0 = np.minimum(fy.astype(np.int64), n - 2)
        wx = fx - x0
        wy = fy - y0
        r = self.raster
        v00 = r[:, y0, x0]
        v01 = r[:, y0, x0 + 1]
        v10 = r[:, y0 + 1, x0]
        v11 = r[:, y0 + 1, x0 + 1]
        out = (
            v00 * (1 - wx) * (1 - wy)
            + v01 * wx * (1 - wy)
            + v10 * (1 - wx) * wy
            + v11 * wx * wy
        )
        return out.astype(np.float32)

    def bounds(self) -> tuple:
        lo = self.origin
        hi = self.origin + (self.raster.shape[-1] - 1) * self.mpp
        return lo, hi


def _sub_seed(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(k).encode()) for k in keys])


def _smooth_noise(rng: np.random.Generator, n: int, cell: int) -> np.ndarray:
    """Value noise: random lattice bilinearly upsampled to an n x n grid."""
    coarse_n = n // cell + 2
    lattice = rng.random((coarse_n, coarse_n))
    idx = np.arange(n) / cell
    i0 = idx.astype(np.int64)
    w = idx - i0
    rows = lattice[i0][:, i0] * (1 - w)[None, :] + lattice[i0][:, i0 + 1] * w[None, :]
    rows1 = lattice[i0 + 1][:, i0] * (1 - w)[None, :] + lattice[i0 + 1][:, i0 + 1] * w[None, :]
    return rows * (1 - w)[:, None] + rows1 * w[:, None]


def _coarse_pattern(env: EnvironmentClass, rng: np.random.Generator) -> np.ndarray:
    """3 x KNOT_N x KNOT_N color values on the 1.6 m knot lattice, in [0,1]."""
    n = KNOT_N
    yy, xx = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    wx = xx * KNOT_M  # world offsets from the texture corner
    wy = yy * KNOT_M

    # every class carries a smooth large-scale luminance field: the coarsest
    # solver level needs an alias-free cue or periodic patterns trap it in
    # shifted/rotated local minima within the +-3 m / +-10 deg basin
    lowfreq = _smooth_noise(rng, n, 16) - 0.5

    if env.kind == "urban_grid":
        p = max(2, int(round(env.grid_period_m / KNOT_M)))
        bx = (xx.astype(np.int64)) // p
        by = (yy.astype(np.int64)) // p
        nblocks = n // p + 2
        shades = rng.uniform(0.45, 0.95, size=(nblocks, nblocks))
        base = shades[by, bx]
        street = ((xx.astype(np.int64) % p) == 0) | ((yy.astype(np.int64) % p) == 0)
        base = np.where(street, rng.uniform(0.05, 0.15), base)
        base = base + 0.38 * lowfreq
        tint = rng.uniform(0.75, 1.0, size=3)
        rgb = base[None] * tint[:, None, None]
        rgb += rng.normal(0.0, 0.04, size=rgb.shape)
    elif env.kind == "rural_blobs":
        cell = max(2, int(round(env.blob_scale_m / KNOT_M)))
        field = _smooth_noise(rng, n, cell)
        fine = _smooth_noise(rng, n, max(2, cell // 2))
        g = 0.25 + 0.65 * field
        rgb = np.stack([0.35 * g + 0.15 * fine, g, 0.4 * g + 0.1 * fine])
        rgb += rng.normal(0.0, 0.02, size=rgb.shape)
    else:  # highway_stripes
        theta = rng.uniform(0.0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        along = wx * c + wy * s
        across = -wx * s + wy * c
        stripes = 0.5 + 0.34 * np.sin(2 * np.pi * along / env.stripe_period_m)
        dashes = 0.15 * np.sin(2 * np.pi * across / (0.75 * env.stripe_period_m))
        base = stripes + dashes + 0.3 * lowfreq
        rgb = np.stack([base, base * rng.uniform(0.85, 1.0), base * rng.uniform(0.6, 0.8)])
        rgb += rng.normal(0.0, 0.03, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def _upsample_knots(coarse: np.ndarray) -> np.ndarray:
    """Evaluate the knot-lattice bilinear surface on the 0.2 m raster.

    Fine sample j sits at knot coordinate j/8: exact dyadic weights, so the
    stored raster reproduces the surface bit-for-bit at its own resolution.
    """
    j = np.arange(TEX_SIZE)
    i0 = j // 8
    w = (j % 8) / 8.0
    a = coarse[:, :, i0] * (1 - w) + coarse[:, :, i0 + 1] * w
    out = a[:, i0, :] * (1 - w)[None, :, None] + a[:, i0 + 1, :] * w[None, :, None]
    return out.astype(np.float32)


def gen_texture(env: EnvironmentClass, seed: int) -> WorldTexture:
    """Deterministic world texture for an environment class and seed."""
    rng = np.random.default_rng(_sub_seed(seed, "texture", env.kind))
    return WorldTexture(_upsample_knots(_coarse_pattern(env, rng)))


def snap_to_knots(value: float) -> float:
    return round(value / KNOT_M) * KNOT_M


def georef_for_pose(pose: Pose, width_px: int = AERIAL_PX, height_px: int = AERIAL_PX) -> AerialGeoref:
    """Aerial crop centered on a pose, snapped to the texture knot lattice
    (<= 0.8 m shift; keeps crop rasters aligned with the texture at all
    pyramid levels)."""
    return AerialGeoref(
        mpp=TEX_MPP,
        center_x_m=snap_to_knots(pose.x_m),
        center_y_m=snap_to_knots(pose.y_m),
        width_px=width_px,
        height_px=height_px,
    )


def render_aerial(texture: WorldTexture, geo: AerialGeoref) -> np.ndarray:
    """Orthographic crop: bilinear texture lookup at every pixel's world point."""
    u = np.arange(geo.width_px, dtype=np.float64)
    v = np.arange(geo.height_px, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    x, y = aerial_pixel_to_world(uu, vv, geo)
    lo, hi = texture.bounds()
    if x.min() < lo or x.max() > hi or y.min() < lo or y.max() > hi:
        raise ValueError(
            f"aerial crop [{x.min():.1f},{x.max():.1f}]x[{y.min():.1f},{y.max():.1f}] m "
            f"outside texture bounds [{lo:.1f},{hi:.1f}]"
        )
    return texture.sample(x, y)


def render_ground(texture: WorldTexture, pose: Pose, intr: CameraIntrinsics = DEFAULT_INTR,
                  hw: tuple = GROUND_HW) -> np.ndarray:
    """Pinhole ground view: plane intersection + texture lookup below the
    horizon, constant sky value above."""
    h, w = hw
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    x, y, valid = ground_pixel_to_world(uu, vv, pose, intr)
    img = np.full((3, h, w), SKY_VALUE, dtype=np.float32)
    if valid.any():
        vals = texture.sample(x[valid], y[valid])
        img[:, valid] = vals
    return img


def sample_init_pose(gt: Pose, seed: int, bounds=(5.0, 5.0, np.deg2rad(10.0))) -> Pose:
    """Perturbed starting pose: gt + U(+-bx, +-by, +-byaw), seed-deterministic."""
    rng = np.random.default_rng(_sub_seed(seed, "init"))
    dx = rng.uniform(-bounds[0], bounds[0])
    dy = rng.uniform(-bounds[1], bounds[1])
    dyaw = rng.uniform(-bounds[2], bounds[2])
    return Pose(gt.x_m + dx, gt.y_m + dy, wrap_pi(gt.yaw_rad + dyaw))


@dataclass
class ClientSample:
    aerial: np.ndarray  # 3 x 128 x 128, [0, 1]
    ground: np.ndarray  # 3 x 64 x 64, [0, 1]
    georef: AerialGeoref
    intr: CameraIntrinsics
    gt_pose: Pose
    init_pose: Pose


def make_sample(texture: WorldTexture, gt: Pose, seed: int,
                intr: CameraIntrinsics = DEFAULT_INTR) -> ClientSample:
    init = sample_init_pose(gt, seed)
    geo = georef_for_pose(init)
    return ClientSample(
        aerial=render_aerial(texture, geo),
        ground=render_ground(texture, gt, intr),
        georef=geo,
        intr=intr,
        gt_pose=gt.normalized(),
        init_pose=init,
    )


def _draw_gt_pose(rng: np.random.Generator, spread_m: float = 30.0) -> Pose:
    return Pose(
        float(rng.uniform(-spread_m, spread_m)),
        float(rng.uniform(-spread_m, spread_m)),
        float(rng.uniform(-np.pi, np.pi)),
    )


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------


def _intr_dict(intr: CameraIntrinsics) -> dict:
    return {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "height_m": intr.height_m}


def _intr_from(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d["height_m"])


def _write_group(out_dir: Path, rel: str, texture: WorldTexture, count: int, seed: int,
                 intr: CameraIntrinsics) -> list:
    gdir = out_dir / rel
    gdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for j in range(count):
        rng = np.random.default_rng(_sub_seed(seed, "pose", j))
        gt = _draw_gt_pose(rng)
        sample = make_sample(texture, gt, int(rng.integers(2**31)), intr)
        a_rel = f"{rel}/sample_{j:04d}.aerial.cvgt"
        g_rel = f"{rel}/sample_{j:04d}.ground.cvgt"
        T.save_tensor(out_dir / a_rel, sample.aerial)
        T.save_tensor(out_dir / g_rel, sample.ground)
        rows.append(
            {
                "aerial": a_rel,
                "ground": g_rel,
                "gt": [sample.gt_pose.x_m, sample.gt_pose.y_m, sample.gt_pose.yaw_rad],
                "init": [sample.init_pose.x_m, sample.init_pose.y_m, sample.init_pose.yaw_rad],
                "georef_center": [sample.georef.center_x_m, sample.georef.center_y_m],
            }
        )
    return rows


def make_client_datasets(n_clients: int, per_client: int, test_count: int, seed: int, out_dir,
                         intr: CameraIntrinsics = DEFAULT_INTR) -> dict:
    """Generate heterogeneous client datasets plus a held-out test set.

    Clients take environment classes round-robin, each with its own texture
    seed; the test set uses fresh texture seeds (one per class) that no client
    shares, drawn round-robin across all classes.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "seed": seed,
        "tex_mpp": TEX_MPP,
        "knot_m": KNOT_M,
        "intrinsics": _intr_dict(intr),
        "aerial_px": AERIAL_PX,
        "clients": [],
    }
    client_seeds = []
    for i in range(n_clients):
        env = EnvironmentClass(ENV_KINDS[i % len(ENV_KINDS)])
        tex_seed = seed * 1009 + i
        client_seeds.append(tex_seed)
        texture = gen_texture(env, tex_seed)
        rows = _write_group(out_dir, f"client_{i}", texture, per_client, tex_seed, intr)
        manifest["clients"].append(
            {"id": i, "env": env.kind, "texture_seed": tex_seed, "count": per_client,
             "samples": rows}
        )

    test_rows = []
    test_envs = []
    for k, kind in enumerate(ENV_KINDS):
        env = EnvironmentClass(kind)
        tex_seed = seed * 1009 + 100000 + k
        assert tex_seed not in client_seeds
        texture = gen_texture(env, tex_seed)
        share = test_count // len(ENV_KINDS) + (1 if k < test_count % len(ENV_KINDS) else 0)
        rows = _write_group(out_dir, f"test/{kind}", texture, share, tex_seed, intr)
        test_rows.extend(rows)
        test_envs.append({"env": kind, "texture_seed": tex_seed, "count": share})
    manifest["test"] = {"count": len(test_rows), "parts": test_envs, "samples": test_rows}

    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f)
    return manifest


class ClientDataset:
    """In-memory view of one client's (or the test) sample list."""

    def __init__(self, samples: list, client_id, env: str = ""):
        if not samples:
            raise ValueError(f"dataset {client_id!r} is empty")
        self.samples = samples
        self.client_id = client_id
        self.env = env

    def __len__(self) -> int:
        return len(self.samples)


def _load_rows(data_dir: Path, rows: list, intr: CameraIntrinsics) -> list:
    out = []
    for row in rows:
        georef = AerialGeoref(TEX_MPP, row["georef_center"][0], row["georef_center"][1],
                              AERIAL_PX, AERIAL_PX)
        out.append(
            ClientSample(
                aerial=T.load_tensor(data_dir / row["aerial"]),
                ground=T.load_tensor(data_dir / row["ground"]),
                georef=georef,
                intr=intr,
                gt_pose=Pose.from_array(row["gt"]),
                init_pose=Pose.from_array(row["init"]),
            )
        )
    return out


def load_manifest(data_dir) -> dict:
    with open(Path(data_dir) / "manifest.json") as f:
        return json.load(f)


def load_client_dataset(data_dir, client_id: int) -> ClientDataset:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    intr = _intr_from(manifest["intrinsics"])
    for entry in manifest["clients"]:
        if entry["id"] == client_id:
            return ClientDataset(_load_rows(data_dir, entry["samples"], intr), client_id, entry["env"])
    raise KeyError(f"client {client_id} not in manifest (found {[e['id'] for e in manifest['clients']]})")


def load_test_dataset(data_dir) -> ClientDataset:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    intr = _intr_from(manifest["intrinsics"])
    return ClientDataset(_load_rows(data_dir, manifest["test"]["samples"], intr), "test")


def load_external_dataset(data_dir):
    """Hook for real ground/aerial datasets (e.g. driving footage plus map
    tiles). A loader would emit the same ClientSample rows: an aerial crop
    with georeference, a ground frame with intrinsics, and GT + initial poses
    per sample. Not implemented; the synthetic generator fills the role.
    """
    raise NotImplementedError("external dataset ingestion is out of scope; use make_client_datasets")
