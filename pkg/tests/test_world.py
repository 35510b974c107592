"""Synthetic world: textures, rendering, pose sampling, dataset layout."""

import json

import numpy as np
import pytest

from fedcvgl import world as W
from fedcvgl.geometry import Pose, aerial_pixel_to_world, ground_pixel_to_world

URBAN = W.EnvironmentClass("urban_grid")
RURAL = W.EnvironmentClass("rural_blobs")
HIGHWAY = W.EnvironmentClass("highway_stripes")


def luminance(texture):
    return texture.raster.mean(axis=0)


def autocorr_x(img, max_lag):
    """Normalized row-averaged autocorrelation along x (test-side oracle)."""
    z = img - img.mean()
    denom = float((z * z).sum())
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        out[lag] = float((z[:, : img.shape[1] - lag] * z[:, lag:]).sum()) / denom
    return out


class TestTexture:
    def test_deterministic(self):
        a = W.gen_texture(URBAN, 5)
        b = W.gen_texture(URBAN, 5)
        assert a.raster.tobytes() == b.raster.tobytes()
        c = W.gen_texture(URBAN, 6)
        assert c.raster.tobytes() != a.raster.tobytes()

    def test_values_in_unit_range(self):
        for env in (URBAN, RURAL, HIGHWAY):
            t = W.gen_texture(env, 7)
            assert t.raster.min() >= 0.0 and t.raster.max() <= 1.0

    def test_urban_autocorrelation_peaks_at_grid_period(self):
        period_px = int(round(URBAN.grid_period_m / W.TEX_MPP))
        ac_urban = autocorr_x(luminance(W.gen_texture(URBAN, 8)), period_px + 4)
        ac_rural = autocorr_x(luminance(W.gen_texture(RURAL, 8)), period_px + 4)
        half = period_px // 2
        # urban: local max at the period, clearly above the half-period dip
        assert ac_urban[period_px] > ac_urban[half] + 0.1
        assert ac_urban[period_px] > 0.15
        # rural blobs: no periodic revival
        assert ac_rural[period_px] < ac_rural[half]

    def test_class_heterogeneity_between_exceeds_within(self):
        period_px = int(round(URBAN.grid_period_m / W.TEX_MPP))
        feats = {}
        for env in (URBAN, RURAL, HIGHWAY):
            feats[env.kind] = [
                autocorr_x(luminance(W.gen_texture(env, s)), period_px) for s in (11, 12, 13)
            ]
        def d(a, b):
            return float(np.linalg.norm(a - b))

        within, between = [], []
        kinds = list(feats)
        for k in kinds:
            fs = feats[k]
            within += [d(fs[0], fs[1]), d(fs[0], fs[2]), d(fs[1], fs[2])]
        for i in range(len(kinds)):
            for j in range(i + 1, len(kinds)):
                between += [d(a, b) for a in feats[kinds[i]] for b in feats[kinds[j]]]
        assert np.mean(between) > np.mean(within)

    def test_piecewise_bilinear_with_knot_pitch(self):
        # the stored raster must reproduce its own coarse bilinear surface:
        # second differences vanish inside every 8-sample knot cell
        t = W.gen_texture(RURAL, 14)
        row = t.raster[0, 100].astype(np.float64)
        inner = row.reshape(-1, 8)  # cells between knots
        second = np.diff(inner, n=2, axis=1)
        assert np.abs(second).max() < 1e-6


class TestRenderAerial:
    def test_aligned_crop_is_subraster_copy(self):
        t = W.gen_texture(URBAN, 15)
        geo = W.georef_for_pose(Pose(3.15, -7.9, 0.0))  # snaps to knot lattice
        img = W.render_aerial(t, geo)
        j0 = int(round((geo.center_x_m - t.origin) / t.mpp)) - 64
        i0 = int(round((geo.center_y_m - t.origin) / t.mpp)) + 64
        # aerial v grows southward: row v maps to raster row i0 - v
        expect = np.stack([t.raster[c, i0 - np.arange(128)][:, j0 : j0 + 128] for c in range(3)])
        np.testing.assert_array_equal(img, expect)

    def test_one_meter_apart_crops_shift_five_px(self):
        t = W.gen_texture(RURAL, 16)
        a = W.render_aerial(t, W.AerialGeoref(0.2, 0.0, 0.0, 128, 128))
        b = W.render_aerial(t, W.AerialGeoref(0.2, 1.0, 0.0, 128, 128))
        np.testing.assert_allclose(b[:, :, :-5], a[:, :, 5:], atol=1e-6)

    def test_matches_per_pixel_oracle(self):
        t = W.gen_texture(HIGHWAY, 17)
        geo = W.AerialGeoref(0.2, 4.37, -2.21, 128, 128)  # deliberately unsnapped
        img = W.render_aerial(t, geo)
        g = np.random.default_rng(18)
        for _ in range(60):
            u, v = int(g.integers(128)), int(g.integers(128))
            x, y = aerial_pixel_to_world(float(u), float(v), geo)
            expect = t.sample(np.asarray(x), np.asarray(y))
            np.testing.assert_allclose(img[:, v, u], expect.ravel(), atol=1e-6)

    def test_out_of_bounds_crop_rejected(self):
        t = W.gen_texture(RURAL, 19)
        geo = W.AerialGeoref(0.2, 99.0, 0.0, 128, 128)
        with pytest.raises(ValueError, match="outside texture bounds"):
            W.render_aerial(t, geo)


class TestRenderGround:
    def test_sky_above_horizon(self):
        t = W.gen_texture(URBAN, 20)
        img = W.render_ground(t, Pose(0, 0, 0))
        cy = W.DEFAULT_INTR.cy
        np.testing.assert_array_equal(img[:, : int(cy) + 1, :], np.float32(W.SKY_VALUE))
        assert not np.all(img[:, int(cy) + 2 :, :] == np.float32(W.SKY_VALUE))

    def test_warp_consistency_keystone(self):
        # warping the aerial crop to the ground view at the same pose must
        # reproduce the ground image's below-horizon in-crop region
        from fedcvgl import tensor as T
        from fedcvgl.geometry import build_warp_grid

        t = W.gen_texture(RURAL, 21)
        gt = Pose(1.7, 0.4, 0.9)
        sample = W.make_sample(t, gt, 22)
        coords, horizon_ok = build_warp_grid(gt, sample.intr, sample.georef, 1, (64, 64))
        warped, in_crop = T.grid_sample_bilinear(T.Tensor(sample.aerial), coords)
        mask = horizon_ok & in_crop
        assert mask.sum() > 500
        diff = np.abs(warped.data - sample.ground)[:, mask]
        assert diff.max() < 1e-4

    def test_opposite_headings_see_disjoint_ground(self):
        t = W.gen_texture(URBAN, 23)
        pose = Pose(0, 0, 0.2)
        flipped = Pose(0, 0, 0.2 + np.pi)
        vv, uu = np.meshgrid(np.arange(64, dtype=float), np.arange(64, dtype=float), indexing="ij")
        xa, ya, va = ground_pixel_to_world(uu, vv, pose, W.DEFAULT_INTR)
        xb, yb, vb = ground_pixel_to_world(uu, vv, flipped, W.DEFAULT_INTR)
        # world footprints lie in opposite half-planes through the camera
        fwd = np.array([-np.sin(0.2), np.cos(0.2)])
        da = (xa[va] * fwd[0] + ya[va] * fwd[1])
        db = (xb[vb] * fwd[0] + yb[vb] * fwd[1])
        assert da.min() > 0
        assert db.max() < 0


class TestInitPose:
    def test_bounds_respected(self):
        gt = Pose(3.0, -2.0, 0.5)
        for seed in range(10000):
            p = W.sample_init_pose(gt, seed)
            assert abs(p.x_m - gt.x_m) <= 5.0
            assert abs(p.y_m - gt.y_m) <= 5.0
            assert abs(np.arctan2(np.sin(p.yaw_rad - gt.yaw_rad), np.cos(p.yaw_rad - gt.yaw_rad))) <= np.deg2rad(10.0) + 1e-12

    def test_zero_width_is_identity(self):
        gt = Pose(3.0, -2.0, 0.5)
        p = W.sample_init_pose(gt, 1, bounds=(0.0, 0.0, 0.0))
        assert (p.x_m, p.y_m, p.yaw_rad) == (gt.x_m, gt.y_m, gt.yaw_rad)

    def test_empirical_mean_near_zero(self):
        gt = Pose(0.0, 0.0, 0.0)
        n = 4000
        d = np.array([[W.sample_init_pose(gt, s).x_m, W.sample_init_pose(gt, s).y_m,
                       W.sample_init_pose(gt, s).yaw_rad] for s in range(n)])
        sigma = np.array([5.0, 5.0, np.deg2rad(10.0)]) / np.sqrt(3)
        bound = 3 * sigma / np.sqrt(n)
        assert np.all(np.abs(d.mean(axis=0)) < bound)

    def test_deterministic(self):
        gt = Pose(1.0, 1.0, 1.0)
        a = W.sample_init_pose(gt, 77)
        b = W.sample_init_pose(gt, 77)
        assert (a.x_m, a.y_m, a.yaw_rad) == (b.x_m, b.y_m, b.yaw_rad)


class TestDatasets:
    def test_cardinality_and_manifest(self, tmp_path):
        m = W.make_client_datasets(n_clients=2, per_client=3, test_count=4, seed=31,
                                   out_dir=tmp_path / "d")
        files = list((tmp_path / "d").rglob("*.cvgt"))
        assert len(files) == 2 * (2 * 3) + 2 * 4
        assert m["test"]["count"] == 4
        on_disk = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert len(on_disk["clients"]) == 2
        assert sum(c["count"] for c in on_disk["clients"]) == 6

    def test_no_texture_seed_shared_with_test(self, tmp_path):
        m = W.make_client_datasets(2, 2, 3, seed=32, out_dir=tmp_path / "d")
        client_seeds = {c["texture_seed"] for c in m["clients"]}
        test_seeds = {p["texture_seed"] for p in m["test"]["parts"]}
        assert client_seeds.isdisjoint(test_seeds)

    def test_env_round_robin(self, tmp_path):
        m = W.make_client_datasets(4, 1, 3, seed=33, out_dir=tmp_path / "d")
        assert [c["env"] for c in m["clients"]] == [
            "urban_grid", "rural_blobs", "highway_stripes", "urban_grid"
        ]

    def test_loaders_round_trip(self, tmp_path):
        W.make_client_datasets(2, 3, 3, seed=34, out_dir=tmp_path / "d")
        ds = W.load_client_dataset(tmp_path / "d", 1)
        assert len(ds) == 3
        assert ds.env == "rural_blobs"
        s = ds.samples[0]
        assert s.aerial.shape == (3, 128, 128)
        assert s.ground.shape == (3, 64, 64)
        assert s.aerial.min() >= 0 and s.aerial.max() <= 1
        test = W.load_test_dataset(tmp_path / "d")
        assert len(test) == 3

    def test_generation_deterministic(self, tmp_path):
        W.make_client_datasets(1, 2, 1, seed=35, out_dir=tmp_path / "a")
        W.make_client_datasets(1, 2, 1, seed=35, out_dir=tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.cvgt")):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_keystone_on_generated_samples(self, tmp_path):
        from fedcvgl import solver as S
        from fedcvgl.features import identity_pyramid

        W.make_client_datasets(3, 4, 2, seed=36, out_dir=tmp_path / "d")
        for cid in range(3):
            for s in W.load_client_dataset(tmp_path / "d", cid).samples:
                e, mask, _ = S.residual(2, s.gt_pose, identity_pyramid(s.aerial),
                                        identity_pyramid(s.ground), s.intr, s.georef)
                assert float(np.abs(e.data).max()) < 1e-4

    def test_external_loader_stub(self):
        with pytest.raises(NotImplementedError):
            W.load_external_dataset("/nope")
