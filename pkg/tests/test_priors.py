import numpy as np
import pytest

from wxadapt import priors
from wxadapt import weathersim as ws
from wxadapt.priors import PriorMap


def brute_force_dark_channel(image, patch):
    """Independent double-loop window minimum with edge clamping."""
    H, W, _ = image.shape
    r = patch // 2
    rgb_min = image.min(axis=2)
    out = np.empty((H, W), dtype=np.float32)
    for i in range(H):
        for j in range(W):
            i0, i1 = max(0, i - r), min(H, i + r + 1)
            j0, j1 = max(0, j - r), min(W, j + r + 1)
            out[i, j] = rgb_min[i0:i1, j0:j1].min()
    return out


class TestDarkChannel:
    def test_all_white(self):
        img = np.ones((6, 6, 3), dtype=np.float32)
        np.testing.assert_array_equal(priors.dark_channel(img, 3), np.ones((6, 6)))

    def test_zero_channel_everywhere(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        kill = rng.integers(0, 3, (8, 8))
        for c in range(3):
            img[:, :, c][kill == c] = 0.0
        np.testing.assert_array_equal(priors.dark_channel(img, 3), np.zeros((8, 8)))

    def test_single_dark_pixel_spreads_to_window(self):
        img = np.full((5, 5, 3), 0.8, dtype=np.float32)
        img[2, 2] = 0.0
        dark = priors.dark_channel(img, 3)
        expected = np.full((5, 5), 0.8, dtype=np.float32)
        expected[1:4, 1:4] = 0.0
        np.testing.assert_array_equal(dark, expected)
        np.testing.assert_array_equal(dark, brute_force_dark_channel(img, 3))

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (11, 9, 3)).astype(np.float32)
        for patch in (1, 3, 5):
            np.testing.assert_array_equal(
                priors.dark_channel(img, patch), brute_force_dark_channel(img, patch)
            )

    def test_even_patch_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            priors.dark_channel(np.zeros((4, 4, 3)), 4)

    def test_monotone_in_brightness(self):
        rng = np.random.default_rng(2)
        for seed in range(10):
            r = np.random.default_rng(seed)
            img = r.uniform(0, 0.9, (7, 7, 3)).astype(np.float32)
            base = priors.dark_channel(img, 3)
            bumped = img.copy()
            i, j, c = r.integers(0, 7), r.integers(0, 7), r.integers(0, 3)
            bumped[i, j, c] = min(1.0, bumped[i, j, c] + 0.1)
            assert np.all(priors.dark_channel(bumped, 3) >= base)


class TestAtmosphericLight:
    def test_uniform_gray(self):
        img = np.full((20, 20, 3), 0.8, dtype=np.float32)
        dark = priors.dark_channel(img, 3)
        light = priors.estimate_atmospheric_light(img, dark)
        np.testing.assert_allclose(light, [0.8, 0.8, 0.8], atol=1e-6)

    def test_white_region_dominates(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0.1, 0.4, (40, 40, 3)).astype(np.float32)
        # region larger than the patch so its interior dark channel stays 1
        img[:6, :6] = 1.0
        dark = priors.dark_channel(img, 3)
        light = priors.estimate_atmospheric_light(img, dark)
        np.testing.assert_allclose(light, [1.0, 1.0, 1.0], atol=0.02)

    def test_haze_roundtrip_recovers_light(self):
        cfg = ws.SynthConfig(out_dir="x")
        rng = np.random.default_rng(4)
        spec = ws.random_scene_spec(cfg, rng)
        clean, _, _, depth = ws.render_scene(spec)
        target = np.array([0.9, 0.9, 0.9], dtype=np.float32)
        hazy, _ = ws.apply_haze(clean, np.full_like(depth, 6.0), 1.5, target)
        dark = priors.dark_channel(hazy)
        light = priors.estimate_atmospheric_light(hazy, dark)
        np.testing.assert_allclose(light, target, atol=0.05)


class TestTransmission:
    def test_dark_scene_gives_one(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0.2, 0.9, (10, 10, 3)).astype(np.float32)
        img[:, :, 0] = 0.0  # every pixel has a zero channel
        t = priors.estimate_transmission(img, np.array([0.8, 0.8, 0.8]), patch=3)
        np.testing.assert_allclose(t.plane(), 1.0, atol=1e-6)

    def test_image_equal_to_light_hits_floor(self):
        img = np.full((10, 10, 3), 0.85, dtype=np.float32)
        t = priors.estimate_transmission(
            img, np.array([0.85, 0.85, 0.85]), omega=0.95, patch=3
        )
        np.testing.assert_allclose(t.plane(), 0.05, atol=1e-6)

    def test_omega_range(self):
        with pytest.raises(ValueError, match="omega"):
            priors.estimate_transmission(
                np.zeros((4, 4, 3)), np.array([0.5, 0.5, 0.5]), omega=0.0
            )

    def test_anti_monotone_in_dark_channel(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(0.1, 0.9, (9, 9, 3)).astype(np.float32)
        light = np.array([0.9, 0.9, 0.9], dtype=np.float32)
        t1 = priors.estimate_transmission(img, light, patch=3)
        brighter = np.clip(img + 0.05, 0, 1)
        t2 = priors.estimate_transmission(brighter, light, patch=3)
        # brighter image -> larger dark channel -> smaller (or floored) t
        assert np.all(t2.plane() <= t1.plane() + 1e-6)

    def test_roundtrip_correlation(self):
        cfg = ws.SynthConfig(out_dir="x")
        est_all, gt_all = [], []
        for seed in range(12):
            rng = np.random.default_rng(100 + seed)
            spec = ws.random_scene_spec(cfg, rng)
            clean, _, _, depth = ws.render_scene(spec)
            beta = float(rng.uniform(*cfg.beta_range))
            hazy, gt = ws.apply_haze(clean, depth, beta, np.array([0.85, 0.85, 0.85]))
            est = priors.estimate_prior(hazy, "haze")
            est_all.append(est.plane().ravel())
            gt_all.append(gt.plane().ravel())
        r = np.corrcoef(np.concatenate(est_all), np.concatenate(gt_all))[0, 1]
        assert r >= 0.7


class TestRefineTransmission:
    def test_constant_map_unchanged(self):
        rng = np.random.default_rng(7)
        guide = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        t = PriorMap(np.full((32, 32), 0.6, dtype=np.float32), kind="haze")
        refined = priors.refine_transmission(t, guide, radius=4, eps=1e-3)
        np.testing.assert_allclose(refined.plane(), 0.6, atol=1e-6)

    def test_large_eps_is_double_box_blur(self):
        rng = np.random.default_rng(8)
        guide = rng.uniform(0, 1, (24, 24, 3)).astype(np.float32)
        vals = rng.uniform(0.1, 1.0, (24, 24)).astype(np.float32)
        t = PriorMap(vals, kind="haze")
        refined = priors.refine_transmission(t, guide, radius=3, eps=1e9)
        # with eps -> inf the filter ignores the guide and reduces to the
        # box-blurred local mean (applied twice by construction)
        expected = np.clip(priors.box_filter(priors.box_filter(vals, 3), 3), 0.05, 1.0)
        np.testing.assert_allclose(refined.plane(), expected, atol=1e-4)

    def test_keeps_guided_edge_sharper_than_box_blur(self):
        H = W = 40
        guide = np.zeros((H, W, 3), dtype=np.float32)
        guide[:, W // 2 :] = 0.9
        vals = np.full((H, W), 0.3, dtype=np.float32)
        vals[:, W // 2 :] = 0.9
        refined = priors.refine_transmission(PriorMap(vals, kind="haze"), guide,
                                             radius=5, eps=1e-4)
        blurred = priors.box_filter(vals, 5)

        def edge_width(row, lo=0.4, hi=0.8):
            inside = np.nonzero((row > lo) & (row < hi))[0]
            return len(inside)

        assert edge_width(refined.plane()[H // 2]) < edge_width(blurred[H // 2])


class TestRainResidue:
    def test_constant_image_zero(self):
        img = np.full((16, 16, 3), 0.5, dtype=np.float32)
        res = priors.extract_rain_residue(img)
        np.testing.assert_array_equal(res.values, 0.0)

    def test_roundtrip_correlation(self):
        cfg = ws.SynthConfig(out_dir="x", weather="rain")
        est_all, gt_all = [], []
        for seed in range(12):
            rng = np.random.default_rng(200 + seed)
            spec = ws.random_scene_spec(cfg, rng)
            clean, _, _, _ = ws.render_scene(spec)
            mask = ws.gen_rain_mask(clean.shape[:2], 0.3, 90.0, 9, seed=seed)
            rainy, gt = ws.apply_rain(clean, mask, 0.7)
            est = priors.extract_rain_residue(rainy)
            est_all.append(est.values.ravel())
            gt_all.append(gt.values.ravel())
        r = np.corrcoef(np.concatenate(est_all), np.concatenate(gt_all))[0, 1]
        assert r >= 0.6

    def test_clean_scene_residue_small(self):
        cfg = ws.SynthConfig(out_dir="x")
        means = []
        for seed in range(8):
            rng = np.random.default_rng(300 + seed)
            spec = ws.random_scene_spec(cfg, rng)
            clean, _, _, _ = ws.render_scene(spec)
            means.append(priors.extract_rain_residue(clean).values.mean())
        assert max(means) <= 0.05


class TestDownscale:
    def test_constant_preserved(self):
        p = PriorMap(np.full((32, 32), 0.7, dtype=np.float32))
        for level in (1, 3):
            out = priors.downscale_prior(p, level)
            np.testing.assert_allclose(out.values, 0.7, atol=1e-7)
            assert out.scale_level == level

    def test_checkerboard_one_level(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        p = PriorMap(board.astype(np.float32))
        out = priors.downscale_prior(p, 1)
        np.testing.assert_allclose(out.values[:, :, 0], np.full((2, 2), 0.5))

    def test_blocks_match_brute_force(self):
        rng = np.random.default_rng(9)
        vals = rng.uniform(0, 1, (64, 64)).astype(np.float32)
        out = priors.downscale_prior(PriorMap(vals), 4)
        assert out.values.shape == (4, 4, 1)
        for i in range(4):
            for j in range(4):
                block = vals[i * 16 : (i + 1) * 16, j * 16 : (j + 1) * 16]
                assert abs(out.values[i, j, 0] - block.mean()) < 1e-6

    def test_mean_preserved_power_of_two(self):
        rng = np.random.default_rng(10)
        vals = rng.uniform(0, 1, (32, 32)).astype(np.float32)
        p = PriorMap(vals)
        for level in (1, 2, 5):
            out = priors.downscale_prior(p, level)
            assert abs(out.values.mean() - vals.mean()) < 1e-6

    def test_odd_dims_edge_padded(self):
        vals = np.arange(9, dtype=np.float32).reshape(3, 3) / 10.0
        out = priors.downscale_prior(PriorMap(vals), 1)
        assert out.values.shape == (2, 2, 1)

    def test_upscale_rejected(self):
        p = priors.downscale_prior(PriorMap(np.zeros((8, 8))), 2)
        with pytest.raises(ValueError, match="upscale"):
            priors.downscale_prior(p, 1)

    def test_vanishing_map_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            priors.downscale_prior(PriorMap(np.zeros((2, 2))), 8)


class TestPriorMapInvariants:
    def test_values_clamped(self):
        p = PriorMap(np.array([[-0.5, 1.5], [0.3, 0.7]], dtype=np.float32))
        assert p.values.min() >= 0.0 and p.values.max() <= 1.0

    def test_kind_checked(self):
        with pytest.raises(ValueError, match="kind"):
            PriorMap(np.zeros((2, 2)), kind="sleet")

    def test_estimators_produce_valid_maps(self):
        rng = np.random.default_rng(11)
        img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        for kind in ("haze", "rain", "snow"):
            p = priors.estimate_prior(img, kind)
            assert p.values.min() >= 0.0 and p.values.max() <= 1.0
            assert p.values.shape == (16, 16, 1)
            assert p.kind == kind
            assert p.scale_level == 0


class TestPriorForSample:
    def _sample(self, with_gt):
        rng = np.random.default_rng(12)
        cfg = ws.SynthConfig(out_dir="x")
        spec = ws.random_scene_spec(cfg, rng)
        clean, boxes, labels, depth = ws.render_scene(spec)
        gt = None
        image = clean
        if with_gt:
            image, gt = ws.apply_haze(clean, depth, 0.6, np.array([0.85, 0.85, 0.85]))
        return ws.DetectionSample(
            image=image, boxes=boxes, labels=labels,
            domain="target" if with_gt else "source",
            gt_prior=gt, est_prior=None,
        )

    def test_gt_returns_stored_map(self):
        s = self._sample(with_gt=True)
        p = priors.prior_for_sample(s, "haze", "gt")
        assert p is s.gt_prior

    def test_gt_missing_raises(self):
        s = self._sample(with_gt=False)
        with pytest.raises(ValueError, match="ground truth"):
            priors.prior_for_sample(s, "haze", "gt")

    def test_estimated_on_clean_rain_near_zero(self):
        s = self._sample(with_gt=False)
        p = priors.prior_for_sample(s, "rain", "estimated")
        assert p.values.mean() <= 0.05

    def test_estimated_vs_gt_correlated(self):
        cfg = ws.SynthConfig(out_dir="x", weather="rain")
        est_all, gt_all = [], []
        for seed in range(10):
            rng = np.random.default_rng(400 + seed)
            spec = ws.random_scene_spec(cfg, rng)
            clean, boxes, labels, _ = ws.render_scene(spec)
            mask = ws.gen_rain_mask(clean.shape[:2], 0.3, 95.0, 10, seed=seed)
            rainy, gt = ws.apply_rain(clean, mask, 0.7)
            s = ws.DetectionSample(image=rainy, boxes=boxes, labels=labels,
                                   domain="target", gt_prior=gt)
            est = priors.prior_for_sample(s, "rain", "estimated")
            est_all.append(est.values.ravel())
            gt_all.append(gt.values.ravel())
        r = np.corrcoef(np.concatenate(est_all), np.concatenate(gt_all))[0, 1]
        assert r >= 0.6


class TestFileFormats:
    def test_pri_roundtrip(self, tmp_path):
        rng = np.random.default_rng(13)
        p = PriorMap(rng.uniform(0, 1, (7, 5)).astype(np.float32), kind="rain",
                     scale_level=2)
        path = tmp_path / "x.pri"
        priors.save_pri(path, p)
        q = priors.load_pri(path)
        np.testing.assert_array_equal(p.values, q.values)
        assert q.kind == "rain" and q.scale_level == 2

    def test_pri_magic(self, tmp_path):
        path = tmp_path / "x.pri"
        path.write_bytes(b"JUNK" + b"\x00" * 20)
        with pytest.raises(ValueError, match="PRI1"):
            priors.load_pri(path)

    def test_pgm_header_and_payload(self, tmp_path):
        vals = np.array([[0.0, 0.5], [1.0, 0.25]], dtype=np.float32)
        path = tmp_path / "x.pgm"
        priors.save_pgm(path, vals)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        assert blob[-4:] == bytes([0, 128, 255, 64])
