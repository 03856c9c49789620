"""Metrics against closed forms and direct reference implementations."""

import numpy as np
import pytest

from dvae import data as D
from dvae import metrics as M
from dvae.nn import PerceptualExtractor


class TestPsnr:
    def test_identical_images_hit_cap(self):
        img = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
        assert M.psnr(img, img) == 99.0

    def test_half_range_offset_closed_form(self):
        a = np.full((3, 8, 8), -1.0)
        b = np.zeros((3, 8, 8))  # unit-range gap of 0.5 -> MSE 0.25
        assert abs(M.psnr(a, b) - 10 * np.log10(4.0)) < 1e-9

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-1, 1, (3, 8, 8))
        b = rng.uniform(-1, 1, (3, 8, 8))
        mse = (((a + 1) / 2 - (b + 1) / 2) ** 2).mean()
        assert abs(M.psnr(a, b) - 10 * np.log10(1 / mse)) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(-1, 1, (3, 8, 8)), rng.uniform(-1, 1, (3, 8, 8))
        assert M.psnr(a, b) == M.psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            M.psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


def reference_ssim(a, b, window=8):
    """Independent sliding-window implementation with explicit loops."""
    ga = ((np.asarray(a, dtype=np.float64) + 1) / 2).mean(axis=0)
    gb = ((np.asarray(b, dtype=np.float64) + 1) / 2).mean(axis=0)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = ga.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            pa = ga[i:i + window, j:j + window].ravel()
            pb = gb[i:i + window, j:j + window].ravel()
            ma, mb = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_identical_images_equal_one(self):
        img = np.random.default_rng(3).uniform(-1, 1, (3, 16, 16))
        assert M.ssim(img, img) == 1.0

    def test_negation_is_negative(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(-0.9, 0.9, (3, 16, 16))
        img -= img.mean()
        assert M.ssim(img, -img) < 0

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-1, 1, (3, 12, 12))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), -1, 1)
        assert abs(M.ssim(a, b) - reference_ssim(a, b)) < 1e-10

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="window"):
            M.ssim(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))


class TestRfidProxy:
    @pytest.fixture(scope="class")
    def sets(self):
        # halves of 192: the covariance estimate in the 64-dim feature space
        # needs n well above d for a tight self-distance floor
        ds = D.gen_synthetic(D.SyntheticSpec(count=384, seed=11))
        return ds.images[:192], ds.images[192:]

    def test_self_distance_near_zero(self, sets):
        assert M.rfid_proxy(sets[0], sets[0]) < 1e-4

    def test_symmetry(self, sets):
        d_ab = M.rfid_proxy(sets[0], sets[1])
        d_ba = M.rfid_proxy(sets[1], sets[0])
        assert abs(d_ab - d_ba) < 1e-6

    def test_disjoint_halves_define_noise_floor(self, sets):
        floor = M.rfid_proxy(sets[0], sets[1])
        rng = np.random.default_rng(12)
        noise = rng.uniform(-1, 1, sets[0].shape).astype(np.float32)
        assert M.rfid_proxy(sets[0], noise) > 10 * floor

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            M.rfid_proxy(np.zeros((1, 3, 8, 8)), np.zeros((4, 3, 8, 8)))

    def test_extractor_deterministic(self):
        imgs = np.random.default_rng(13).uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32)
        f1 = PerceptualExtractor().pooled_features(imgs)
        f2 = PerceptualExtractor().pooled_features(imgs)
        assert np.array_equal(f1, f2)


class TestPca:
    def test_rank_one_latents(self):
        rng = np.random.default_rng(14)
        direction = rng.standard_normal(6)
        coef = rng.standard_normal((4, 1, 8, 8))
        lat = coef * direction[None, :, None, None]
        proj = M.fit_pca(lat)
        total = proj.explained_variance.sum()
        assert proj.explained_variance[0] / total > 0.99

    def test_basis_orthonormal_and_variance_ordered(self):
        rng = np.random.default_rng(15)
        lat = rng.standard_normal((4, 6, 8, 8))
        proj = M.fit_pca(lat)
        gram = proj.basis.T @ proj.basis
        assert np.max(np.abs(gram - np.eye(proj.basis.shape[1]))) < 1e-4
        ev = proj.explained_variance
        assert np.all(ev[:-1] >= ev[1:] - 1e-12)

    def test_full_rank_roundtrip_lossless(self):
        rng = np.random.default_rng(16)
        lat = rng.standard_normal((2, 4, 8, 8))
        proj = M.fit_pca(lat)
        x = lat.transpose(0, 2, 3, 1).reshape(-1, 4)
        coords = (x - proj.mean) @ proj.basis
        back = coords @ proj.basis.T + proj.mean
        assert np.max(np.abs(back - x)) < 1e-4

    def test_reused_basis_and_rgb_shape(self):
        rng = np.random.default_rng(17)
        lat_a = rng.standard_normal((3, 4, 8, 8))
        lat_b = rng.standard_normal((3, 4, 8, 8))
        proj, rgb_a = M.pca_project(lat_a)
        proj_b, rgb_b = M.pca_project(lat_b, projection=proj)
        assert proj_b is proj
        assert rgb_a.shape == (3, 3, 8, 8)
        assert rgb_b.min() >= 0 and rgb_b.max() <= 1

    def test_degenerate_covariance_warns(self):
        lat = np.zeros((2, 4, 4, 4))
        with pytest.warns(UserWarning, match="rank"):
            M.fit_pca(lat)


def _write_csv(path, rows, header):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(str(v) for v in r) + "\n")


class TestEmitCurves:
    def test_single_input_identity_plus_smooth(self, tmp_path):
        p = tmp_path / "runA.csv"
        _write_csv(p, [(0, 1.0), (10, 2.0), (20, 4.0)], ["step", "loss"])
        out = tmp_path / "merged.csv"
        M.emit_curves([p], out)
        rows = M.read_metrics_csv(out)
        assert len(rows) == 3
        assert [float(r["runA.loss"]) for r in rows] == [1.0, 2.0, 4.0]
        assert abs(float(rows[1]["runA.loss.smooth"]) - (0.9 * 1.0 + 0.1 * 2.0)) < 1e-9

    def test_two_runs_merge_on_shared_steps(self, tmp_path):
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        _write_csv(pa, [(0, 1.0), (10, 2.0), (20, 3.0)], ["step", "loss"])
        _write_csv(pb, [(0, 5.0), (10, 6.0), (20, 7.0)], ["step", "loss"])
        out = tmp_path / "m.csv"
        M.emit_curves([pa, pb], out)
        rows = M.read_metrics_csv(out)
        assert len(rows) == 3
        assert float(rows[2]["b.loss"]) == 7.0

    def test_constant_series_smooths_to_itself(self, tmp_path):
        p = tmp_path / "c.csv"
        _write_csv(p, [(i, 2.5) for i in range(5)], ["step", "loss"])
        out = tmp_path / "m.csv"
        M.emit_curves([p], out)
        for r in M.read_metrics_csv(out):
            assert float(r["c.loss.smooth"]) == 2.5

    def test_missing_step_column_rejected(self, tmp_path):
        p = tmp_path / "x.csv"
        _write_csv(p, [(0, 1.0)], ["iter", "loss"])
        with pytest.raises(ValueError, match="step"):
            M.emit_curves([p], tmp_path / "m.csv")
