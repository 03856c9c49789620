"""Synthetic dataset generation, PPM codec, and batch iteration."""

import numpy as np
import pytest

from dvae import data as D


class TestSynthetic:
    def test_uniform_color_is_exactly_constant(self):
        ds = D.gen_synthetic(D.SyntheticSpec(count=16, seed=3))
        for img, label in zip(ds.images, ds.labels):
            if label == 0:
                spans = img.max(axis=(1, 2)) - img.min(axis=(1, 2))
                assert np.array_equal(spans, np.zeros(3, dtype=np.float32))

    def test_same_spec_bitwise_identical(self):
        spec = D.SyntheticSpec(count=24, seed=9)
        a, b = D.gen_synthetic(spec), D.gen_synthetic(spec)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_class_balance(self):
        ds = D.gen_synthetic(D.SyntheticSpec(count=80, seed=0))
        counts = np.bincount(ds.labels, minlength=8)
        assert np.all(counts == 10)

    def test_values_in_range(self):
        ds = D.gen_synthetic(D.SyntheticSpec(count=32, seed=1))
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            D.gen_synthetic(D.SyntheticSpec(count=0))


class TestPpm:
    def test_hand_encoded_ppm_reads_exactly(self, tmp_path):
        # 2x2 image, known bytes; normalization is v/255*2-1
        raw = bytes([0, 0, 0, 255, 255, 255, 255, 0, 0, 0, 0, 255])
        p = tmp_path / "tiny.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + raw)
        img = D.ppm_read(p)
        assert img.shape == (3, 2, 2)
        assert np.allclose(img[:, 0, 0], [-1, -1, -1])
        assert np.allclose(img[:, 0, 1], [1, 1, 1])
        assert np.allclose(img[:, 1, 0], [1, -1, -1])
        assert np.allclose(img[:, 1, 1], [-1, -1, 1])

    def test_header_comments_ok(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# a comment\n1 1\n255\n\xff\x00\x7f")
        img = D.ppm_read(p)
        assert img.shape == (3, 1, 1)

    def test_maxval_rejected(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="maxval"):
            D.ppm_read(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "short.ppm"
        p.write_bytes(b"P6\n2 2\n255\n\x00\x00")
        with pytest.raises(ValueError, match="short.ppm"):
            D.ppm_read(p)

    def test_write_read_roundtrip_after_quantization(self, tmp_path):
        rng = np.random.default_rng(4)
        img = rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32)
        p = tmp_path / "r.ppm"
        D.ppm_write(p, img)
        back = D.ppm_read(p)
        assert np.max(np.abs(back - img)) <= 1.01 / 127.5
        D.ppm_write(tmp_path / "r2.ppm", back)
        assert (tmp_path / "r2.ppm").read_bytes() == p.read_bytes()


class TestFolder:
    def test_folder_roundtrip_with_labels(self, tmp_path):
        ds = D.gen_synthetic(D.SyntheticSpec(count=8, seed=5))
        for i in range(8):
            D.ppm_write(tmp_path / f"img_{i:03d}.ppm", ds.images[i])
        with open(tmp_path / "labels.csv", "w") as f:
            for i in range(8):
                f.write(f"img_{i:03d}.ppm,{ds.labels[i]}\n")
        loaded = D.load_image_folder(tmp_path, image_size=32)
        assert np.array_equal(loaded.labels, ds.labels)
        assert np.max(np.abs(loaded.images - ds.images)) <= 1.01 / 127.5

    def test_missing_labels_warns_and_zeroes(self, tmp_path):
        D.ppm_write(tmp_path / "a.ppm", np.zeros((3, 4, 4), dtype=np.float32))
        with pytest.warns(UserWarning, match="labels.csv"):
            ds = D.load_image_folder(tmp_path, image_size=4)
        assert ds.labels.tolist() == [0]

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no .ppm"):
            D.load_image_folder(tmp_path)

    def test_nearest_resize(self, tmp_path):
        img = np.zeros((3, 2, 2), dtype=np.float32)
        img[:, 0, 0] = 1.0
        D.ppm_write(tmp_path / "q.ppm", img)
        with pytest.warns(UserWarning):
            ds = D.load_image_folder(tmp_path, image_size=4)
        assert np.allclose(ds.images[0][:, :2, :2], 1.0)


class TestBatchIter:
    def test_fixed_seed_identical_sequences(self):
        ds = D.gen_synthetic(D.SyntheticSpec(count=12, seed=6))
        a = D.batch_iter(ds, 4, seed=1)
        b = D.batch_iter(ds, 4, seed=1)
        for _ in range(6):
            xa, la = next(a)
            xb, lb = next(b)
            assert np.array_equal(xa, xb) and np.array_equal(la, lb)

    def test_batches_per_epoch_and_tail_drop(self):
        ds = D.gen_synthetic(D.SyntheticSpec(count=10, seed=7))
        it = D.batch_iter(ds, 4, seed=0)
        seen = []
        for _ in range(2):  # one epoch = floor(10/4) = 2 batches
            x, _ = next(it)
            assert x.shape[0] == 4
            seen.extend(x.reshape(4, -1).sum(axis=1).tolist())
        # within one epoch no item repeats (sums act as content fingerprints)
        assert len(set(np.round(seen, 5))) == 8

    def test_oversized_batch_rejected(self):
        ds = D.gen_synthetic(D.SyntheticSpec(count=4, seed=8))
        with pytest.raises(ValueError):
            next(D.batch_iter(ds, 8, seed=0))
