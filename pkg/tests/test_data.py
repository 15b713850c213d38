import gzip
import math
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stochhf.data import (Dataset, IdxDimensionError, IdxMagicError, IdxTruncatedError, batch_iter,
                          curvature_slice, load_csv, load_idx_dataset, log_count_transform, one_hot,
                          parse_idx, read_idx, standardize, synth_blobs, synth_curves, write_idx)

from .conftest import MNIST_DIR


def label_file(tmp_path, payload=(7, 2, 1), count=None):
    path = tmp_path / "labels.idx"
    count = len(payload) if count is None else count
    path.write_bytes(struct.pack(">II", 0x801, count) + bytes(payload))
    return path


class TestIdx:
    def test_hand_built_label_file(self, tmp_path):
        out = read_idx(label_file(tmp_path))
        np.testing.assert_array_equal(out, [7, 2, 1])
        assert out.dtype == np.int64

    def test_images_are_scaled(self, tmp_path):
        path = tmp_path / "img.idx"
        path.write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 255, 51, 102]))
        out = read_idx(path)
        assert out.shape == (1, 2, 2)
        np.testing.assert_allclose(out[0], [[0.0, 1.0], [0.2, 0.4]])

    def test_truncated_payload(self, tmp_path):
        with pytest.raises(IdxTruncatedError):
            read_idx(label_file(tmp_path, payload=(1, 2), count=3))

    def test_truncated_header(self):
        with pytest.raises(IdxTruncatedError):
            parse_idx(struct.pack(">I", 0x803) + b"\x00\x00")
        with pytest.raises(IdxTruncatedError):
            parse_idx(b"\x00\x00")

    def test_bad_magic(self):
        with pytest.raises(IdxMagicError):
            parse_idx(struct.pack(">II", 0x0D01, 1) + b"\x01")
        with pytest.raises(IdxMagicError):
            parse_idx(struct.pack(">II", 0x01000801, 1) + b"\x01")

    def test_dimension_overflow(self):
        with pytest.raises(IdxDimensionError):
            parse_idx(struct.pack(">IIIII", 0x804, 2**31, 2**31, 16, 16))

    def test_errors_are_distinct(self):
        kinds = {IdxMagicError, IdxTruncatedError, IdxDimensionError}
        assert len(kinds) == 3
        assert all(issubclass(k, ValueError) for k in kinds)

    def test_gzip(self, tmp_path):
        path = tmp_path / "labels.idx.gz"
        with gzip.open(path, "wb") as f:
            f.write(struct.pack(">II", 0x801, 2) + bytes([4, 5]))
        np.testing.assert_array_equal(read_idx(path), [4, 5])

    def test_write_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            write_idx(tmp_path / "x.idx", np.array([256]))

    def test_label_count_mismatch(self, tmp_path):
        img = tmp_path / "img.idx"
        write_idx(img, np.zeros((3, 2, 2), dtype=np.uint8))
        lab = tmp_path / "lab.idx"
        write_idx(lab, np.array([1, 2], dtype=np.uint8))
        with pytest.raises(IdxDimensionError):
            load_idx_dataset(img, lab)

    def test_dataset_from_fixture(self, tmp_path):
        img = tmp_path / "img.idx"
        lab = tmp_path / "lab.idx"
        write_idx(img, np.arange(24, dtype=np.uint8).reshape(6, 2, 2))
        write_idx(lab, np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8))
        ds = load_idx_dataset(img, lab, k=3, limit=4)
        assert ds.inputs.shape == (4, 4)
        np.testing.assert_array_equal(ds.targets.sum(axis=1), 1.0)
        ae = load_idx_dataset(img, task="autoencode")
        assert ae.targets is ae.inputs

    @pytest.mark.skipif(not os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")),
                        reason="MNIST files not available")
    def test_mnist_header(self):
        images = read_idx(os.path.join(MNIST_DIR, "train-images-idx3-ubyte"))
        assert images.shape == (60000, 28, 28)
        assert 0.0 <= images.min() and images.max() == 1.0


@settings(max_examples=40, deadline=None)
@given(arr=hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=4, max_side=6)))
def test_idx_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("idx") / "a.idx"
    write_idx(path, arr)
    raw = parse_idx(path.read_bytes())
    assert raw.shape == arr.shape
    np.testing.assert_array_equal(raw, arr)
    # three-dimensional payloads carry the image magic and are read back scaled
    scale = 255.0 if arr.ndim == 3 else 1.0
    np.testing.assert_array_equal(np.rint(read_idx(path) * scale), arr)


class TestStandardize:
    def test_hand_case(self):
        tr, te, st_ = standardize(np.array([[0.0], [2.0]]), np.array([[4.0]]))
        np.testing.assert_array_equal(tr[:, 0], [-1.0, 1.0])
        assert te[0, 0] == 3.0
        assert st_.mean[0] == 1.0 and st_.std[0] == 1.0

    def test_constant_feature_zeroed(self):
        tr, te, _ = standardize(np.array([[5.0, 1.0], [5.0, 3.0]]), np.array([[7.0, 2.0]]))
        np.testing.assert_array_equal(tr[:, 0], 0.0)
        assert te[0, 0] == 0.0

    def test_global_mode_shares_statistics(self):
        X = np.array([[0.0, 4.0], [2.0, 6.0]])
        tr, _, st_ = standardize(X, per_feature=False)
        assert abs(tr.mean()) < 1e-15 and tr.std() == pytest.approx(1.0)
        assert st_.mean[0] == st_.mean[1] == 3.0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 50), d=st.integers(1, 8))
    def test_moments(self, seed, n, d):
        rng = np.random.default_rng(seed)
        X = rng.normal(loc=rng.normal(size=d) * 5, scale=rng.uniform(0.1, 10, size=d), size=(n, d))
        tr, _, _ = standardize(X)
        assert np.all(np.abs(tr.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(tr.std(axis=0) - 1.0) < 1e-10)


class TestLogCount:
    def test_values(self):
        out = log_count_transform([0.0, math.e - 1, 9.0])
        np.testing.assert_allclose(out, [0.0, 1.0, math.log(10)], rtol=1e-15)
        assert out[2] == pytest.approx(2.302585, abs=1e-6)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            log_count_transform([1.0, -1.0])


class TestSynthetic:
    def test_curves_range_and_determinism(self):
        a = synth_curves(np.random.default_rng(0), 50)
        b = synth_curves(np.random.default_rng(0), 50)
        assert a.inputs.shape == (50, 784)
        assert a.inputs.min() >= 0.0 and a.inputs.max() <= 1.0
        np.testing.assert_array_equal(a.inputs, b.inputs)
        assert a.targets is a.inputs

    def test_curves_mean_intensity(self):
        ds = synth_curves(np.random.default_rng(1), 1000)
        assert 0.01 < ds.inputs.mean() < 0.5

    def test_blobs_share_centers(self):
        rng = np.random.default_rng(2)
        tr, c = synth_blobs(rng, 100, n_features=5, k=3)
        te, c2 = synth_blobs(rng, 40, n_features=5, k=3, centers=c)
        assert c2 is c
        np.testing.assert_array_equal(tr.targets.sum(axis=1), 1.0)
        assert te.inputs.shape == (40, 5)


class TestCsv:
    def test_classification(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.5,1.0,2\n-1.0,0.0,0\n")
        ds = load_csv(p, k=3)
        np.testing.assert_array_equal(ds.inputs, [[0.5, 1.0], [-1.0, 0.0]])
        np.testing.assert_array_equal(ds.labels, [2, 0])
        assert ds.targets.shape == (2, 3)

    def test_autoencoder(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.1,0.2\n0.3,0.4\n")
        ds = load_csv(p, task="autoencode")
        assert ds.inputs.shape == (2, 2)

    def test_bad_labels(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.5,1.5\n")
        with pytest.raises(ValueError):
            load_csv(p)


class TestBatches:
    def _ds(self, n=10):
        X = np.arange(n, dtype=np.float64)[:, None]
        return Dataset(X, one_hot(np.arange(n) % 2, 2))

    def test_even_split_covers_all_rows(self):
        batches = list(batch_iter(self._ds(), 5, np.random.default_rng(0)))
        assert len(batches) == 2
        rows = np.concatenate([X[:, 0] for X, _ in batches])
        np.testing.assert_array_equal(np.sort(rows), np.arange(10))

    def test_partial_batch_dropped(self):
        batches = list(batch_iter(self._ds(), 3, np.random.default_rng(0)))
        assert [X.shape[0] for X, _ in batches] == [3, 3, 3]

    def test_same_seed_same_order(self):
        a = [X[:, 0] for X, _ in batch_iter(self._ds(), 2, np.random.default_rng(5))]
        b = [X[:, 0] for X, _ in batch_iter(self._ds(), 2, np.random.default_rng(5))]
        np.testing.assert_array_equal(a, b)

    def test_no_shuffle(self):
        first, _ = next(batch_iter(self._ds(), 4, np.random.default_rng(0), shuffle_per_epoch=False))
        np.testing.assert_array_equal(first[:, 0], [0, 1, 2, 3])

    def test_batch_larger_than_data(self):
        with pytest.raises(ValueError):
            list(batch_iter(self._ds(), 11))

    def test_inputs_targets_stay_aligned(self):
        ds = self._ds()
        for X, T in batch_iter(ds, 2, np.random.default_rng(3)):
            np.testing.assert_array_equal(T.argmax(axis=1), X[:, 0].astype(int) % 2)

    @settings(max_examples=50, deadline=None)
    @given(h=st.integers(1, 10), c=st.integers(1, 20), epoch=st.integers(1, 100))
    def test_curvature_block_inside_gradient_batch(self, h, c, epoch):
        sl = curvature_slice(h * c, c, epoch)
        rows = np.arange(h * c)[sl]
        assert len(rows) == c
        assert set(rows) <= set(range(h * c))
        if h > 1:
            assert len(rows) < h * c

    def test_curvature_needs_multiple(self):
        with pytest.raises(ValueError):
            curvature_slice(1000, 300, 1)
