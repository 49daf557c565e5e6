import struct

import numpy as np
import pytest

from drkit.data import (
    IDXFormatError,
    LabeledDataset,
    bundled_digits,
    encode_pnm,
    fixed_subset,
    load_idx,
    panel,
    task_labels,
    train_test_split,
    write_idx,
    write_panel,
)


def _small(n=6):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, 1, 5, 4)).astype(np.float32) / 255
    return LabeledDataset(images, rng.integers(0, 10, size=n))


def _pair(tmp_path, ds):
    ip, lp = tmp_path / "x.idx3", tmp_path / "y.idx1"
    write_idx(ds, ip, lp)
    return ip, lp


class TestIDX:
    def test_round_trip(self, tmp_path):
        ds = _small()
        back = load_idx(*_pair(tmp_path, ds))
        assert np.array_equal(back.images, ds.images)
        assert back.labels.tolist() == ds.labels.tolist()

    def test_bad_magic(self, tmp_path):
        ip, lp = _pair(tmp_path, _small())
        buf = bytearray(ip.read_bytes())
        buf[3] = 0x01
        ip.write_bytes(bytes(buf))
        with pytest.raises(IDXFormatError, match="magic 0x00000801, expected 0x00000803") as exc:
            load_idx(ip, lp)
        assert exc.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        ip, lp = _pair(tmp_path, _small())
        ip.write_bytes(ip.read_bytes()[:-7])
        with pytest.raises(IDXFormatError, match="truncated") as exc:
            load_idx(ip, lp)
        assert exc.value.offset == len(ip.read_bytes())

    def test_truncated_header(self, tmp_path):
        ip, lp = _pair(tmp_path, _small())
        lp.write_bytes(lp.read_bytes()[:6])
        with pytest.raises(IDXFormatError, match="header truncated"):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp = _pair(tmp_path, _small(6))
        lp.write_bytes(struct.pack(">II", 0x801, 5) + bytes(5))
        with pytest.raises(IDXFormatError, match="image count 6 differs from label count 5") as exc:
            load_idx(ip, lp)
        assert exc.value.offset == 4

    def test_bundled_set(self):
        ds = bundled_digits()
        assert ds.images.shape == (5000, 1, 28, 28)
        assert np.bincount(ds.labels).tolist() == [500] * 10
        assert ds.images.min() == 0.0 and ds.images.max() == 1.0


class TestSplits:
    def test_split_disjoint_and_sized(self):
        train, test = train_test_split(bundled_digits(), 1000)
        assert len(train) == 4000 and len(test) == 1000
        assert not set(train.indices.tolist()) & set(test.indices.tolist())

    def test_subset_deterministic(self):
        _, test = train_test_split(bundled_digits(), 1000)
        a, b = fixed_subset(test, 100, 0), fixed_subset(test, 100, 0)
        assert a.indices.tolist() == b.indices.tolist()
        assert a.digest() == b.digest()
        assert fixed_subset(test, 100, 1).digest() != a.digest()

    def test_subset_size_checked(self):
        with pytest.raises(ValueError, match="subset size"):
            fixed_subset(_small(3), 4, 0)

    def test_parity_relabel(self):
        assert task_labels(np.arange(10), "parity").tolist() == [0, 1] * 5
        with pytest.raises(ValueError, match="unknown task"):
            task_labels(np.arange(3), "colour")

    def test_pixels_validated(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            LabeledDataset(np.full((1, 1, 2, 2), 1.5), np.array([0]))


class TestExport:
    def test_pgm_header_and_size(self):
        out = encode_pnm(np.zeros((1, 3, 2)))
        assert out.startswith(b"P5\n2 3\n255\n")
        assert len(out) == len(b"P5\n2 3\n255\n") + 6

    def test_ppm_for_rgb(self):
        assert encode_pnm(np.ones((3, 2, 2))).startswith(b"P6\n2 2\n255\n")

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="clamp"):
            encode_pnm(np.full((2, 2), 1.2))

    def test_panel_layout(self):
        x = np.zeros((1, 4, 4))
        adv = x.copy()
        adv[0, 0, 0] = 16 / 255
        p = panel(x, adv, 16)
        assert p.shape == (1, 4, 14)
        assert p[0, :, 4].tolist() == [1.0] * 4
        diff = p[0, :, 10:]
        assert diff[0, 0] == pytest.approx(1.0)
        assert diff[1, 1] == pytest.approx(0.5)

    def test_write_panel_atomic(self, tmp_path):
        path = tmp_path / "p.ppm"
        write_panel(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), 16, path)
        assert path.read_bytes().startswith(b"P5\n14 4\n255\n")
        assert not list(tmp_path.glob("*.tmp"))
