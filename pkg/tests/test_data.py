import gzip
import struct

import numpy as np
import pytest

from egru.data import (DelayCopyConfig, all_patterns, delay_copy_gen,
                       delay_copy_sample, maxpool_downscale, mnist_idx_load,
                       sequentialize, write_idx_images, write_idx_labels)


class TestDelayCopy:
    def cfg(self):
        return DelayCopyConfig(n_bits=2, input_window=1.0, delay=4.0,
                               recall_window=2.0, amplitude=1.0)

    def test_pattern_one_zero_event_layout(self):
        s = delay_copy_sample(np.array([1.0, 0.0]), self.cfg())
        channels = [ch for _, ch, _ in s.events]
        assert channels == [0, 2]           # one bit event plus the cue channel
        times = [t for t, _, _ in s.events]
        assert times[0] < times[1]
        assert s.readout_times[-1] > times[1]
        np.testing.assert_array_equal(s.bits, [1.0, 0.0])

    def test_all_zero_pattern_cue_only(self):
        s = delay_copy_sample(np.array([0.0, 0.0]), self.cfg())
        assert [ch for _, ch, _ in s.events] == [2]
        np.testing.assert_array_equal(s.bits, [0.0, 0.0])

    def test_generator_deterministic(self):
        a = delay_copy_gen(2, 1.0, 4.0, 2.0, seed=5)
        b = delay_copy_gen(2, 1.0, 4.0, 2.0, seed=5)
        for _ in range(10):
            sa, sb = next(a), next(b)
            np.testing.assert_array_equal(sa.bits, sb.bits)
            assert sa.events == sb.events

    def test_targets_recoverable_from_events(self):
        # self-consistency: the bit channels present in the stream are the bits
        cfg = self.cfg()
        for bits in all_patterns(2):
            s = delay_copy_sample(bits, cfg)
            seen = {ch for _, ch, _ in s.events if ch < 2}
            np.testing.assert_array_equal(sorted(seen), np.flatnonzero(bits))

    def test_discrete_variant_same_events(self):
        s = delay_copy_sample(np.array([1.0, 1.0]), self.cfg())
        x = s.discrete_inputs(0.1)
        assert x.shape == (int(round(s.T / 0.1)), 3)
        for t, ch, val in s.events:
            assert x[int(round(t / 0.1)), ch] == val
        assert np.count_nonzero(x) == len(s.events)

    def test_bad_durations(self):
        with pytest.raises(ValueError):
            next(delay_copy_gen(2, 0.0, 4.0, 2.0, seed=0))


def make_idx_pair(tmp_path, n=20, h=6, w=4, gz=False, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, h, w)).astype(np.uint8)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    ip, lp = tmp_path / "imgs", tmp_path / "labels"
    write_idx_images(ip, images)
    write_idx_labels(lp, labels)
    if gz:
        for p in (ip, lp):
            gz_path = p.with_suffix(".gz")
            gz_path.write_bytes(gzip.compress(p.read_bytes()))
            p.unlink()
        return tmp_path / "imgs.gz", tmp_path / "labels.gz", images, labels
    return ip, lp, images, labels


class TestIdxFormat:
    def test_roundtrip(self, tmp_path):
        ip, lp, images, labels = make_idx_pair(tmp_path)
        x, y = mnist_idx_load(ip, lp)
        assert x.shape == (20, 6, 4)
        np.testing.assert_array_equal(y, labels)
        np.testing.assert_allclose(x * 255.0, images, atol=1e-12)

    def test_gzip_transparent(self, tmp_path):
        ip, lp, images, labels = make_idx_pair(tmp_path, gz=True)
        x, y = mnist_idx_load(ip, lp)
        np.testing.assert_array_equal(y, labels)

    def test_full_scale_pixel(self, tmp_path):
        images = np.full((1, 2, 2), 255, dtype=np.uint8)
        write_idx_images(tmp_path / "i", images)
        write_idx_labels(tmp_path / "l", np.zeros(1, dtype=np.uint8))
        x, _ = mnist_idx_load(tmp_path / "i", tmp_path / "l")
        assert x.max() == 1.0

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(struct.pack(">IIII", 0x00000802, 1, 2, 2) + b"\x00" * 4)
        write_idx_labels(tmp_path / "l", np.zeros(1, dtype=np.uint8))
        with pytest.raises(ValueError, match="bad magic"):
            mnist_idx_load(p, tmp_path / "l")

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "trunc"
        p.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 5)
        write_idx_labels(tmp_path / "l", np.zeros(2, dtype=np.uint8))
        with pytest.raises(ValueError, match="truncated"):
            mnist_idx_load(p, tmp_path / "l")

    def test_count_mismatch(self, tmp_path):
        ip, _, _, _ = make_idx_pair(tmp_path, n=20)
        write_idx_labels(tmp_path / "l2", np.zeros(19, dtype=np.uint8))
        with pytest.raises(ValueError, match="count mismatch"):
            mnist_idx_load(ip, tmp_path / "l2")

    def test_label_histogram_matches_file(self, tmp_path):
        # header/count oracle: histogram recomputed from raw bytes
        ip, lp, _, labels = make_idx_pair(tmp_path, n=50, seed=3)
        _, y = mnist_idx_load(ip, lp)
        raw = lp.read_bytes()[8:]
        want = np.bincount(np.frombuffer(raw, dtype=np.uint8), minlength=10)
        np.testing.assert_array_equal(np.bincount(y, minlength=10), want)


class TestMaxpool:
    def test_constant_image(self):
        img = np.full((4, 4), 0.7)
        np.testing.assert_array_equal(maxpool_downscale(img, 2), np.full((2, 2), 0.7))

    def test_bright_pixel_survives(self):
        img = np.zeros((4, 4))
        img[1, 2] = 1.0
        out = maxpool_downscale(img, 2)
        assert out[0, 1] == 1.0
        assert out.sum() == 1.0

    def test_against_double_loop(self):
        rng = np.random.default_rng(4)
        img = rng.random((6, 8))
        out = maxpool_downscale(img, 2)
        for i in range(3):
            for j in range(4):
                assert out[i, j] == img[2*i:2*i+2, 2*j:2*j+2].max()

    def test_batch_axis(self):
        rng = np.random.default_rng(5)
        imgs = rng.random((3, 4, 4))
        out = maxpool_downscale(imgs, 2)
        assert out.shape == (3, 2, 2)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            maxpool_downscale(np.zeros((5, 4)), 2)


class TestSequentialize:
    def test_row_major_order(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(sequentialize(img).ravel(), [1, 2, 3, 4])

    def test_fourteen_square_length(self):
        assert sequentialize(np.zeros((14, 14))).shape == (196, 1)

    def test_roundtrip(self):
        rng = np.random.default_rng(6)
        img = rng.random((5, 7))
        np.testing.assert_array_equal(sequentialize(img).reshape(5, 7), img)
