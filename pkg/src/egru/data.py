"""Task generators and dataset ingestion: delay-copy and pixel-sequence MNIST.

IDX format (bit-exact): big-endian uint32 magic (0x00000803 images /
0x00000801 labels), then one uint32 per dimension, then raw bytes. Files
ending in .gz or starting with the gzip magic are decompressed transparently.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class DelayCopySample:
    """One trial: events (s, channel, value), target bits, and the readout times.

    Channels 0..n_bits-1 carry the pattern, channel n_bits carries the recall
    cue. The discrete variant is a (T, n_bits+1) step grid of the same events.
    """

    bits: np.ndarray
    events: list
    readout_times: tuple
    t_input: float
    t_cue: float
    T: float

    def discrete_inputs(self, dt: float) -> np.ndarray:
        K = int(round(self.T / dt))
        x = np.zeros((K, len(self.bits) + 1))
        for s, ch, val in self.events:
            k = min(K - 1, int(round(s / dt)))
            x[k, ch] += val
        return x


@dataclass
class DelayCopyConfig:
    n_bits: int = 2
    input_window: float = 1.0       # pattern presented mid-window
    delay: float = 4.0
    recall_window: float = 2.0
    amplitude: float = 2.0
    n_readouts: int = 2             # readouts spread over the recall window
    tail: float = 0.2               # time after the last readout

    @property
    def t_input(self) -> float:
        return 0.5 * self.input_window

    @property
    def t_cue(self) -> float:
        return self.input_window + self.delay

    @property
    def readout_times(self) -> tuple:
        step = self.recall_window / self.n_readouts
        return tuple(self.t_cue + step * (k + 1) for k in range(self.n_readouts))

    @property
    def T(self) -> float:
        return self.readout_times[-1] + self.tail


def delay_copy_sample(bits, cfg: DelayCopyConfig) -> DelayCopySample:
    """Deterministic trial for a given bit pattern."""
    bits = np.asarray(bits, dtype=np.float64)
    events = [(cfg.t_input, i, cfg.amplitude) for i in range(cfg.n_bits) if bits[i]]
    events.append((cfg.t_cue, cfg.n_bits, cfg.amplitude))
    return DelayCopySample(bits, sorted(events), cfg.readout_times,
                           cfg.t_input, cfg.t_cue, cfg.T)


def delay_copy_gen(n_bits: int, input_window: float, delay: float,
                   recall_window: float, seed: int, amplitude: float = 2.0):
    """Endless deterministic stream of random-pattern trials."""
    if min(input_window, delay, recall_window) <= 0:
        raise ValueError("durations must be positive")
    cfg = DelayCopyConfig(n_bits, input_window, delay, recall_window, amplitude)
    rng = np.random.default_rng(seed)
    while True:
        bits = rng.integers(0, 2, n_bits)
        yield delay_copy_sample(bits, cfg)


def all_patterns(n_bits: int):
    """Every bit pattern, lexicographic."""
    return [np.array([(k >> (n_bits - 1 - i)) & 1 for i in range(n_bits)], dtype=np.float64)
            for k in range(2 ** n_bits)]


def _open_maybe_gzip(path):
    fh = open(path, "rb")
    head = fh.read(2)
    fh.seek(0)
    if head == b"\x1f\x8b":
        return gzip.open(fh)
    return fh


def _read_idx(path, expect_magic: int) -> tuple[np.ndarray, tuple]:
    with _open_maybe_gzip(path) as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise ValueError(f"{path}: truncated header")
        (magic,) = struct.unpack(">I", header)
        if magic != expect_magic:
            raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
        ndim = magic & 0xFF
        raw_dims = fh.read(4 * ndim)
        if len(raw_dims) < 4 * ndim:
            raise ValueError(f"{path}: truncated dimension header")
        dims = struct.unpack(">" + "I" * ndim, raw_dims)
        count = int(np.prod(dims))
        payload = fh.read(count + 1)
        if len(payload) < count:
            raise ValueError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
        if len(payload) > count:
            raise ValueError(f"{path}: trailing bytes beyond declared dimensions")
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims), dims


def mnist_idx_load(images_path, labels_path):
    """(images scaled to [0,1] float64 of shape (N, H, W), labels int array)."""
    images, idims = _read_idx(images_path, IMAGES_MAGIC)
    labels, ldims = _read_idx(labels_path, LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise ValueError(f"count mismatch: {idims[0]} images vs {ldims[0]} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Serialize uint8 images (N, H, W) in IDX format (testing and export)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def maxpool_downscale(image: np.ndarray, factor: int = 2) -> np.ndarray:
    """Max over non-overlapping factor x factor blocks; dims must divide."""
    img = np.asarray(image)
    h, w = img.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"dimensions {h}x{w} not divisible by {factor}")
    shaped = img.reshape(img.shape[:-2] + (h // factor, factor, w // factor, factor))
    return shaped.max(axis=(-3, -1))


def sequentialize(image: np.ndarray) -> np.ndarray:
    """Row-major pixel sequence of shape (H*W, 1); the class readout belongs at
    the final step."""
    img = np.asarray(image, dtype=np.float64)
    return img.reshape(-1, 1)
