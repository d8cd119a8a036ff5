"""Seeded benchmark generators and the MNIST IDX loader."""
from __future__ import annotations

import gzip
import hashlib
import logging
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

ADDING_LENGTH = 50
ADDING_OUTPUT_VARIANCE = 1.0 / 6.0  # Var(U1 + U2), U ~ U(-0.5, 0.5)
ADDING_SOLVED_MSE = ADDING_OUTPUT_VARIANCE / 100.0

FREQ_DURATION_MS = 100.0
FREQ_STANDARD_PERIODS = (0.5, 1.0)
FREQ_POSITIVE = (5.0, 6.0)
FREQ_NEGATIVE = ((1.0, 5.0), (6.0, 100.0))


@dataclass
class AddingBatch:
    inputs: np.ndarray  # (B, T, 2): value, marker
    targets: np.ndarray  # (B, 1)


@dataclass
class FreqDiscBatch:
    inputs: np.ndarray  # (B, L, 1)
    labels: np.ndarray  # (B,), 1 = period in (5, 6) ms
    periods: np.ndarray  # (B,) in ms
    phases: np.ndarray  # (B,) in ms


def adding_marker_windows(length: int = ADDING_LENGTH) -> tuple[range, range]:
    """First marker in the first 10% of steps, second in the last half."""
    first = range(0, max(1, math.ceil(0.1 * length)))
    second = range(length // 2, length)
    return first, second


def gen_adding(rng: np.random.Generator, batch_size: int, length: int = ADDING_LENGTH) -> AddingBatch:
    if batch_size <= 0 or length < 4:
        raise ConfigurationError("adding task needs batch_size > 0 and length >= 4")
    first, second = adding_marker_windows(length)
    values = rng.uniform(-0.5, 0.5, (batch_size, length))
    i1 = rng.integers(first.start, first.stop, batch_size)
    i2 = rng.integers(second.start, second.stop, batch_size)
    markers = np.zeros((batch_size, length))
    rows = np.arange(batch_size)
    markers[rows, i1] = 1.0
    markers[rows, i2] = 1.0
    targets = (values[rows, i1] + values[rows, i2]).reshape(-1, 1)
    return AddingBatch(np.stack([values, markers], axis=-1), targets)


def adding_solved(mse_heldout: float) -> bool:
    """MSE at least two orders of magnitude below the output variance."""
    if mse_heldout < 0:
        raise ConfigurationError("MSE cannot be negative")
    return mse_heldout <= ADDING_SOLVED_MSE


def freqdisc_length(sampling_period: float) -> int:
    return int(round(FREQ_DURATION_MS / sampling_period))


def _check_sampling_period(sampling_period: float, allow_nonstandard: bool):
    if sampling_period <= 0:
        raise ConfigurationError("sampling period must be positive")
    if sampling_period not in FREQ_STANDARD_PERIODS:
        if not allow_nonstandard:
            raise ConfigurationError(
                f"sampling period {sampling_period} ms is not one of {FREQ_STANDARD_PERIODS}; "
                "pass allow_nonstandard=True to use it anyway"
            )
        log.warning("non-standard sampling period %s ms", sampling_period)


def sample_negative_periods(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform over (1, 5) U (6, 100): pick an interval by length, then uniform within."""
    (a0, a1), (b0, b1) = FREQ_NEGATIVE
    len_a, len_b = a1 - a0, b1 - b0
    in_a = rng.random(n) < len_a / (len_a + len_b)
    lo = np.where(in_a, a0, b0)
    hi = np.where(in_a, a1, b1)
    return lo + (hi - lo) * rng.random(n)


def gen_freqdisc(
    rng: np.random.Generator,
    batch_size: int,
    sampling_period: float = 1.0,
    allow_nonstandard: bool = False,
) -> FreqDiscBatch:
    """Stratified batch of 100 ms sine waves; exactly half are positives."""
    _check_sampling_period(sampling_period, allow_nonstandard)
    if batch_size <= 0 or batch_size % 2:
        raise ConfigurationError("frequency discrimination batches must have an even size")
    half = batch_size // 2
    periods = np.concatenate(
        [rng.uniform(*FREQ_POSITIVE, half), sample_negative_periods(rng, half)]
    )
    labels = np.concatenate([np.ones(half, dtype=np.int64), np.zeros(half, dtype=np.int64)])
    order = rng.permutation(batch_size)
    periods, labels = periods[order], labels[order]
    phases = rng.random(batch_size) * periods
    length = freqdisc_length(sampling_period)
    t = np.arange(length) * sampling_period
    inputs = np.sin(2.0 * np.pi * (t[None, :] + phases[:, None]) / periods[:, None])
    return FreqDiscBatch(inputs[..., None], labels, periods, phases)


def freqdisc_solved(accuracy: float) -> bool:
    return accuracy > 0.99


# -- MNIST --------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
MNIST_VAL_SIZE = 5000
MNIST_DESK_SIZE = 2000


def _open_raw(path):
    with open(path, "rb") as f:
        raw = f.read()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, name: str = "<idx>") -> np.ndarray:
    """Decode an unsigned-byte IDX blob: big-endian magic, dims, then data."""
    if len(raw) < 8:
        raise DataError(f"{name}: file too short for an IDX header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataError(f"{name}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{name}: truncated header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataError(f"{name}: truncated, expected {count} bytes of data, got {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray):
    """Write ``uint8`` images (N, rows, cols) or labels (N,) as IDX."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


@dataclass
class MnistSeq:
    images: np.ndarray  # (N, 784) uint8, row-major pixels
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)

    def inputs(self, idx=None) -> np.ndarray:
        """Pixels scaled to [0, 1] as ``(B, 784, 1)`` sequences."""
        imgs = self.images if idx is None else self.images[idx]
        return (imgs.astype(np.float64) / 255.0)[..., None]


def _find(mnist_dir, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        path = os.path.join(mnist_dir, name)
        if os.path.exists(path):
            return path
    raise DataError(f"missing MNIST file {stem} in {mnist_dir}")


def read_mnist_dir(mnist_dir) -> tuple[dict, dict]:
    """Parse the four IDX files; returns arrays and per-file sha256 digests."""
    if not mnist_dir or not os.path.isdir(mnist_dir):
        raise DataError(f"MNIST directory not found: {mnist_dir!r}")
    arrays, digests = {}, {}
    for key, stem in MNIST_FILES.items():
        path = _find(mnist_dir, stem)
        raw = _open_raw(path)
        digests[os.path.basename(path)] = hashlib.sha256(raw).hexdigest()
        magic = IDX_IMAGES_MAGIC if key.endswith("images") else IDX_LABELS_MAGIC
        arrays[key] = parse_idx(raw, magic, path)
    for split in ("train", "test"):
        n_img, n_lab = len(arrays[f"{split}_images"]), len(arrays[f"{split}_labels"])
        if n_img != n_lab:
            raise DataError(f"{split}: {n_img} images but {n_lab} labels")
        if arrays[f"{split}_images"].shape[1:] != (28, 28):
            raise DataError(f"{split}: images are not 28x28")
    for name, digest in digests.items():
        log.info("mnist %s sha256=%s", name, digest)
    return arrays, digests


def load_mnist(
    mnist_dir,
    rng: np.random.Generator,
    val_size: int = MNIST_VAL_SIZE,
    profile: str = "full",
    desk_size: int = MNIST_DESK_SIZE,
) -> dict:
    """Train/val/test splits; validation is a seeded draw from the training file.

    The ``desk`` profile further keeps a seeded ``desk_size`` subset of the
    training split.  Returned dict has keys ``train``, ``val``, ``test``,
    ``checksums``.
    """
    if profile not in ("full", "desk"):
        raise ConfigurationError(f"unknown MNIST profile {profile!r}")
    arrays, digests = read_mnist_dir(mnist_dir)
    n_train = len(arrays["train_labels"])
    if not 0 < val_size < n_train:
        raise ConfigurationError(f"validation size {val_size} incompatible with {n_train} training images")
    perm = rng.permutation(n_train)
    val_idx, train_idx = np.sort(perm[:val_size]), np.sort(perm[val_size:])
    if profile == "desk":
        if desk_size > len(train_idx):
            raise ConfigurationError(f"desk subset {desk_size} larger than training split")
        train_idx = np.sort(rng.choice(train_idx, desk_size, replace=False))

    def split(images, labels, idx=None):
        images = images.reshape(len(images), -1)
        if idx is not None:
            images, labels = images[idx], labels[idx]
        return MnistSeq(np.ascontiguousarray(images), labels.astype(np.int64))

    return {
        "train": split(arrays["train_images"], arrays["train_labels"], train_idx),
        "val": split(arrays["train_images"], arrays["train_labels"], val_idx),
        "test": split(arrays["test_images"], arrays["test_labels"]),
        "checksums": digests,
        "train_indices": train_idx,
        "val_indices": val_idx,
    }


def mnist_pixel(step: int) -> tuple[int, int]:
    return divmod(int(step), 28)
