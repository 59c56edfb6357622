"""Datasets: IDX ingestion, synthetic blobs, augmentation and epoch shuffling."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from dpsgd.errors import ConfigurationError, IdxParseError
from dpsgd.rng import substream

SPLITS = ("train", "valid", "test")

_IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder(">") if v.itemsize > 1 else v: k for k, v in _IDX_TYPES.items()}


@dataclass(frozen=True)
class Dataset:
    """Examples (``inputs``, integer ``labels``) of one split.

    Image inputs are channels-first ``(N, C, H, W)``; vector inputs ``(N, D)``.
    ``channel_mean`` / ``channel_std`` record the standardization applied, if any.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    channel_mean: Optional[Tuple[float, ...]] = None
    channel_std: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        if len(self.inputs) == 0 or len(self.inputs) != len(self.labels):
            raise ConfigurationError(
                f"need a non-empty dataset with one label per input, got {len(self.inputs)} inputs "
                f"and {len(self.labels)} labels"
            )
        labels = np.asarray(self.labels)
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    @property
    def example_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return replace(self, inputs=self.inputs[indices], labels=self.labels[indices])

    def with_example(self, x, y: int) -> "Dataset":
        """A copy with one extra example appended at the end."""
        x = np.asarray(x, dtype=self.inputs.dtype).reshape((1,) + self.example_shape)
        return replace(
            self,
            inputs=np.concatenate([self.inputs, x]),
            labels=np.concatenate([self.labels, np.array([y], dtype=self.labels.dtype)]),
        )


# --- IDX -----------------------------------------------------------------


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parses an IDX file (optionally gzipped) into an array of its native dtype."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxParseError("file shorter than the 4-byte magic", len(data))
    if data[0] != 0 or data[1] != 0:
        raise IdxParseError(f"bad magic {data[:4].hex()}: first two bytes must be zero", 0)
    code, ndim = data[2], data[3]
    if code not in _IDX_TYPES:
        raise IdxParseError(f"unknown IDX type code 0x{code:02x}", 2)
    if ndim == 0:
        raise IdxParseError("IDX file declares zero dimensions", 3)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxParseError(f"header truncated: need {header_end} bytes for {ndim} dimensions", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = _IDX_TYPES[code]
    expected = header_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise IdxParseError(
            f"payload size mismatch: dimensions {dims} need {expected} bytes, file has {len(data)}",
            min(len(data), expected),
        )
    return np.frombuffer(data, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, _IDX_CODES[dtype], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dtype).tobytes())


def load_idx(
    images_path,
    labels_path,
    num_classes: Optional[int] = None,
    split: str = "train",
    scale: Optional[float] = 1 / 255,
) -> Dataset:
    """Loads an image/label pair of IDX files (MNIST layout).

    Images of shape (N, H, W) gain a channel axis. ``scale`` multiplies the
    raw pixel values (None leaves them unscaled).
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise IdxParseError(f"expected 3 or 4 image dimensions, got {images.ndim}", 3)
    if labels.ndim != 1 or len(labels) != len(images):
        raise IdxParseError(f"{len(labels)} labels for {len(images)} images", 4)
    inputs = images.astype(np.float64)
    if scale is not None:
        inputs = inputs * scale
    labels = labels.astype(np.int64)
    return Dataset(inputs, labels, num_classes or int(labels.max()) + 1, split)


# --- synthetic data --------------------------------------------------------


def synth_blobs(
    n: int, classes: int, dim: int, separation: float, seed: int, split: str = "train"
) -> Dataset:
    """Gaussian class clusters with unit isotropic noise.

    Class centers depend only on ``seed`` (so splits share them) and sit at
    pairwise distance ``separation`` when ``dim >= classes``. Labels cycle
    through the classes, so every class has n // classes or one more examples.
    """
    if n < classes:
        raise ConfigurationError(f"need n >= classes, got n={n}, classes={classes}")
    center_rng = substream(seed, "data", 0)
    if dim >= classes:
        basis, _ = np.linalg.qr(center_rng.standard_normal((dim, classes)))
        centers = basis.T * (separation / np.sqrt(2))
    else:
        centers = center_rng.standard_normal((classes, dim)) * separation
    sample_rng = substream(seed, "data", 1 + SPLITS.index(split))
    labels = sample_rng.permutation(np.arange(n) % classes)
    inputs = centers[labels] + sample_rng.standard_normal((n, dim))
    return Dataset(inputs, labels.astype(np.int64), classes, split)


def linear_probe_accuracy(dataset: Dataset) -> float:
    """Training accuracy of a least-squares one-vs-rest linear classifier."""
    x = dataset.inputs.reshape(len(dataset), -1)
    x = np.hstack([x, np.ones((len(x), 1))])
    targets = np.eye(dataset.num_classes)[dataset.labels]
    w, *_ = np.linalg.lstsq(x, targets, rcond=None)
    return float(((x @ w).argmax(axis=1) == dataset.labels).mean())


# --- standardization ---------------------------------------------------------


def _channel_axes(inputs: np.ndarray) -> Tuple[int, ...]:
    return (0, 2, 3) if inputs.ndim == 4 else (0,)


def standardize(train: Dataset, *others: Dataset) -> Tuple[Dataset, ...]:
    """Centers and scales every channel with statistics of ``train`` only."""
    axes = _channel_axes(train.inputs)
    mean = train.inputs.mean(axis=axes)
    std = train.inputs.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    shape = (1, -1, 1, 1) if train.is_image else (1, -1)
    out = []
    for ds in (train, *others):
        inputs = (ds.inputs - mean.reshape(shape)) / std.reshape(shape)
        out.append(replace(ds, inputs=inputs, channel_mean=tuple(mean.tolist()), channel_std=tuple(std.tolist())))
    return tuple(out)


def train_valid_split(dataset: Dataset, valid_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < valid_fraction < 1:
        raise ConfigurationError("valid_fraction must lie in (0, 1)")
    order = substream(seed, "data", 99).permutation(len(dataset))
    n_valid = int(round(valid_fraction * len(dataset)))
    valid = dataset.subset(np.sort(order[:n_valid]))
    return dataset.subset(np.sort(order[n_valid:])), replace(valid, split="valid")


# --- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    """Mirror padding, a uniformly placed crop and an optional horizontal flip."""

    pad_pixels: int = 4
    crop_size: Optional[Tuple[int, int]] = None
    horizontal_flip: bool = True
    multiplicity: int = 1
    pad_mode: str = "mirror"

    def __post_init__(self):
        if self.pad_pixels < 0:
            raise ConfigurationError("pad_pixels must be >= 0")
        if self.multiplicity < 1:
            raise ConfigurationError("augmentation multiplicity must be >= 1")
        if self.pad_mode != "mirror":
            raise ConfigurationError(f"unsupported pad_mode {self.pad_mode!r}")

    @property
    def is_identity(self) -> bool:
        return self.pad_pixels == 0 and not self.horizontal_flip


def augment(image, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """One random view of a (C, H, W) image. The label is not involved."""
    image = np.asarray(image)
    _, h, w = image.shape
    p = spec.pad_pixels
    ch, cw = spec.crop_size or (h, w)
    if ch > h + 2 * p or cw > w + 2 * p:
        raise ConfigurationError(f"crop {(ch, cw)} exceeds padded size {(h + 2 * p, w + 2 * p)}")
    if p and (p >= h or p >= w):
        raise ConfigurationError(f"mirror padding of {p} needs images larger than {p} pixels")
    padded = np.pad(image, ((0, 0), (p, p), (p, p)), mode="reflect") if p else image
    top = rng.integers(0, h + 2 * p - ch + 1)
    left = rng.integers(0, w + 2 * p - cw + 1)
    view = padded[:, top : top + ch, left : left + cw]
    if spec.horizontal_flip and rng.random() < 0.5:
        view = view[:, :, ::-1]
    return np.ascontiguousarray(view)


def sample_multiplicity(example, k: int, spec: Optional[AugmentSpec], rng: np.random.Generator) -> np.ndarray:
    """K independently augmented views of one example, stacked on axis 0.

    Without a spec (or for non-image inputs) the views are copies.
    """
    if k < 1:
        raise ConfigurationError("multiplicity must be >= 1")
    example = np.asarray(example)
    if spec is None or example.ndim != 3:
        return np.repeat(example[None], k, axis=0)
    return np.stack([augment(example, spec, rng) for _ in range(k)])


# --- batching ----------------------------------------------------------------------


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index batches for one shuffled epoch; a final partial batch is dropped."""
    if batch_size > n:
        raise ConfigurationError(f"batch size {batch_size} exceeds dataset size {n}")
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]
