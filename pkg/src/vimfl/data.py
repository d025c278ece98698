"""Vertical datasets: IDX loading, synthetic generation, partitioning, batching."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .rng import stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class VerticalDataset:
    """Row-aligned feature blocks, one per client, plus server-held labels."""

    blocks: List[np.ndarray]
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        for k, blk in enumerate(self.blocks):
            if blk.ndim != 2 or blk.shape[0] != n:
                raise ValueError(f"block {k} has shape {blk.shape}; expected {n} rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_clients(self) -> int:
        return len(self.blocks)

    @property
    def block_dims(self) -> List[int]:
        return [b.shape[1] for b in self.blocks]

    def take(self, idx) -> "VerticalDataset":
        idx = np.asarray(idx)
        return VerticalDataset([b[idx] for b in self.blocks], self.labels[idx], self.n_classes)

    def select_clients(self, clients: Sequence[int]) -> "VerticalDataset":
        return VerticalDataset([self.blocks[k] for k in clients], self.labels, self.n_classes)


@dataclass
class Splits:
    train: VerticalDataset
    val: Optional[VerticalDataset]
    test: Optional[VerticalDataset]


# -- IDX -----------------------------------------------------------------

def _read_exact(buf: bytes, off: int, n: int, path) -> bytes:
    if off + n > len(buf):
        raise IdxFormatError(
            f"{path}: truncated at byte offset {len(buf)}, needed {off + n} bytes"
        )
    return buf[off:off + n]


def read_idx(path) -> np.ndarray:
    """Read an uncompressed (or .gz) IDX file of unsigned bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        import gzip

        raw = gzip.decompress(raw)
    magic, = struct.unpack(">I", _read_exact(raw, 0, 4, path))
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(">" + "I" * ndim, _read_exact(raw, 4, 4 * ndim, path))
    off = 4 + 4 * ndim
    count = int(np.prod(dims))
    body = _read_exact(raw, off, count, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(X, y)`` with ``X`` of shape ``(N, rows*cols)`` scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected a 3-d image tensor, got {images.ndim}-d")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected a 1-d label vector")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    X = images.reshape(images.shape[0], images.shape[1] * images.shape[2]).astype(np.float64) / 255.0
    return X, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = IMAGE_MAGIC if array.ndim == 3 else LABEL_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError("only 1-d labels and 3-d images are supported")
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def find_mnist_files(directory) -> Dict[str, Path]:
    """Locate the four MNIST files in ``directory`` (dash or dot naming, optional .gz)."""
    directory = Path(directory)
    out = {}
    for key, stem in [
        ("train_images", "train-images"), ("train_labels", "train-labels"),
        ("test_images", "t10k-images"), ("test_labels", "t10k-labels"),
    ]:
        kind = "idx3" if "images" in key else "idx1"
        for name in (f"{stem}-{kind}-ubyte", f"{stem}.{kind}-ubyte"):
            for suffix in ("", ".gz"):
                p = directory / (name + suffix)
                if p.exists():
                    out[key] = p
                    break
            if key in out:
                break
        if key not in out:
            raise FileNotFoundError(f"no {stem} IDX file in {directory}")
    return out


def train_val_split(n: int, n_val: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Shuffle ``[0, n)`` with a fixed stream; the last ``n_val`` go to validation."""
    perm = stream(seed, "train-val-split").permutation(n)
    return perm[: n - n_val], perm[n - n_val:]


# -- synthetic -----------------------------------------------------------

@dataclass
class SyntheticSpec:
    n: int
    n_classes: int
    informative_dims: List[int]
    noise_dims: List[int] = field(default_factory=list)
    noise_scale: float = 1.0
    separation: float = 1.0
    standardize: bool = True


def gen_synthetic(spec: SyntheticSpec, seed: int) -> VerticalDataset:
    """Planted dataset: informative blocks first, then label-independent noise blocks.

    Informative block features are ``separation * mu[y] + noise_scale * eps``
    with per-block class means ``mu ~ N(0, 1)``; noise blocks are pure
    ``N(0, 1)``. With ``standardize`` every column is scaled to zero mean and
    unit variance (constant columns are only centred).
    """
    rng = stream(seed, "synthetic")
    y = rng.integers(0, spec.n_classes, size=spec.n)
    blocks = []
    for d in spec.informative_dims:
        means = rng.standard_normal((spec.n_classes, d)) * spec.separation
        blocks.append(means[y] + spec.noise_scale * rng.standard_normal((spec.n, d)))
    for d in spec.noise_dims:
        blocks.append(rng.standard_normal((spec.n, d)))
    if spec.standardize:
        blocks = [_standardize(b) for b in blocks]
    return VerticalDataset(blocks, y, spec.n_classes)


def _standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd


def export_csv(ds: VerticalDataset, path) -> None:
    X = np.concatenate(ds.blocks, axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(X.shape[1])] + ["label"])
        for row, lab in zip(X, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def import_csv(path, n_classes: int, block_dims: Sequence[int]) -> VerticalDataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    X, y = data[:, :-1], data[:, -1].astype(np.int64)
    cols = np.cumsum([0] + list(block_dims))
    return VerticalDataset([X[:, a:b] for a, b in zip(cols[:-1], cols[1:])], y, n_classes)


# -- partitioning --------------------------------------------------------

@dataclass
class PartitionScheme:
    """How raw feature columns are dealt out to clients.

    kind:
      ``row-bands``  -- ``n_clients`` contiguous bands of image rows
      ``patches``    -- a ``grid = (gr, gc)`` tiling of the image plane
      ``dim-ranges`` -- explicit half-open ``ranges`` over the flat features
    ``image_shape`` is ``(H, W)`` or ``(H, W, C)``; features are assumed to be
    flattened in that (row-major, channels last) order.
    """

    kind: str
    n_clients: Optional[int] = None
    image_shape: Optional[Tuple[int, ...]] = None
    grid: Optional[Tuple[int, int]] = None
    ranges: Optional[List[Tuple[int, int]]] = None
    allow_overlap: bool = False

    def column_indices(self, d: int) -> List[np.ndarray]:
        if self.kind == "row-bands":
            h, w, c = _hwc(self.image_shape, d)
            if not self.n_clients or self.n_clients > h:
                raise PartitionError(f"cannot split {h} rows into {self.n_clients} bands")
            flat = np.arange(d).reshape(h, w * c)
            cols = [band.ravel() for band in np.array_split(flat, self.n_clients, axis=0)]
        elif self.kind == "patches":
            h, w, c = _hwc(self.image_shape, d)
            gr, gc = self.grid
            flat = np.arange(d).reshape(h, w, c)
            cols = []
            for rows in np.array_split(np.arange(h), gr):
                for cs in np.array_split(np.arange(w), gc):
                    cols.append(flat[np.ix_(rows, cs)].ravel())
        elif self.kind == "dim-ranges":
            cols = [np.arange(a, b) for a, b in self.ranges]
        else:
            raise PartitionError(f"unknown partition kind {self.kind!r}")
        _check_cover(cols, d, self.allow_overlap)
        return cols


def _hwc(shape, d: int) -> Tuple[int, int, int]:
    if shape is None:
        raise PartitionError("image_shape is required for image partitions")
    h, w = shape[0], shape[1]
    c = shape[2] if len(shape) > 2 else 1
    if h * w * c != d:
        raise PartitionError(f"image shape {tuple(shape)} does not match {d} features")
    return h, w, c


def _check_cover(cols: List[np.ndarray], d: int, allow_overlap: bool) -> None:
    counts = np.zeros(d, dtype=np.int64)
    for c in cols:
        if c.size and (c.min() < 0 or c.max() >= d):
            raise PartitionError(f"column index outside [0, {d})")
        np.add.at(counts, c, 1)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise PartitionError(f"dimension {int(missing[0])} is not covered by any client")
    doubled = np.flatnonzero(counts > 1)
    if doubled.size and not allow_overlap:
        raise PartitionError(f"dimension {int(doubled[0])} is covered by more than one client")


def partition_vertical(X: np.ndarray, scheme: PartitionScheme) -> List[np.ndarray]:
    cols = scheme.column_indices(X.shape[1])
    return [np.ascontiguousarray(X[:, c]) for c in cols]


# -- batching ------------------------------------------------------------

class BatchSizeError(ValueError):
    pass


def sample_batch(n: int, b: int, rng: np.random.Generator) -> np.ndarray:
    """``b`` distinct indices drawn uniformly from ``[0, n)``."""
    if b > n:
        raise BatchSizeError(f"batch size {b} exceeds dataset size {n}")
    return rng.permutation(n)[:b]


class BatchSchedule:
    """Shuffle ``[0, n)`` every epoch and cut it into consecutive chunks of ``b``.

    One epoch is ``ceil(n / b)`` rounds; when ``b`` does not divide ``n`` the
    last batch of an epoch is short. The server owns the schedule and every
    client receives the same index array for a round.
    """

    def __init__(self, n: int, b: int, seed: int):
        if b > n or b <= 0:
            raise BatchSizeError(f"batch size {b} invalid for dataset size {n}")
        self.n, self.b, self.seed = n, b, seed
        self.rounds_per_epoch = -(-n // b)
        self._epoch = -1
        self._perm = None

    def indices(self, t: int) -> np.ndarray:
        epoch, pos = divmod(t, self.rounds_per_epoch)
        if epoch != self._epoch:
            self._perm = stream(self.seed, "batches", epoch).permutation(self.n)
            self._epoch = epoch
        return self._perm[pos * self.b:(pos + 1) * self.b]

    def __iter__(self) -> Iterator[np.ndarray]:
        t = 0
        while True:
            yield self.indices(t)
            t += 1
