"""Synthetic image classes, dataset file readers and non-i.i.d. partitioning."""

from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if int(self.label) < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "label", int(self.label))


@dataclass
class ClientDataset:
    client_id: int
    examples: list[LabeledExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; the message carries the offset."""


def stack(examples: Sequence[LabeledExample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, D) pixel matrix and (N,) labels."""
    if not examples:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    x = np.stack([e.image.reshape(-1) for e in examples])
    y = np.array([e.label for e in examples], dtype=np.int64)
    return x, y


def synth_dataset(num_classes: int, examples_per_class: int, side: int, seed: int) -> list[LabeledExample]:
    """Class-conditioned gratings with seeded per-example noise.

    Class ``c`` gets an orientation, spatial frequency and phase of its own;
    every example adds amplitude jitter and Gaussian pixel noise, then
    clamps to [0, 1]. Examples are ordered by class.
    """
    if side < 4:
        raise ValueError(f"side must be at least 4, got {side}")
    if num_classes < 1 or examples_per_class < 0:
        raise ValueError("num_classes must be >= 1 and examples_per_class >= 0")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    out: list[LabeledExample] = []
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    for c in range(num_classes):
        angle = math.pi * c / num_classes
        freq = 1.0 + (c * golden % 1.0) * 1.5
        phase = 2.0 * math.pi * ((c * 0.37) % 1.0)
        wave = np.cos(2.0 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
        for _ in range(examples_per_class):
            amp = 0.35 * (1.0 + 0.2 * rng.standard_normal())
            img = 0.5 + amp * wave + 0.08 * rng.standard_normal((side, side))
            out.append(LabeledExample(np.clip(img, 0.0, 1.0), c))
    return out


def train_test_split(
    examples: Sequence[LabeledExample], test_fraction: float, seed: int
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(examples))
    n_test = int(round(test_fraction * len(examples)))
    test = [examples[i] for i in order[:n_test]]
    train = [examples[i] for i in order[n_test:]]
    return train, test


def dirichlet_partition(
    dataset: Sequence[LabeledExample], num_clients: int, alpha: float, seed: int
) -> list[ClientDataset]:
    """Split each class across clients with Dirichlet(alpha) proportions.

    Every example lands on exactly one client. A client left empty receives
    one example taken from the currently largest client.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if num_clients < 1:
        raise ValueError(f"num_clients must be at least 1, got {num_clients}")
    if len(dataset) < num_clients:
        raise ValueError(f"cannot split {len(dataset)} examples across {num_clients} clients")
    rng = np.random.default_rng(seed)
    labels = np.array([e.label for e in dataset], dtype=np.int64)
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        cuts = np.round(np.cumsum(props) * len(idx)).astype(int)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            shards[k].extend(part.tolist())
    for k in range(num_clients):
        if not shards[k]:
            donor = max(range(num_clients), key=lambda j: (len(shards[j]), -j))
            shards[k].append(shards[donor].pop())
    return [
        ClientDataset(k, [dataset[i] for i in sorted(shard)]) for k, shard in enumerate(shards)
    ]


_IDX_TYPES = {0x08: (">u1", 1), 0x09: (">i1", 1), 0x0B: (">i2", 2), 0x0C: (">i4", 4),
              0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def _open(path: str | os.PathLike):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path: str | os.PathLike) -> np.ndarray:
    """Parse one IDX file into an array of its declared dtype and shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise DatasetFormatError(f"{path}: bad magic number 0x{raw[:4].hex()} at byte offset 0")
    if ndim < 1:
        raise DatasetFormatError(f"{path}: zero dimensions declared at byte offset 3")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetFormatError(f"{path}: truncated dimension list at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype, width = _IDX_TYPES[dtype_code]
    expected = int(np.prod(dims)) * width
    body = raw[header_end:]
    if len(body) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} data bytes after header, found {len(body)} "
            f"(byte offset {header_end})"
        )
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def _infer_labels_path(images_path: str) -> str:
    for a, b in (("images-idx3", "labels-idx1"), ("images.idx3", "labels.idx1"), ("images", "labels")):
        if a in os.path.basename(images_path):
            return os.path.join(os.path.dirname(images_path), os.path.basename(images_path).replace(a, b))
    raise DatasetFormatError(f"{images_path}: cannot infer the matching labels file; pass it explicitly")


def load_idx(path: str | os.PathLike, labels_path: str | os.PathLike | None = None) -> list[LabeledExample]:
    """Read an IDX image file (magic 0x00000803) and its label file (0x00000801).

    Unsigned-byte pixels are divided by 255.
    """
    path = os.fspath(path)
    labels_path = os.fspath(labels_path) if labels_path is not None else _infer_labels_path(path)
    images = read_idx(path)
    labels = read_idx(labels_path)
    with _open(path) as fh:
        magic = fh.read(4)
    with _open(labels_path) as fh:
        lmagic = fh.read(4)
    if magic != b"\x00\x00\x08\x03":
        raise DatasetFormatError(f"{path}: expected magic 0x00000803, got 0x{magic.hex()} at byte offset 0")
    if lmagic != b"\x00\x00\x08\x01":
        raise DatasetFormatError(
            f"{labels_path}: expected magic 0x00000801, got 0x{lmagic.hex()} at byte offset 0"
        )
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"{path}: {images.shape[0]} images but {labels.shape[0]} labels in {labels_path}"
        )
    pixels = images.astype(np.float64) / 255.0
    return [LabeledExample(pixels[i], int(labels[i])) for i in range(len(labels))]


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file."""
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_csv(path: str | os.PathLike) -> list[LabeledExample]:
    """Rows of ``label,pix0,...,pixN`` with 0-255 pixels; optional header row.

    Square pixel counts are reshaped to square images, others stay flat.
    """
    out: list[LabeledExample] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and row[0].strip().lower() == "label":
                continue
            try:
                label = int(row[0])
                pix = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
            if pix.size == 0:
                raise DatasetFormatError(f"{path}: line {lineno}: row has no pixel columns")
            if width is None:
                width = pix.size
            elif pix.size != width:
                raise DatasetFormatError(
                    f"{path}: line {lineno}: expected {width} pixel columns, found {pix.size}"
                )
            if label < 0 or np.any(pix < 0) or np.any(pix > 255):
                raise DatasetFormatError(f"{path}: line {lineno}: value out of range")
            side = math.isqrt(pix.size)
            img = pix / 255.0
            if side * side == pix.size:
                img = img.reshape(side, side)
            out.append(LabeledExample(img, label))
    return out


def load_dataset_file(path: str | os.PathLike, labels_path: str | None = None) -> list[LabeledExample]:
    """Dispatch on file extension: ``.csv`` or IDX otherwise."""
    if str(path).lower().endswith(".csv"):
        return load_csv(path)
    return load_idx(path, labels_path)
