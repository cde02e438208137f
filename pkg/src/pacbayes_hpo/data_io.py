"""Dataset ingestion: CSV tables and MNIST IDX binaries."""

from __future__ import annotations

import csv
import gzip
import importlib.util
import struct
from pathlib import Path

import numpy as np

from .models import Dataset

__all__ = [
    "read_idx",
    "write_idx",
    "read_csv_dataset",
    "write_csv_dataset",
    "load_mnist_idx",
    "find_mnist_files",
    "bundled_mnist_path",
    "load_bundled_mnist",
    "export_mnist_idx",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

_IDX_TYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into an array.

    The magic number encodes the element type in its third byte and the
    number of dimensions in its fourth; dimension sizes follow as big-endian
    32-bit integers.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim < 1:
        raise ValueError(f"{path}: bad IDX magic number {raw[:4].hex()}")
    head = 4 + 4 * ndim
    shape = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_TYPES[code]
    count = int(np.prod(shape))
    if len(raw) - head != count * dtype.itemsize:
        raise ValueError(f"{path}: payload size does not match header {shape}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=head).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("only uint8 arrays are supported")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def load_mnist_idx(images_path, labels_path, scale: bool = True) -> Dataset:
    """Load an MNIST image/label IDX pair as a flattened dataset."""
    missing = [str(p) for p in (images_path, labels_path) if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"missing MNIST IDX file(s): {', '.join(missing)}")
    for p, magic in ((images_path, IMAGE_MAGIC), (labels_path, LABEL_MAGIC)):
        with _open(Path(p)) as fh:
            (got,) = struct.unpack(">I", fh.read(4))
        if got != magic:
            raise ValueError(f"{p}: magic {got:#010x}, expected {magic:#010x}")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label counts differ")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if scale:
        x /= 255.0
    return Dataset(x, labels.astype(np.int64))


def find_mnist_files(directory, prefix: str = "train") -> tuple[Path, Path]:
    """Locate ``{prefix}-images-idx3-ubyte[.gz]`` and the matching labels file."""
    directory = Path(directory)
    out = []
    for stem in (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"):
        for cand in (directory / stem, directory / f"{stem}.gz"):
            if cand.exists():
                out.append(cand)
                break
        else:
            out.append(directory / stem)
    return out[0], out[1]


def read_csv_dataset(path, label_dtype=None) -> Dataset:
    """Read a CSV with a header row whose last column holds the label."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r]
    if header is None or not rows:
        raise ValueError(f"{path}: empty CSV")
    if any(len(r) != len(header) for r in rows):
        raise ValueError(f"{path}: ragged rows")
    table = np.array(rows, dtype=np.float64)
    labels = table[:, -1]
    if label_dtype is None and np.all(labels == np.round(labels)):
        label_dtype = np.int64
    return Dataset(table[:, :-1], labels.astype(label_dtype or np.float64))


def write_csv_dataset(path, data: Dataset) -> None:
    d = data.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["label"])
        for row, lab in zip(data.inputs, data.labels):
            w.writerow([repr(float(v)) for v in row] + [lab])


def bundled_mnist_path() -> Path:
    """Path of the 5,000-image MNIST subset shipped with ``mlxtend`` (not imported)."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("no local MNIST copy: install mlxtend or supply IDX files")
    path = Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise FileNotFoundError(f"bundled MNIST subset not found at {path}")
    return path


def load_bundled_mnist(scale: bool = True) -> Dataset:
    """The bundled subset: 5,000 flattened 28x28 images, 500 per digit."""
    with gzip.open(bundled_mnist_path(), "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.float64)
    x = table[:, :-1]
    if scale:
        x = x / 255.0
    return Dataset(x, table[:, -1].astype(np.int64))


def export_mnist_idx(data: Dataset, directory, prefix: str = "train") -> tuple[Path, Path]:
    """Write a [0, 1]-scaled image dataset as an MNIST-style IDX pair."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.rint(np.clip(data.inputs, 0, 1) * 255).astype(np.uint8).reshape(-1, 28, 28)
    img, lab = find_mnist_files(directory, prefix)
    write_idx(img, images)
    write_idx(lab, np.asarray(data.labels, dtype=np.uint8))
    return img, lab
