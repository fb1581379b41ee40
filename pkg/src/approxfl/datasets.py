"""Dataset files and the bundled synthetic image set.

Binary layout (little endian)::

    magic  b"AFLD"
    u32    version (1)
    u32    sample count N
    u32    number of dims D
    u32    dims[D]            e.g. 3 8 8
    u32    class count J
    f32    data[N * prod(dims)]   row-major, one sample after another
    i32    labels[N]

CSV layout: the first line is ``N,J,D,dims...``; each following line is one
sample, ``label,v1,...,vK`` with the values in row-major order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

MAGIC = b"AFLD"
VERSION = 1
BUNDLED = {"synth8x8-train": "synth8x8_train.bin", "synth8x8-test": "synth8x8_test.bin"}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray       # (N, *dims) float32
    y: np.ndarray       # (N,) int64
    num_classes: int

    @property
    def shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def __len__(self) -> int:
        return len(self.y)


def write_bin(path, ds: Dataset) -> None:
    x = np.ascontiguousarray(ds.x, dtype="<f4")
    head = MAGIC + struct.pack("<III", VERSION, len(ds.y), x.ndim - 1)
    head += struct.pack(f"<{x.ndim - 1}I", *x.shape[1:]) + struct.pack("<I", ds.num_classes)
    with open(path, "wb") as f:
        f.write(head)
        f.write(x.tobytes())
        f.write(np.asarray(ds.y, dtype="<i4").tobytes())


def read_bin(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise DatasetError(f"{path}: empty file")
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path}: not a dataset file (bad magic)")
    try:
        version, n, nd = struct.unpack_from("<III", raw, 4)
        if version != VERSION:
            raise DatasetError(f"{path}: unsupported version {version}")
        dims = struct.unpack_from(f"<{nd}I", raw, 16)
        (classes,) = struct.unpack_from("<I", raw, 16 + 4 * nd)
    except struct.error:
        raise DatasetError(f"{path}: truncated header") from None
    off = 20 + 4 * nd
    k = int(np.prod(dims)) if dims else 1
    need = off + 4 * n * k + 4 * n
    if len(raw) != need:
        raise DatasetError(f"{path}: expected {need} bytes for {n} samples of {dims}, found {len(raw)}")
    x = np.frombuffer(raw, "<f4", n * k, off).reshape((n,) + tuple(dims)).astype(np.float32)
    y = np.frombuffer(raw, "<i4", n, off + 4 * n * k).astype(np.int64)
    _check_labels(path, y, classes)
    return Dataset(x, y, classes)


def write_csv(path, ds: Dataset) -> None:
    dims = ds.x.shape[1:]
    flat = ds.x.reshape(len(ds.y), -1)
    with open(path, "w") as f:
        f.write(",".join(map(str, [len(ds.y), ds.num_classes, len(dims), *dims])) + "\n")
        for label, row in zip(ds.y, flat):
            f.write(str(int(label)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    try:
        head = [int(v) for v in lines[0].split(",")]
        n, classes, nd = head[:3]
        dims = tuple(head[3:3 + nd])
        if len(dims) != nd:
            raise ValueError
    except ValueError:
        raise DatasetError(f"{path}: malformed header") from None
    rows = lines[1:]
    if len(rows) != n:
        raise DatasetError(f"{path}: header says {n} samples, found {len(rows)}")
    k = int(np.prod(dims))
    x = np.empty((n, k), np.float32)
    y = np.empty(n, np.int64)
    for i, line in enumerate(rows):
        vals = line.split(",")
        if len(vals) != k + 1:
            raise DatasetError(f"{path}: line {i + 2} has {len(vals) - 1} values, expected {k}")
        y[i] = int(vals[0])
        x[i] = np.array(vals[1:], dtype=np.float32)
    _check_labels(path, y, classes)
    return Dataset(x.reshape((n,) + dims), y, classes)


def _check_labels(path, y, classes):
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise DatasetError(f"{path}: label outside [0, {classes})")


def normalize(ds: Dataset, stats=None):
    """Per-channel standardisation; returns the dataset and the (mean, std) used."""
    axes = (0,) + tuple(range(2, ds.x.ndim))
    if stats is None:
        mean = ds.x.mean(axis=axes, dtype=np.float64)
        std = ds.x.std(axis=axes, dtype=np.float64)
        std = np.where(std > 0, std, 1.0)
        stats = (mean, std)
    mean, std = stats
    shape = (1, -1) + (1,) * (ds.x.ndim - 2)
    x = ((ds.x - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)
    return Dataset(x, ds.y, ds.num_classes), stats


def ingest_dataset(path: str, fmt: str = "bin", expected_shape=None) -> Dataset:
    """Load a dataset file (or ``bundled:<name>``) without normalising it."""
    if path.startswith("bundled:"):
        name = path.split(":", 1)[1]
        if name not in BUNDLED:
            raise DatasetError(f"unknown bundled dataset {name!r}")
        with resources.as_file(resources.files("approxfl") / "data" / BUNDLED[name]) as p:
            ds = read_bin(p)
    elif fmt == "bin":
        ds = read_bin(path)
    elif fmt == "csv":
        ds = read_csv(path)
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")
    if expected_shape is not None and tuple(expected_shape) != ds.shape:
        raise DatasetError(f"{path}: sample shape {ds.shape} does not match expected {tuple(expected_shape)}")
    return ds


# ---------------------------------------------------------------------------
# synthetic data

def make_synthetic(n: int, num_classes: int = 10, shape=(3, 8, 8), seed: int = 0, noise: float = 1.0) -> Dataset:
    """Seeded 10-class image set: smooth class prototypes plus jitter and noise.

    Each class has a prototype built from a few random low-frequency
    sinusoids per channel. A sample is its prototype with random contrast,
    a one-pixel random shift and Gaussian noise. Labels are balanced.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    protos = np.zeros((num_classes, c, h, w))
    for j in range(num_classes):
        for ch in range(c):
            for _ in range(3):
                fy, fx = rng.integers(0, 3, 2)
                phase = rng.uniform(0, 2 * np.pi)
                protos[j, ch] += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    labels = rng.permutation(np.arange(n) % num_classes)
    contrast = rng.uniform(0.7, 1.3, n)
    shifts = rng.integers(-1, 2, (n, 2))
    x = np.empty((n, c, h, w))
    for i in range(n):
        img = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(1, 2))
        x[i] = contrast[i] * img
    x += noise * rng.standard_normal(x.shape)
    x = 127.5 + 50.0 * x
    return Dataset(x.astype(np.float32), labels.astype(np.int64), num_classes)


def bundled_split(seed: int = 0):
    """The bundled 2,000-sample set: first 1,000 train, last 1,000 test."""
    ds = make_synthetic(2000, seed=seed)
    return (Dataset(ds.x[:1000], ds.y[:1000], ds.num_classes),
            Dataset(ds.x[1000:], ds.y[1000:], ds.num_classes))


def write_bundled(directory) -> None:
    d = Path(directory)
    train, test = bundled_split()
    write_bin(d / BUNDLED["synth8x8-train"], train)
    write_bin(d / BUNDLED["synth8x8-test"], test)
