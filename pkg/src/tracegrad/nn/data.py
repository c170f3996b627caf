"""Dataset readers: MNIST IDX files, CIFAR-10 binary batches, synthetic images.

IDX layout: a 4-byte magic ``00 00 <dtype> <ndim>`` followed by ``ndim``
big-endian uint32 dimensions and the row-major payload.  MNIST images use
magic ``0x00000803`` and labels ``0x00000801``.

MNIST is looked up in ``root`` (or ``$TRACEGRAD_DATA/mnist``, default
``~/.cache/tracegrad/mnist``) under the canonical file names, optionally
gzipped.  When no files are present, :func:`mnist_subset` falls back to the
5000-image MNIST sample bundled with ``mlxtend`` and caches it there as IDX.
"""
from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import DatasetMissingError

_IDX_DTYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).str[1:]: k for k, v in _IDX_DTYPES.items()}

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, ndim = data[2], data[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX type code {code:#04x}")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    dtype = _IDX_DTYPES[code]
    payload = np.frombuffer(data, dtype=dtype, offset=4 + 4 * ndim)
    if payload.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload holds {payload.size} items, header says {dims}")
    return payload.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr) -> None:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.str[1:])
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX code")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    body = arr.astype(_IDX_DTYPES[code]).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + body)


def read_cifar10_batch(path):
    """Images ``(n, 3, 32, 32)`` uint8 and labels ``(n,)`` from a binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of 3073")
    rec = raw.reshape(-1, 3073)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def default_cache(name="mnist") -> Path:
    base = os.environ.get("TRACEGRAD_DATA")
    return Path(base) / name if base else Path.home() / ".cache" / "tracegrad" / name


def _find(root: Path, stem: str):
    for cand in (root / stem, root / (stem + ".gz")):
        if cand.exists():
            return cand
    return None


def load_mnist(root=None):
    """``(x_train, y_train, x_test, y_test)`` from IDX files in ``root``."""
    root = Path(root) if root else default_cache()
    paths = {k: _find(root, v) for k, v in MNIST_FILES.items()}
    missing = [MNIST_FILES[k] for k, p in paths.items() if p is None]
    if missing:
        raise DatasetMissingError(f"MNIST files not found in {root}: {', '.join(missing)}")
    out = []
    for kind in ("train", "test"):
        images = read_idx(paths[f"{kind}_images"])
        labels = read_idx(paths[f"{kind}_labels"]).astype(np.int64)
        if images.shape[0] != labels.shape[0]:
            raise ValueError(f"MNIST {kind}: {images.shape[0]} images but {labels.shape[0]} labels")
        out += [images, labels]
    return tuple(out)


def cache_bundled_mnist(root=None, seed=0) -> Path:
    """Write mlxtend's bundled MNIST sample to ``root`` as shuffled IDX files.

    The 5000 images are split 4000 train / 1000 test after a seeded shuffle.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise DatasetMissingError(
            "no MNIST IDX files found and mlxtend (bundled MNIST sample) is not installed") from exc
    root = Path(root) if root else default_cache()
    root.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    write_idx(root / MNIST_FILES["train_images"], x[:4000])
    write_idx(root / MNIST_FILES["train_labels"], y[:4000])
    write_idx(root / MNIST_FILES["test_images"], x[4000:])
    write_idx(root / MNIST_FILES["test_labels"], y[4000:])
    return root


def mnist_subset(n_train=2000, n_test=1000, root=None, seed=0):
    """First ``n_train`` / ``n_test`` MNIST images as float ``(n, 1, 28, 28)`` in [0, 1]."""
    try:
        data = load_mnist(root)
    except DatasetMissingError:
        data = load_mnist(cache_bundled_mnist(root))
    x_tr, y_tr, x_te, y_te = data
    if n_train > len(y_tr) or n_test > len(y_te):
        raise DatasetMissingError(
            f"requested {n_train}/{n_test} images, available {len(y_tr)}/{len(y_te)}")
    scale = lambda a: (a.astype(np.float64) / 255.0)[:, None]
    return scale(x_tr[:n_train]), y_tr[:n_train], scale(x_te[:n_test]), y_te[:n_test]


def synthetic_separable(n, height=8, width=8, seed=0, noise=0.3):
    """Two linearly separable classes: a bright left or right half plus Gaussian noise.

    Returns ``(x, y)`` with ``x`` of shape ``(n, 1, height, width)``.
    """
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = noise * rng.standard_normal((n, 1, height, width))
    half = width // 2
    x[y == 0, :, :, :half] += 1.0
    x[y == 1, :, :, half:] += 1.0
    return x, y.astype(np.int64)


def load_dataset(spec: dict):
    """``(x_train, y_train, x_test, y_test)`` for a dataset spec dict."""
    name = spec.get("name", "mnist")
    seed = int(spec.get("seed", 0))
    if name == "mnist":
        return mnist_subset(int(spec.get("n_train", 2000)), int(spec.get("n_test", 1000)),
                            spec.get("root"), seed)
    if name == "synthetic":
        h, w = spec.get("shape", [8, 8])
        n_train, n_test = int(spec.get("n_train", 256)), int(spec.get("n_test", 128))
        x, y = synthetic_separable(n_train + n_test, h, w, seed, float(spec.get("noise", 0.3)))
        return x[:n_train], y[:n_train], x[n_train:], y[n_train:]
    if name == "cifar10":
        root = Path(spec.get("root") or default_cache("cifar10"))
        train = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
        test = root / "test_batch.bin"
        if not all(p.exists() for p in train + [test]):
            raise DatasetMissingError(f"CIFAR-10 binary batches not found in {root}")
        xs, ys = zip(*(read_cifar10_batch(p) for p in train))
        x_te, y_te = read_cifar10_batch(test)
        n_train, n_test = int(spec.get("n_train", 50000)), int(spec.get("n_test", 10000))
        scale = lambda a: a.astype(np.float64) / 255.0
        return (scale(np.concatenate(xs)[:n_train]), np.concatenate(ys)[:n_train],
                scale(x_te[:n_test]), y_te[:n_test])
    raise DatasetMissingError(f"unknown dataset {name!r}")
