"""Datasets: synthetic Gaussian clusters, IDX (MNIST) files, non-IID splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .policy import DatasetSpec

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

EVAL_FRACTION = 10  # last 1/10 of every client's samples is held out


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    partitions: tuple[tuple[int, int], ...]
    task: str = "classification"
    classes: int = 0
    image_shape: tuple[int, int] | None = None

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def client_slice(self, client: int) -> tuple[int, int]:
        return self.partitions[client]

    def split(self, client: int) -> tuple[int, int, int]:
        """``(start, eval_start, stop)`` of the client's canonical range."""
        lo, hi = self.partitions[client]
        n_eval = (hi - lo) // EVAL_FRACTION
        return lo, hi - n_eval, hi

    def train_view(self, client: int, mask: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        lo, mid, _ = self.split(client)
        if mask:
            lo += int(np.floor(mask * (mid - lo)))
        return self.features[lo:mid], self.labels[lo:mid]

    def eval_view(self, client: int) -> tuple[np.ndarray, np.ndarray]:
        _, mid, hi = self.split(client)
        return self.features[mid:hi], self.labels[mid:hi]

    def histogram(self, client: int) -> np.ndarray:
        lo, hi = self.partitions[client]
        return np.bincount(self.labels[lo:hi].astype(np.int64), minlength=self.classes)


def _apportion(p: np.ndarray, n: int) -> np.ndarray:
    """Integer counts summing to ``n`` in proportion ``p`` (largest remainder)."""
    raw = p * n
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def generate_synthetic(
    clients: int,
    samples_per_client: int,
    dims: int,
    classes: int,
    alpha: float,
    seed: int,
    *,
    task: str = "classification",
    separation: float = 3.0,
    noise: float = 0.1,
) -> Dataset:
    """Gaussian class clusters with Dirichlet(alpha) label skew per client.

    For ``task="regression"`` the cluster machinery only shapes the inputs and
    the target is a fixed linear function of the features plus Gaussian noise.
    """
    if min(clients, samples_per_client, dims, classes) < 1:
        raise DataError("clients, samples_per_client, dims and classes must be positive")
    if alpha <= 0:
        raise DataError("alpha must be positive")
    if task == "classification" and classes > samples_per_client:
        raise DataError(f"{classes} classes cannot fit in {samples_per_client} samples per client")

    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(classes, dims))
    feats, labels, parts = [], [], []
    for c in range(clients):
        props = rng.dirichlet(np.full(classes, float(alpha)))
        y = np.repeat(np.arange(classes), _apportion(props, samples_per_client))
        rng.shuffle(y)
        x = centers[y] + rng.normal(size=(samples_per_client, dims))
        feats.append(x)
        labels.append(y)
        parts.append((c * samples_per_client, (c + 1) * samples_per_client))
    X = np.concatenate(feats)
    y = np.concatenate(labels).astype(np.int64)
    if task == "regression":
        w = rng.normal(size=dims)
        y = X @ w / np.sqrt(dims) + noise * rng.normal(size=len(X))
        return Dataset(X, y, tuple(parts), task="regression", classes=0)
    return Dataset(X, y, tuple(parts), task="classification", classes=classes)


def partition(dataset: Dataset, clients: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Dirichlet label-skew split into disjoint, sorted index arrays."""
    n = len(dataset)
    if clients < 1:
        raise DataError("need at least one client")
    if clients > n:
        raise DataError(f"more clients ({clients}) than samples ({n})")
    if clients == 1:
        return [np.arange(n)]
    rng = np.random.default_rng(seed)
    if dataset.task == "classification":
        groups = [np.flatnonzero(dataset.labels == k) for k in np.unique(dataset.labels)]
    else:
        groups = [np.arange(n)]
    buckets: list[list[np.ndarray]] = [[] for _ in range(clients)]
    for idx in groups:
        idx = rng.permutation(idx)
        cuts = np.cumsum(_apportion(rng.dirichlet(np.full(clients, float(alpha))), len(idx)))[:-1]
        for c, chunk in enumerate(np.split(idx, cuts)):
            buckets[c].append(chunk)
    return [np.sort(np.concatenate(b)) for b in buckets]


def with_partition(dataset: Dataset, parts: list[np.ndarray]) -> Dataset:
    """Reorder samples so each client's indices form one contiguous range."""
    order = np.concatenate(parts) if parts else np.arange(0)
    bounds = np.cumsum([0] + [len(p) for p in parts])
    ranges = tuple((int(bounds[i]), int(bounds[i + 1])) for i in range(len(parts)))
    return Dataset(dataset.features[order], dataset.labels[order], ranges, dataset.task, dataset.classes, dataset.image_shape)


# -- IDX --------------------------------------------------------------------


def _read_header(buf: bytes, path: Path, magic: int, ndim: int) -> tuple[int, ...]:
    if len(buf) < 4:
        raise DataError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise DataError(f"{path}: wrong magic 0x{got:08x} (expected 0x{magic:08x})")
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise DataError(f"{path}: truncated header")
    return struct.unpack(f">{ndim}I", buf[4:need])


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    images_path, labels_path = Path(images_path), Path(labels_path)
    ibuf = images_path.read_bytes()
    lbuf = labels_path.read_bytes()
    count, rows, cols = _read_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    (lcount,) = _read_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if count != lcount:
        raise DataError(f"image/label count mismatch ({count} images, {lcount} labels)")
    payload = count * rows * cols
    if len(ibuf) - 16 < payload:
        raise DataError(f"{images_path}: truncated payload")
    if len(lbuf) - 8 < lcount:
        raise DataError(f"{labels_path}: truncated payload")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=payload, offset=16)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    classes = int(labels.max()) + 1 if count else 0
    return Dataset(features, labels, ((0, count),), "classification", classes, (rows, cols))


def write_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    if dataset.image_shape is None:
        raise DataError("dataset has no image shape")
    rows, cols = dataset.image_shape
    n = len(dataset)
    pixels = np.rint(dataset.features * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def build_dataset(spec: DatasetSpec, clients: int, seed: int) -> Dataset:
    if spec.kind == "idx":
        ds = load_idx(spec.images, spec.labels)
        return with_partition(ds, partition(ds, clients, spec.alpha, seed))
    return generate_synthetic(
        clients,
        spec.samples_per_client,
        spec.dims,
        spec.classes,
        spec.alpha,
        seed,
        task=spec.kind,
        separation=spec.separation,
        noise=spec.noise,
    )
