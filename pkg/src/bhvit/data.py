"""Dataset ingestion, augmentation and the teacher-logits sidecar."""

from __future__ import annotations

import csv
import os
import queue
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeError

DATA_ENV = "BHVIT_DATA"
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
MANIFEST = "labels.csv"
TEACHER_MAGIC = b"BHTL"


class DataFileError(FileNotFoundError):
    """A required data file is missing; ``path`` names it."""

    def __init__(self, path, what: str = "file"):
        self.path = str(path)
        super().__init__(f"{what} not found: {self.path}")


@dataclass
class Dataset:
    """uint8 images ``[N, H, W, 3]`` with integer labels and source indices."""

    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ShapeError(f"images must be [N, H, W, 3], got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.indices):
            raise ShapeError("images, labels and indices must have equal length")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int, seed: int = 0, stratified: bool = True) -> "Dataset":
        """First ``n`` samples of a seeded permutation, balanced per class when ``stratified``."""
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        if stratified:
            per = np.full(self.num_classes, n // self.num_classes)
            per[: n % self.num_classes] += 1
            picks = []
            for c in range(self.num_classes):
                pool = np.flatnonzero(self.labels == c)
                picks.append(rng.permutation(pool)[: per[c]])
            sel = np.sort(np.concatenate(picks))
        else:
            sel = np.sort(rng.permutation(len(self))[:n])
        return Dataset(self.images[sel], self.labels[sel], self.indices[sel], self.num_classes)


def default_data_dir() -> Path | None:
    value = os.environ.get(DATA_ENV)
    return Path(value) if value else None


def _cifar_dir(root: Path) -> Path:
    for cand in (root, root / "cifar-10-batches-bin"):
        if (cand / CIFAR_TRAIN_FILES[0]).exists() or (cand / CIFAR_TEST_FILES[0]).exists():
            return cand
    return root


def read_cifar_binary(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, "CIFAR batch")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ShapeError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar_binary(path, images: np.ndarray, labels: np.ndarray):
    """Write ``[N, 32, 32, 3]`` uint8 images in the CIFAR-10 binary record layout."""
    if images.shape[1:] != (32, 32, 3):
        raise ShapeError(f"CIFAR records hold 32x32x3 images, got {images.shape[1:]}")
    rec = np.empty((len(images), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    rec.tofile(path)


def load_cifar10(root, split: str = "train") -> Dataset:
    root = _cifar_dir(Path(root))
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    present = [root / f for f in files if (root / f).exists()]
    if not present:
        raise DataFileError(root / files[0], "CIFAR batch")
    parts = [read_cifar_binary(p) for p in present]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, np.arange(len(labels)), 10)


def load_image_dir(root) -> Dataset:
    """Directory of image files plus ``labels.csv`` rows ``filename,label``."""
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DataFileError(manifest, "label manifest")
    names, labels = [], []
    with open(manifest, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "filename":
                continue
            names.append(row[0])
            labels.append(int(row[1]))
    images = []
    for name in names:
        p = root / name
        if not p.is_file():
            raise DataFileError(p, "image")
        with Image.open(p) as im:
            images.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ShapeError(f"{root}: images have mixed sizes {sorted(shapes)}")
    labels_arr = np.asarray(labels, dtype=np.int64)
    return Dataset(np.stack(images), labels_arr, np.arange(len(labels_arr)), int(labels_arr.max()) + 1)


def load_dataset(root, split: str = "train") -> Dataset:
    """Dispatch on directory contents: CIFAR binary batches or an image directory.

    An image directory may hold ``train/`` and ``test/`` subdirectories.
    """
    root = Path(root)
    if not root.exists():
        raise DataFileError(root, "data directory")
    cdir = _cifar_dir(root)
    if any((cdir / f).exists() for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES):
        return load_cifar10(cdir, split)
    if (root / split / MANIFEST).is_file():
        return load_image_dir(root / split)
    if (root / MANIFEST).is_file():
        return load_image_dir(root)
    raise DataFileError(root / MANIFEST, "CIFAR batches or label manifest")


# -- preprocessing --------------------------------------------------------------
def resize_batch(images: np.ndarray, size: int) -> np.ndarray:
    h = images.shape[1]
    if h == size:
        return images
    if size % h == 0 and images.shape[2] == h:
        f = size // h
        return images.repeat(f, axis=1).repeat(f, axis=2)
    return np.stack([np.asarray(Image.fromarray(im).resize((size, size), Image.BILINEAR)) for im in images])


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and random crop after zero padding by ``pad`` pixels."""
    n, h, w, _ = images.shape
    flip = rng.random(n) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, ::-1]
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    for i in range(n):
        out[i] = padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def normalize(images: np.ndarray) -> np.ndarray:
    return ((images.astype(np.float32) / 255.0) - CIFAR_MEAN) / CIFAR_STD


def iterate_batches(ds: Dataset, batch_size: int, size: int, rng: np.random.Generator | None = None,
                    shuffle: bool = False, augment_images: bool = False, prefetch: int = 0):
    """Yield ``(x [B, size, size, 3] float32, labels, indices)``.

    All randomness is drawn from ``rng`` on the calling thread before any
    worker runs, so the batch stream is identical with or without prefetching.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    if (shuffle or augment_images) and rng is None:
        raise ConfigError("shuffling or augmentation needs a random generator")
    order = rng.permutation(len(ds)) if shuffle else np.arange(len(ds))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    seeds = rng.integers(0, 2**63 - 1, len(chunks)) if augment_images else [0] * len(chunks)

    def build(sel, seed):
        imgs = ds.images[sel]
        if augment_images:
            imgs = augment(imgs, np.random.default_rng(seed))
        return normalize(resize_batch(imgs, size)), ds.labels[sel], ds.indices[sel]

    if prefetch <= 0:
        for sel, seed in zip(chunks, seeds):
            yield build(sel, seed)
        return

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    stop = threading.Event()

    def worker():
        try:
            for sel, seed in zip(chunks, seeds):
                if stop.is_set():
                    return
                q.put(build(sel, seed))
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
            return
        q.put(None)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is None:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(0.01)


# -- teacher logits ----------------------------------------------------------------
def write_teacher_logits(path, logits: np.ndarray):
    logits = np.asarray(logits, dtype="<f4")
    if logits.ndim != 2:
        raise ShapeError(f"teacher logits must be [samples, classes], got {logits.shape}")
    with open(path, "wb") as fh:
        fh.write(TEACHER_MAGIC + struct.pack("<II", *logits.shape))
        fh.write(logits.tobytes(order="C"))


def read_teacher_logits(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, "teacher logits")
    blob = path.read_bytes()
    if blob[:4] != TEACHER_MAGIC:
        raise ConfigError(f"{path}: bad magic {blob[:4]!r}")
    n, k = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + 4 * n * k:
        raise ShapeError(f"{path}: expected {n}x{k} floats, file holds {(len(blob) - 12) // 4}")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(n, k).astype(np.float32)


# -- synthetic data ----------------------------------------------------------------
def synthetic_images(n: int, num_classes: int = 10, size: int = 32, seed: int = 0,
                     noise: float = 40.0) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditioned oriented gratings in class-specific colours plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    proto_rng = np.random.default_rng(10_000 + num_classes)
    colours = proto_rng.uniform(40, 215, size=(num_classes, 3))
    angles = np.pi * np.arange(num_classes) / num_classes
    freqs = 2 * np.pi * proto_rng.uniform(2, 5, num_classes) / size
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, c in enumerate(labels):
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freqs[c] * (np.cos(angles[c]) * xx + np.sin(angles[c]) * yy) + phase)
        img = colours[c] + 60.0 * wave[..., None] + rng.normal(0, noise, (size, size, 3))
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def write_synthetic_cifar(root, n_train: int = 2000, n_test: int = 500, seed: int = 0) -> Path:
    """Write a synthetic dataset in CIFAR-10 binary layout under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    imgs, labels = synthetic_images(n_train, seed=seed)
    write_cifar_binary(root / CIFAR_TRAIN_FILES[0], imgs, labels)
    imgs, labels = synthetic_images(n_test, seed=seed + 1)
    write_cifar_binary(root / CIFAR_TEST_FILES[0], imgs, labels)
    return root
