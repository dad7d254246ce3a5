"""Datasets, IDX ingestion, synthetic clusters and two-view augmentation."""
from __future__ import annotations

import os
import queue
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConsistencyError, ContractError, FormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_UBYTE = 0x08


class Dataset:
    """Samples with stable integer ids and optional labels.

    Label reads go through :attr:`labels`, which counts accesses so that
    pretext training can be audited for label leakage.
    """

    def __init__(self, samples: np.ndarray, labels: np.ndarray | None = None, ids: np.ndarray | None = None):
        self.samples = np.asarray(samples, dtype=np.float64)
        n = self.samples.shape[0]
        self.ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
        if self.ids.shape != (n,) or not np.array_equal(np.sort(self.ids), np.arange(n)):
            raise ConsistencyError("dataset ids must be unique and dense in [0, D)")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise ConsistencyError(f"{labels.shape[0]} labels for {n} samples")
        self._labels = labels
        self.label_reads = 0

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def labels(self) -> np.ndarray:
        self.label_reads += 1
        if self._labels is None:
            raise ConsistencyError("dataset carries no labels")
        return self._labels

    def subset(self, index: np.ndarray) -> "Dataset":
        index = np.asarray(index)
        labels = self._labels[index] if self._labels is not None else None
        return Dataset(self.samples[index], labels)


# ---------------------------------------------------------------- IDX files

def _read_idx(path: str | os.PathLike) -> tuple[int, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or dtype != _UBYTE or ndim < 1:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise TruncatedFileError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    if len(raw) > header + count:
        raise FormatError(f"{path}: {len(raw) - header - count} trailing bytes after IDX payload")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header, count=count).reshape(dims)
    return magic, data


def _write_idx(path: str | os.PathLike, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.uint8)
    header = struct.pack(">HBB", 0, _UBYTE, data.ndim) + struct.pack(f">{data.ndim}I", *data.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def load_idx(images_path, labels_path=None) -> Dataset:
    """Decode IDX ubyte files into a Dataset with values scaled to [0, 1].

    Images of shape D x H x W become D x 1 x H x W; 2-D files (D x F) load
    as flat vectors.
    """
    magic, images = _read_idx(images_path)
    if magic == IDX_IMAGES_MAGIC:
        samples = images[:, None, :, :]
    elif images.ndim in (2, 4):
        samples = images
    else:
        raise FormatError(f"{images_path}: unexpected IDX magic 0x{magic:08x} for sample data")
    labels = None
    if labels_path is not None:
        lmagic, labels = _read_idx(labels_path)
        if lmagic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
        if labels.shape[0] != samples.shape[0]:
            raise ConsistencyError(f"{samples.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(samples.astype(np.float64) / 255.0, labels)


def write_idx(ds: Dataset, images_path, labels_path=None) -> None:
    """Inverse of :func:`load_idx`; values are quantized to bytes."""
    x = np.rint(np.clip(ds.samples, 0.0, 1.0) * 255.0).astype(np.uint8)
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    _write_idx(images_path, x)
    if labels_path is not None:
        _write_idx(labels_path, ds.labels.astype(np.uint8))


# ---------------------------------------------------------------- synthetic corpus

def synth_clusters(n_classes: int, n_per_class: int, shape, class_sep: float, noise_sigma: float,
                   seed: int, squash: float | None = None,
                   nuisance: "AugmentationConfig | None" = None, noise_smooth: float = 0.0) -> Dataset:
    """Gaussian clusters around prototypes at distance ``class_sep`` from the origin.

    Vector shapes use isotropic random directions; image shapes use smoothed
    random patterns rescaled to the same norm. Raw values are mapped to
    [0, 1] by ``0.5 + raw / (2 * squash)`` and clipped. Samples are ordered
    class-major.

    ``noise_smooth`` > 0 low-pass filters the per-sample noise of image
    shapes (rescaled to keep ``noise_sigma`` per pixel), so instance identity
    survives small translations. ``nuisance`` optionally passes every sample once through an augmentation
    chain (its own seeded stream), so that within-class variation includes the
    shifts, flips and jitter the pretext views later randomize.
    """
    if n_classes < 2:
        raise ContractError("synth_clusters needs at least two classes")
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    protos = rng.standard_normal((n_classes,) + shape)
    if len(shape) == 3:
        protos = np.stack([gaussian_filter(p, sigma=(0, 1.5, 1.5)) for p in protos])
    protos = protos.reshape(n_classes, dim)
    protos *= class_sep / np.linalg.norm(protos, axis=1, keepdims=True)
    noise = rng.standard_normal((n_classes * n_per_class,) + shape)
    if noise_smooth > 0 and len(shape) == 3:
        noise = gaussian_filter(noise, sigma=(0, 0, noise_smooth, noise_smooth))
        noise /= noise.std()
    noise = noise.reshape(n_classes, n_per_class, dim) * noise_sigma
    raw = (protos[:, None, :] + noise).reshape(n_classes * n_per_class, dim)
    if squash is None:
        squash = 3.0 * np.sqrt(class_sep ** 2 / dim + noise_sigma ** 2)
    x = np.clip(0.5 + raw / (2.0 * squash), 0.0, 1.0).reshape((-1,) + shape)
    if nuisance is not None:
        x = augment_batch(x, nuisance, np.random.default_rng([seed, 0x5E]))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(x, labels)


def train_val_split(ds: Dataset, n_val_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; the labels read here are generation metadata, not training input."""
    labels = ds._labels
    if labels is None:
        raise ConsistencyError("stratified split needs labels")
    rng = np.random.default_rng(seed)
    val_idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        val_idx.append(rng.choice(members, size=n_val_per_class, replace=False))
    val_idx = np.sort(np.concatenate(val_idx))
    train_idx = np.setdiff1d(np.arange(len(ds)), val_idx)
    train_idx = train_idx[rng.permutation(train_idx.size)]
    return ds.subset(train_idx), ds.subset(val_idx)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentationConfig:
    crop_pad: int = 4
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    vector_noise_sigma: float = 0.1
    vector_dropout_prob: float = 0.1

    def __post_init__(self):
        for name in ("flip_prob", "grayscale_prob", "vector_dropout_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if self.crop_pad < 0 or self.jitter_strength < 0 or self.vector_noise_sigma < 0:
            raise ContractError("augmentation magnitudes must be non-negative")


def _augment_images(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = x.shape
    out = x.copy()
    p = cfg.crop_pad
    if p > 0:
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, size=n)
        dx = rng.integers(0, 2 * p + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    if cfg.flip_prob > 0:
        flip = rng.random(n) < cfg.flip_prob
        out[flip] = out[flip, :, :, ::-1]
    if cfg.jitter_strength > 0:
        s = cfg.jitter_strength
        bright = rng.uniform(1 - s, 1 + s, size=(n, 1, 1, 1))
        contrast = rng.uniform(1 - s, 1 + s, size=(n, 1, 1, 1))
        out = out * bright
        mean = out.mean(axis=(1, 2, 3), keepdims=True)
        out = (out - mean) * contrast + mean
    if c == 3 and cfg.grayscale_prob > 0:
        gray = rng.random(n) < cfg.grayscale_prob
        lum = np.tensordot(np.array([0.299, 0.587, 0.114]), out[gray], axes=([0], [1]))
        out[gray] = np.repeat(lum[:, None], 3, axis=1)
    return np.clip(out, 0.0, 1.0)


def _augment_vectors(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    out = x.copy()
    if cfg.vector_noise_sigma > 0:
        out = out + rng.standard_normal(out.shape) * cfg.vector_noise_sigma
    if cfg.vector_dropout_prob > 0:
        out = np.where(rng.random(out.shape) < cfg.vector_dropout_prob, 0.0, out)
    return np.clip(out, 0.0, 1.0)


def augment_batch(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply one independent draw of the augmentation chain to every row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return _augment_images(x, cfg, rng)
    if x.ndim == 2:
        return _augment_vectors(x, cfg, rng)
    raise ContractError(f"cannot augment batch of shape {x.shape}")


def augment_two_views(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmentations of a single sample."""
    x = np.asarray(x, dtype=np.float64)[None]
    return augment_batch(x, cfg, rng)[0], augment_batch(x, cfg, rng)[0]


def view_rng(seed: int, epoch: int, batch: int, view: int) -> np.random.Generator:
    """Independent stream per (epoch, batch, view); preparation order cannot matter."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0xA6, epoch, batch, view]))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 0xB7, epoch]).generate_state(1)[0])


def minibatches(ds: Dataset, n: int, epoch_seed: int) -> list[np.ndarray]:
    """Seeded shuffle of ids cut into full batches; the partial tail is dropped."""
    if n > len(ds):
        raise ContractError(f"batch size {n} exceeds dataset size {len(ds)}")
    order = ds.ids[np.random.default_rng(epoch_seed).permutation(len(ds))]
    return [order[i:i + n] for i in range(0, len(ds) - n + 1, n)]


@dataclass
class BatchViews:
    ids: np.ndarray
    x_q: np.ndarray
    x_k: np.ndarray
    epoch: int = 0
    batch: int = 0


def make_views(ds: Dataset, ids: np.ndarray, cfg: AugmentationConfig, seed: int, epoch: int, batch: int) -> BatchViews:
    x = ds.samples[ids]
    return BatchViews(
        ids=ids,
        x_q=augment_batch(x, cfg, view_rng(seed, epoch, batch, 0)),
        x_k=augment_batch(x, cfg, view_rng(seed, epoch, batch, 1)),
        epoch=epoch,
        batch=batch,
    )


def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Produce items on a worker thread, at most ``depth`` ahead of the consumer."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    errors: list[BaseException] = []

    def work():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            errors.append(exc)
        finally:
            q.put(done)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()
    if errors:
        raise errors[0]
