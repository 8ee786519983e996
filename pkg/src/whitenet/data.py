"""Dataset ingestion and synthesis.

IDX files (the MNIST container format) are parsed with strict header
validation; gzip-compressed files are decompressed transparently. Synthetic
generators produce seeded, bit-reproducible datasets for hermetic tests and
for running the experiment presets without the MNIST files on disk.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from .errors import DimensionError, IdxFormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, features)
    targets: np.ndarray  # (n, target_dim); equals inputs for autoencoding
    name: str = ""
    split: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise DimensionError("inputs and targets must be 2-D row stacks")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionError(
                f"row count mismatch: {self.inputs.shape[0]} inputs vs "
                f"{self.targets.shape[0]} targets"
            )
        if not (np.isfinite(self.inputs).all() and np.isfinite(self.targets).all()):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self):
        return self.inputs.shape[0]

    def take(self, indices, split=None):
        return Dataset(
            self.inputs[indices],
            self.targets[indices],
            name=self.name,
            split=self.split if split is None else split,
        )


def _read_file(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _read_be_u32(buf, offset, what):
    if offset + 4 > len(buf):
        raise IdxFormatError(f"truncated file while reading {what}", offset)
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path, *, classes: int = 10) -> Dataset:
    """Parse an IDX image/label file pair into a dataset.

    Pixels are scaled to [0, 1]; labels become one-hot rows. Malformed
    headers, truncated payloads, and image/label count mismatches raise
    IdxFormatError with the failing byte offset.
    """
    img = _read_file(images_path)
    magic = _read_be_u32(img, 0, "images magic")
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(f"bad images magic 0x{magic:08x}", 0)
    count = _read_be_u32(img, 4, "image count")
    rows = _read_be_u32(img, 8, "image rows")
    cols = _read_be_u32(img, 12, "image cols")
    payload = count * rows * cols
    if len(img) != 16 + payload:
        raise IdxFormatError(
            f"images payload is {len(img) - 16} bytes, header promises {payload}",
            min(len(img), 16 + payload),
        )
    pixels = np.frombuffer(img, dtype=np.uint8, count=payload, offset=16)
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0

    lab = _read_file(labels_path)
    magic = _read_be_u32(lab, 0, "labels magic")
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"bad labels magic 0x{magic:08x}", 0)
    lcount = _read_be_u32(lab, 4, "label count")
    if lcount != count:
        raise IdxFormatError(f"{lcount} labels for {count} images", 4)
    if len(lab) != 8 + lcount:
        raise IdxFormatError(
            f"labels payload is {len(lab) - 8} bytes, header promises {lcount}",
            min(len(lab), 8 + lcount),
        )
    labels = np.frombuffer(lab, dtype=np.uint8, count=lcount, offset=8)
    if labels.size and labels.max() >= classes:
        raise IdxFormatError(f"label {labels.max()} out of range for {classes} classes", 8)
    targets = np.zeros((count, classes))
    targets[np.arange(count), labels] = 1.0
    return Dataset(inputs, targets, name="idx")


def downsample(dataset: Dataset) -> Dataset:
    """28x28 rows -> 10x10: crop the 4-pixel border to 20x20, then 2x2
    average-pool. Linear, contractive, and the identity on constants."""
    if dataset.inputs.shape[1] != 784:
        raise DimensionError(
            f"downsample expects 784-dim image rows, got {dataset.inputs.shape[1]}"
        )
    imgs = dataset.inputs.reshape(-1, 28, 28)[:, 4:24, 4:24]
    pooled = imgs.reshape(-1, 10, 2, 10, 2).mean(axis=(2, 4))
    return replace(
        dataset,
        inputs=pooled.reshape(-1, 100),
        targets=(
            pooled.reshape(-1, 100)
            if dataset.targets.shape == dataset.inputs.shape
            else dataset.targets
        ),
        name=dataset.name + "-10x10" if dataset.name else "10x10",
    )


def synthetic_gaussian(n, dim, mean, covariance, seed) -> Dataset:
    """Seeded draws from N(mean, covariance); targets equal inputs.

    ``covariance`` may be a full PSD matrix, a per-dimension variance
    vector, or a scalar variance. Rows are mean + L z for L = U sqrt(diag)
    from the covariance eigendecomposition, so the first rows of draws with
    the same seed agree regardless of n.
    """
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,))
    cov = np.asarray(covariance, dtype=np.float64)
    if cov.ndim == 0:
        cov = np.eye(dim) * float(cov)
    elif cov.ndim == 1:
        if cov.shape[0] != dim:
            raise DimensionError("variance vector length must equal dim")
        cov = np.diag(cov)
    if cov.shape != (dim, dim):
        raise DimensionError(f"covariance must be {dim}x{dim}, got {cov.shape}")
    eig = linalg.sym_eig(cov)
    if eig.eigenvalues.min() < -1e-10 * max(eig.eigenvalues.max(), 1.0):
        raise ValueError("covariance spec is not PSD")
    scale = np.sqrt(np.maximum(eig.eigenvalues, 0.0))
    chol_like = eig.eigenvectors * scale
    z = np.random.default_rng(seed).standard_normal((n, dim))
    inputs = mean + z @ chol_like.T
    return Dataset(inputs, inputs.copy(), name="synthetic-gaussian")


def synthetic_images(
    n, side, seed, *, latent_dim=14, decades=2.0, contrast=8.0, noise=0.01
) -> Dataset:
    """Seeded high-contrast random images in [0, 1] whose content lives on a
    latent space with a geometrically decaying scale spectrum.

    Each latent direction is a smooth centered bump pattern; direction j
    carries scale contrast * 10^(-decades * j / (latent_dim-1)). Squashing
    through a sigmoid gives near-binary pixels. The resulting pixel
    covariance is strongly ill-conditioned, which makes reconstruction a
    conditioning-limited problem: first-order methods fit the dominant
    directions quickly and crawl on the tail, the regime where whitening
    the representation pays off. Targets equal inputs (autoencoding).
    """
    dim = side * side
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side]
    basis = np.empty((dim, latent_dim))
    for j in range(latent_dim):
        cy, cx = rng.uniform(0, side - 1, size=2)
        width = rng.uniform(side / 8.0, side / 2.0)
        bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))).ravel()
        bump -= bump.mean()
        basis[:, j] = bump / np.linalg.norm(bump) * rng.choice([-1.0, 1.0])
    scales = contrast * (10.0 ** (-decades * np.arange(latent_dim) / max(latent_dim - 1, 1)))
    coeff = rng.standard_normal((n, latent_dim))
    fields = coeff @ (basis * scales).T + noise * rng.standard_normal((n, dim))
    inputs = 1.0 / (1.0 + np.exp(-fields))
    return Dataset(inputs, inputs.copy(), name=f"synthetic-images-{side}x{side}")


def synthetic_classification(n, dim, seed, *, spectrum_decay=2.0, n_classes=2) -> Dataset:
    """Correlated Gaussian inputs labelled by a seeded linear teacher; the
    input covariance spectrum decays like k^-decay.

    Binary targets are a single {0,1} column (for sigmoid heads); with
    ``n_classes > 2`` targets are one-hot argmax rows of a teacher map."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    lam = (np.arange(1, dim + 1, dtype=np.float64)) ** (-spectrum_decay)
    cov = (q * lam) @ q.T
    cov = (cov + cov.T) / 2.0
    mean = rng.standard_normal(dim) * 0.5
    base = synthetic_gaussian(n, dim, mean, cov, seed=seed + 1)
    if n_classes == 2:
        teacher = rng.standard_normal(dim)
        logits = (base.inputs - mean) @ teacher
        targets = (logits > 0).astype(np.float64)[:, None]
    else:
        teacher = rng.standard_normal((dim, n_classes))
        labels = ((base.inputs - mean) @ teacher).argmax(axis=1)
        targets = np.zeros((n, n_classes))
        targets[np.arange(n), labels] = 1.0
    return Dataset(base.inputs, targets, name="synthetic-classification")


@dataclass
class BatchPlan:
    """Without-replacement batching; the permutation is reshuffled each
    epoch and fully determined by (seed, epoch)."""

    seed: int
    batch_size: int
    epoch: int = 0
    cursor: int = 0
    _perm: np.ndarray | None = field(default=None, repr=False)

    def next_indices(self, n):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self._perm is None or self._perm.shape[0] != n:
            self._perm = self._permutation(n)
        if self.cursor >= n:
            self.epoch += 1
            self.cursor = 0
            self._perm = self._permutation(n)
        idx = self._perm[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx

    def _permutation(self, n):
        return np.random.default_rng([self.seed, self.epoch]).permutation(n)


def next_batch(dataset: Dataset, plan: BatchPlan) -> Dataset:
    return dataset.take(plan.next_indices(dataset.n))


def split_train_val(dataset: Dataset, val_size: int, seed: int):
    """Seeded shuffle, then the last ``val_size`` rows become validation."""
    if not 0 <= val_size < dataset.n:
        raise ValueError(f"val_size {val_size} out of range for {dataset.n} rows")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    if val_size == 0:
        return dataset.take(perm, split="train"), None
    return (
        dataset.take(perm[:-val_size], split="train"),
        dataset.take(perm[-val_size:], split="val"),
    )
