"""Dataset loading, synthetic tasks, and ZCA preprocessing.

Everything here is plain numpy; nothing feeds the graph engine directly.
Whitening keeps its inverse around so distilled points can be mapped back to
the original space for visualization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DatasetSplit:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"split {self.split!r}: {self.inputs.shape[0]} inputs vs "
                f"{self.labels.shape[0]} labels")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError(f"split {self.split!r}: non-finite input values")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.classes):
            raise DataError(
                f"split {self.split!r}: labels outside [0, {self.classes})")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels outside [0, {classes})")
    return np.eye(classes, dtype=np.float64)[labels]


# ---------------------------------------------------------------------------
# file formats

def _read_idx_header(blob: bytes, expect_magic: int, path: str):
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated at byte {len(blob)}, header needs 8")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != expect_magic:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    need = 4 + 4 * ndim
    if len(blob) < need:
        raise FormatError(f"{path}: truncated at byte {len(blob)}, dims need {need}")
    dims = struct.unpack(f">{ndim}I", blob[4:need])
    return dims, need


def load_idx(images_path, labels_path, classes: int | None = None,
             split: str = "train") -> DatasetSplit:
    """MNIST-style IDX pair: big-endian dims, unsigned-byte payload.

    Pixel bytes are scaled to [0, 1]; images come out as (n, 1, h, w).
    """
    with open(images_path, "rb") as fh:
        blob = fh.read()
    (n, h, w), off = _read_idx_header(blob, IDX_IMAGES_MAGIC, str(images_path))
    count = n * h * w
    if len(blob) != off + count:
        raise FormatError(
            f"{images_path}: expected {count} data bytes at byte {off}, "
            f"file has {len(blob) - off}")
    images = np.frombuffer(blob, dtype=np.uint8, offset=off).astype(np.float64)
    images = images.reshape(n, 1, h, w) / 255.0

    with open(labels_path, "rb") as fh:
        blob = fh.read()
    (n_labels,), off = _read_idx_header(blob, IDX_LABELS_MAGIC, str(labels_path))
    if len(blob) != off + n_labels:
        raise FormatError(
            f"{labels_path}: expected {n_labels} data bytes at byte {off}, "
            f"file has {len(blob) - off}")
    labels = np.frombuffer(blob, dtype=np.uint8, offset=off).astype(np.int64)
    if n_labels != n:
        raise DataError(f"{labels_path}: {n_labels} labels for {n} images")
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 2
    return DatasetSplit(images, labels, classes, split)


def load_csv(path, classes: int | None = None, split: str = "train") -> DatasetSplit:
    """Header must be exactly label,f0,f1,...; one integer label per row."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise FormatError(f"{path}: line 1: empty file")
    header = lines[0].split(",")
    d = len(header) - 1
    if d < 1 or header != ["label"] + [f"f{i}" for i in range(d)]:
        raise FormatError(f"{path}: line 1: expected header label,f0,f1,...")
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split(",")
        if len(fields) != d + 1:
            raise FormatError(
                f"{path}: line {lineno}: expected {d + 1} fields, got {len(fields)}")
        try:
            labels.append(int(fields[0]))
            rows.append([float(x) for x in fields[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
    inputs = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    if classes is None:
        classes = max(labels, default=1) + 1
    return DatasetSplit(inputs, np.asarray(labels, dtype=np.int64), classes, split)


def load_dataset(fmt: str, *, images=None, labels=None, path=None,
                 classes: int | None = None, split: str = "train") -> DatasetSplit:
    if fmt == "idx":
        if images is None or labels is None:
            raise ConfigError("idx format needs images= and labels= paths")
        return load_idx(images, labels, classes, split)
    if fmt == "csv":
        if path is None:
            raise ConfigError("csv format needs path=")
        return load_csv(path, classes, split)
    raise ConfigError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------------------
# synthetic tasks

SYNTHETIC_KINDS = ("gaussian_blobs", "two_rings", "xor_grid")


def _blobs(rng, classes, per_class, noise, radius):
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    xs, ys = [], []
    for c in range(classes):
        xs.append(means[c] + noise * rng.standard_normal((per_class, 2)))
        ys.append(np.full(per_class, c))
    return np.concatenate(xs), np.concatenate(ys)


def _rings(rng, per_class, noise, radius):
    xs, ys = [], []
    for c, r in enumerate((0.5 * radius, radius)):
        theta = rng.uniform(0.0, 2.0 * np.pi, size=per_class)
        rad = r + noise * rng.standard_normal(per_class)
        xs.append(np.stack([rad * np.cos(theta), rad * np.sin(theta)], axis=1))
        ys.append(np.full(per_class, c))
    return np.concatenate(xs), np.concatenate(ys)


def _xor(rng, per_class, noise, radius):
    # class 0 lives in quadrants (+,+)/(-,-), class 1 in (+,-)/(-,+);
    # jitter is applied after labeling so overlap is controlled by noise alone
    xs, ys = [], []
    for c, quads in enumerate(([(1, 1), (-1, -1)], [(1, -1), (-1, 1)])):
        signs = np.asarray(quads)[rng.integers(0, 2, size=per_class)]
        base = rng.uniform(0.0, radius, size=(per_class, 2)) * signs
        xs.append(base + noise * rng.standard_normal((per_class, 2)))
        ys.append(np.full(per_class, c))
    return np.concatenate(xs), np.concatenate(ys)


def make_synthetic(kind: str, classes: int = 3, train_per_class: int = 100,
                   test_per_class: int = 100, noise: float = 0.5,
                   radius: float = 2.0, seed: int = 0):
    """Two disjoint splits of a 2-D toy task; deterministic given seed."""
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    if kind in ("two_rings", "xor_grid") and classes != 2:
        raise ConfigError(f"{kind} is a binary task")
    if classes < 2 or train_per_class < 1 or test_per_class < 1:
        raise ConfigError("need classes >= 2 and at least one point per class")
    rng = np.random.default_rng(seed)
    splits = []
    for tag, per_class in (("train", train_per_class), ("test", test_per_class)):
        if kind == "gaussian_blobs":
            x, y = _blobs(rng, classes, per_class, noise, radius)
        elif kind == "two_rings":
            x, y = _rings(rng, per_class, noise, radius)
        else:
            x, y = _xor(rng, per_class, noise, radius)
        order = rng.permutation(len(y))
        splits.append(DatasetSplit(x[order], y[order], classes, tag))
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# ZCA whitening

@dataclass
class ZcaTransform:
    mean: np.ndarray
    w: np.ndarray
    w_inv: np.ndarray
    lam: float
    shape: tuple = field(default=())  # trailing input shape the fit saw


def zca_fit(inputs, lam: float = 0.1) -> ZcaTransform:
    """Symmetric whitening with trace-scaled regularization.

    Eigenvalues are shifted by lam * mean(eigenvalues) before the inverse
    square root, so lam means the same thing regardless of data scale.
    """
    if lam < 0:
        raise ConfigError("zca_fit: lam must be >= 0")
    x = np.asarray(inputs, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise DataError("zca_fit: need at least 2 samples")
    flat = x.reshape(n, -1)
    if not np.all(np.isfinite(flat)):
        raise DataError("zca_fit: non-finite inputs")
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / n
    s, e = np.linalg.eigh(cov)
    s = np.maximum(s, 0.0)
    shifted = s + lam * s.mean()
    if shifted.min() <= 1e-300:
        raise DataError("zca_fit: singular covariance; increase lam")
    w = (e * shifted ** -0.5) @ e.T
    w_inv = (e * shifted ** 0.5) @ e.T
    return ZcaTransform(mean, w, w_inv, float(lam), x.shape[1:])


def zca_apply(t: ZcaTransform, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != t.mean.shape[0]:
        raise ShapeError(f"zca_apply: {flat.shape[1]} features, fit saw {t.mean.shape[0]}")
    return ((flat - t.mean) @ t.w).reshape(x.shape)


def zca_invert(t: ZcaTransform, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != t.mean.shape[0]:
        raise ShapeError(f"zca_invert: {flat.shape[1]} features, fit saw {t.mean.shape[0]}")
    return (flat @ t.w_inv + t.mean).reshape(x.shape)


# ---------------------------------------------------------------------------
# augmentation and visualization

def random_flip(x, rng: np.random.Generator, prob: float = 0.5) -> np.ndarray:
    """Horizontal flip per sample; images only."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"random_flip needs (n, c, h, w), got rank {x.ndim}")
    out = x.copy()
    mask = rng.random(x.shape[0]) < prob
    out[mask] = out[mask][..., ::-1]
    return out


def ppm_grid_bytes(images, cols: int | None = None) -> bytes:
    """P6 grid; each image min-max normalized on its own (flat images go black)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise ShapeError(f"ppm grid needs (n, c, h, w) with c in {{1, 3}}, "
                         f"got {images.shape}")
    n, c, h, w = images.shape
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = -(-n // cols)
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i in range(n):
        img = images[i]
        lo, hi = img.min(), img.max()
        norm = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        byte = np.rint(norm * 255.0).astype(np.uint8)
        if c == 1:
            byte = np.repeat(byte, 3, axis=0)
        r, col = divmod(i, cols)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = byte.transpose(1, 2, 0)
    header = f"P6\n{cols * w} {rows * h}\n255\n".encode("ascii")
    return header + canvas.tobytes()


def write_ppm_grid(path, images, cols: int | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_grid_bytes(images, cols))
