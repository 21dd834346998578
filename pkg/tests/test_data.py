import struct

import numpy as np
import pytest

from ddist import data
from ddist.data import (DatasetSplit, ZcaTransform, load_csv, load_idx,
                        make_synthetic, one_hot, ppm_grid_bytes, random_flip,
                        zca_apply, zca_fit, zca_invert)
from ddist.errors import ConfigError, DataError, FormatError, ShapeError

RNG = np.random.default_rng(99)


def write_idx_pair(tmp_path, images_u8, labels_u8):
    n, h, w = images_u8.shape
    img = tmp_path / "imgs.idx"
    lab = tmp_path / "labels.idx"
    img.write_bytes(struct.pack(">IIII", 0x00000803, n, h, w)
                    + images_u8.astype(np.uint8).tobytes())
    lab.write_bytes(struct.pack(">II", 0x00000801, n)
                    + labels_u8.astype(np.uint8).tobytes())
    return img, lab


# ---------------------------------------------------------------------------
# loaders

def test_idx_loader_exact_bytes(tmp_path):
    images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    img, lab = write_idx_pair(tmp_path, images, np.array([0, 1]))
    split = load_idx(img, lab)
    assert split.inputs.shape == (2, 1, 2, 2)
    assert np.array_equal(split.inputs.reshape(-1), np.arange(8) / 255.0)
    assert list(split.labels) == [0, 1]
    assert split.classes == 2


def test_idx_bad_magic_names_byte(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    img, lab = write_idx_pair(tmp_path, images, np.array([0]))
    blob = bytearray(img.read_bytes())
    blob[2] = 0x99
    img.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="byte 0"):
        load_idx(img, lab)


def test_idx_truncation_and_mismatch(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    img, lab = write_idx_pair(tmp_path, images, np.array([0, 1]))
    img.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(FormatError, match="byte 16"):
        load_idx(img, lab)

    img2, _ = write_idx_pair(tmp_path, images, np.array([0, 1]))
    lab3 = tmp_path / "extra.idx"
    lab3.write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([0, 1, 1]))
    with pytest.raises(DataError, match="3 labels for 2 images"):
        load_idx(img2, lab3)


def test_csv_loader(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("label,f0,f1\n0,0.5,-1\n1,2,3\n")
    split = load_csv(path)
    assert np.array_equal(split.inputs, [[0.5, -1.0], [2.0, 3.0]])
    assert list(split.labels) == [0, 1]

    path.write_text("label,x0,x1\n0,1,2\n")
    with pytest.raises(FormatError, match="line 1"):
        load_csv(path)

    path.write_text("label,f0,f1\n0,1,2\n1,3\n")
    with pytest.raises(FormatError, match="line 3"):
        load_csv(path)

    path.write_text("label,f0,f1\n0.5,1,2\n")
    with pytest.raises(FormatError, match="line 2"):
        load_csv(path)


def test_idx_round_trip_within_quantization(tmp_path):
    train, _ = make_synthetic("gaussian_blobs", classes=3, train_per_class=20,
                              test_per_class=5, seed=3)
    lo, hi = train.inputs.min(), train.inputs.max()
    unit = (train.inputs - lo) / (hi - lo)
    quant = np.rint(unit * 255).reshape(-1, 1, 2).astype(np.uint8)
    img, lab = write_idx_pair(tmp_path, quant.reshape(-1, 1, 2),
                              train.labels.astype(np.uint8))
    loaded = load_idx(img, lab, classes=3)
    assert np.max(np.abs(loaded.inputs.reshape(unit.shape) - unit)) <= 0.5 / 255 + 1e-12


def test_split_validation():
    with pytest.raises(DataError):
        DatasetSplit(np.zeros((2, 2)), np.array([0, 3]), classes=2)
    with pytest.raises(DataError):
        DatasetSplit(np.array([[np.inf, 0.0]]), np.array([0]), classes=2)
    with pytest.raises(ShapeError):
        DatasetSplit(np.zeros((2, 2)), np.array([0]), classes=2)


def test_one_hot():
    assert np.array_equal(one_hot([1, 0], 3), [[0, 1, 0], [1, 0, 0]])
    with pytest.raises(DataError):
        one_hot([3], 3)


# ---------------------------------------------------------------------------
# synthetic tasks

def test_synthetic_deterministic_and_balanced():
    for kind, classes in (("gaussian_blobs", 3), ("two_rings", 2), ("xor_grid", 2)):
        a_train, a_test = make_synthetic(kind, classes=classes, seed=7)
        b_train, b_test = make_synthetic(kind, classes=classes, seed=7)
        assert np.array_equal(a_train.inputs, b_train.inputs)
        assert np.array_equal(a_test.labels, b_test.labels)
        assert not np.array_equal(a_train.inputs[:5], a_test.inputs[:5])
        counts = np.bincount(a_train.labels, minlength=classes)
        assert list(counts) == [100] * classes


def test_blobs_sigma_zero_points_sit_on_circle_means():
    train, _ = make_synthetic("gaussian_blobs", classes=4, noise=0.0,
                              radius=2.0, seed=1)
    for c in range(4):
        pts = train.inputs[train.labels == c]
        assert np.max(np.abs(pts - pts[0])) == 0.0
        assert abs(np.linalg.norm(pts[0]) - 2.0) <= 1e-12


def test_blobs_sigma_zero_linearly_separable():
    train, test = make_synthetic("gaussian_blobs", classes=3, noise=0.0,
                                 train_per_class=10, test_per_class=10, seed=2)
    # one-step-per-class perceptron oracle: distinct means make this converge
    w = np.zeros((2, 3))
    b = np.zeros(3)
    for _ in range(50):
        scores = train.inputs @ w + b
        pred = scores.argmax(axis=1)
        for i in np.flatnonzero(pred != train.labels):
            y, p = train.labels[i], pred[i]
            w[:, y] += train.inputs[i]
            b[y] += 1
            w[:, p] -= train.inputs[i]
            b[p] -= 1
    pred = (test.inputs @ w + b).argmax(axis=1)
    assert np.mean(pred == test.labels) == 1.0


def test_rings_and_xor_geometry():
    train, _ = make_synthetic("two_rings", classes=2, noise=0.0, radius=2.0, seed=4)
    norms = np.linalg.norm(train.inputs, axis=1)
    assert np.allclose(norms[train.labels == 0], 1.0, atol=1e-12)
    assert np.allclose(norms[train.labels == 1], 2.0, atol=1e-12)

    train, _ = make_synthetic("xor_grid", classes=2, noise=0.0, seed=4)
    want = (train.inputs[:, 0] > 0) ^ (train.inputs[:, 1] > 0)
    assert np.array_equal(want.astype(int), train.labels)


def test_synthetic_validation():
    with pytest.raises(ConfigError):
        make_synthetic("spiral")
    with pytest.raises(ConfigError):
        make_synthetic("two_rings", classes=3)
    with pytest.raises(ConfigError):
        make_synthetic("gaussian_blobs", classes=1)


# ---------------------------------------------------------------------------
# ZCA

def test_zca_identity_covariance_analytic():
    s = np.sqrt(2.0)
    x = np.array([[s, 0.0], [-s, 0.0], [0.0, s], [0.0, -s]])
    t = zca_fit(x, lam=0.1)
    want = 1.1 ** -0.5 * np.eye(2)
    assert np.max(np.abs(t.w - want)) <= 1e-10


def test_zca_whitens_to_identity():
    x = RNG.normal(size=(400, 5)) @ RNG.normal(size=(5, 5)) + RNG.normal(size=5)
    t = zca_fit(x, lam=0.0)
    z = zca_apply(t, x)
    cov = z.T @ z / z.shape[0] - np.outer(z.mean(0), z.mean(0))
    assert np.max(np.abs(cov - np.eye(5))) <= 1e-6


def test_zca_structure_and_round_trip():
    x = RNG.normal(size=(60, 3, 2, 2))
    t = zca_fit(x, lam=0.1)
    assert np.max(np.abs(t.w - t.w.T)) <= 1e-10
    assert np.max(np.abs(t.w @ t.w_inv - np.eye(12))) <= 1e-8
    fresh = RNG.normal(size=(5, 3, 2, 2))
    back = zca_invert(t, zca_apply(t, fresh))
    assert back.shape == fresh.shape
    assert np.max(np.abs(back - fresh)) <= 1e-8
    mean_row = t.mean.reshape(1, 3, 2, 2)
    assert np.array_equal(zca_apply(t, mean_row), np.zeros_like(mean_row))


def test_zca_permutation_invariant_and_limits():
    x = RNG.normal(size=(50, 4))
    t1 = zca_fit(x, lam=0.1)
    t2 = zca_fit(x[RNG.permutation(50)], lam=0.1)
    assert np.max(np.abs(t1.w - t2.w)) <= 1e-12

    assert np.max(np.abs(zca_fit(x, lam=1e9).w)) <= 1e-3  # lam -> inf crushes W

    with pytest.raises(DataError):
        zca_fit(x[:1])
    with pytest.raises(DataError):
        zca_fit(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(ConfigError):
        zca_fit(x, lam=-0.1)
    with pytest.raises(ShapeError):
        zca_apply(t1, np.zeros((2, 5)))


# ---------------------------------------------------------------------------
# augmentation, visualization

def test_random_flip():
    x = RNG.normal(size=(6, 1, 2, 3))
    rng = np.random.default_rng(0)
    assert np.array_equal(random_flip(x, rng, prob=0.0), x)
    flipped = random_flip(x, rng, prob=1.0)
    assert np.array_equal(flipped, x[..., ::-1])
    with pytest.raises(ShapeError):
        random_flip(np.zeros((2, 3)), rng)


def test_ppm_grid_hand_computed():
    flat = np.full((1, 2, 2), 0.7)                        # degenerate: all black
    ramp = np.array([[[0.0, 1 / 3], [2 / 3, 1.0]]])       # 0, 85, 170, 255
    got = ppm_grid_bytes(np.stack([flat, ramp]), cols=2)
    pixels = bytes([0, 0, 0, 0, 0, 0, 0, 0, 0, 85, 85, 85,
                    0, 0, 0, 0, 0, 0, 170, 170, 170, 255, 255, 255])
    assert got == b"P6\n4 2\n255\n" + pixels


def test_ppm_grid_rgb_and_file(tmp_path):
    imgs = RNG.normal(size=(3, 3, 4, 4))
    blob = ppm_grid_bytes(imgs)  # 3 images -> 2x2 grid
    assert blob.startswith(b"P6\n8 8\n255\n")
    assert len(blob) == len(b"P6\n8 8\n255\n") + 8 * 8 * 3
    path = tmp_path / "grid.ppm"
    data.write_ppm_grid(path, imgs)
    assert path.read_bytes() == blob
    with pytest.raises(ShapeError):
        ppm_grid_bytes(np.zeros((1, 2, 4, 4)))
