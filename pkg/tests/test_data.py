import gzip
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpool.checkpoint import CheckpointError, load_dataset, save_dataset
from cpool.data import (
    DataError,
    DistanceTask,
    MnistTask,
    batch_iter,
    distance_batch,
    gen_distance_sample,
    load_idx,
    load_mnist,
    make_distance_sample,
    target_moments,
    write_idx_images,
    write_idx_labels,
)

MNIST_DIR = Path(os.environ.get("CPOOL_DATA_DIR", "/root/data/mnist"))
needs_mnist = pytest.mark.skipif(not (MNIST_DIR / "t10k-labels-idx1-ubyte").exists(),
                                 reason="MNIST files not present")


# -- synthetic distance samples -----------------------------------------------

def test_fixed_pixels():
    assert make_distance_sample((0, 0), (3, 4)).target == 25
    assert make_distance_sample((7, 9), (7, 10)).target == 1
    with pytest.raises(ValueError):
        make_distance_sample((2, 2), (2, 2))


@given(st.integers(0, 2**32 - 1), st.sampled_from([None, 49.0, 2.0, 10.5]))
def test_sample_invariants(seed, limit):
    s = gen_distance_sample(np.random.default_rng(seed), limit)
    assert s.image.shape == (1, 32, 32)
    assert set(np.unique(s.image)) == {0.0, 1.0} and s.image.sum() == 2
    (r1, c1), (r2, c2) = s.coords
    assert (r1, c1) != (r2, c2)
    assert s.image[0, r1, c1] == s.image[0, r2, c2] == 1.0
    assert s.target == (r1 - r2) ** 2 + (c1 - c2) ** 2
    if limit is not None:
        assert s.target < limit


@pytest.mark.parametrize("limit", [None, 49.0])
def test_hundred_thousand_draws(limit):
    images, targets, coords = distance_batch(np.random.default_rng(11), 100_000, limit)
    assert images.shape == (100_000, 1, 32, 32)
    assert np.all(images.reshape(100_000, -1).sum(axis=1) == 2)
    assert np.all(np.isin(images, (0.0, 1.0)))
    r1, c1, r2, c2 = coords.T
    assert np.all((r1 != r2) | (c1 != c2))
    rows = np.arange(100_000)
    assert np.all(images[rows, 0, r1, c1] == 1) and np.all(images[rows, 0, r2, c2] == 1)
    np.testing.assert_array_equal(targets.ravel(), (r1 - r2) ** 2 + (c1 - c2) ** 2)
    if limit is not None:
        assert targets.max() < 49
        # no integer in 46..48 is a sum of two squares, so 45 is the ceiling;
        # every attainable value shows up, right up to it
        attainable = {dr * dr + dc * dc for dr in range(8) for dc in range(8)} - {0}
        attainable = {t for t in attainable if t < 49}
        assert max(attainable) == 45
        assert set(np.unique(targets).astype(int).tolist()) == attainable


def test_limit_must_admit_a_pair():
    with pytest.raises(ValueError):
        distance_batch(np.random.default_rng(0), 1, 1.0)


def test_target_moments_match_a_large_sample():
    for limit in (None, 49.0):
        _, t, _ = distance_batch(np.random.default_rng(5), 200_000, limit, dtype=np.float64)
        mean, std = target_moments(limit)
        assert mean == pytest.approx(t.mean(), rel=5e-3)
        assert std == pytest.approx(t.std(), rel=5e-3)


def test_exact_moments_on_a_tiny_grid():
    # 2x2 grid: 8 ordered pairs at distance 1 and 4 at distance 2
    mean, std = target_moments(None, size=2)
    assert mean == pytest.approx((8 * 1 + 4 * 2) / 12)
    assert std == pytest.approx(np.sqrt((8 * (1 - 4 / 3) ** 2 + 4 * (2 - 4 / 3) ** 2) / 12))


def test_batches():
    task = DistanceTask(49.0)
    first = next(batch_iter(task, 32, np.random.default_rng(4)))
    again = next(batch_iter(task, 32, np.random.default_rng(4)))
    assert first[0].shape == (32, 1, 32, 32) and first[1].shape == (32, 1, 1, 1)
    np.testing.assert_array_equal(first[0].data, again[0].data)
    np.testing.assert_array_equal(first[1], again[1])
    stream = batch_iter(task, 32, np.random.default_rng(4))
    assert sum(next(stream)[0].shape[0] for _ in range(2000)) == 64000
    with pytest.raises(ValueError):
        next(batch_iter(task, 0, np.random.default_rng(0)))


def test_dataset_dump_round_trip(tmp_path):
    images, targets, _ = distance_batch(np.random.default_rng(0), 10, 49.0)
    save_dataset(tmp_path / "d.bin", {"task": "distance_limited"}, images, targets)
    meta, im2, t2 = load_dataset(tmp_path / "d.bin")
    assert meta == {"task": "distance_limited"}
    np.testing.assert_array_equal(im2, images)
    np.testing.assert_array_equal(t2, targets)
    with pytest.raises(CheckpointError):
        load_dataset(tmp_path / "missing.bin")


# -- IDX ----------------------------------------------------------------------

def test_label_round_trip(tmp_path):
    write_idx_labels(tmp_path / "l", [7, 2, 1])
    raw = (tmp_path / "l").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x01" and raw[4:8] == b"\x00\x00\x00\x03"
    assert load_idx(tmp_path / "l", "labels").tolist() == [7, 2, 1]


def test_images_are_scaled_and_padded(tmp_path):
    pix = np.zeros((2, 28, 28), dtype=np.uint8)
    pix[1, 0, 0] = 255
    pix[1, 27, 27] = 51
    write_idx_images(tmp_path / "i", pix)
    out = load_idx(tmp_path / "i", "images")
    assert out.shape == (2, 1, 32, 32) and out.dtype == np.float32
    assert not out[0].any()
    assert out[1, 0, 2, 2] == 1.0 and out[1, 0, 29, 29] == pytest.approx(0.2)
    assert out[1].sum() == pytest.approx(1.2)


def test_gzip_is_accepted(tmp_path):
    (tmp_path / "l.gz").write_bytes(gzip.compress(b"\x00\x00\x08\x01\x00\x00\x00\x02\x05\x09"))
    assert load_idx(tmp_path / "l.gz", "labels").tolist() == [5, 9]


@pytest.mark.parametrize("raw,kind", [
    (b"\x00\x00\x08\x03\x00\x00\x00\x01", "labels"),
    (b"\x00\x00\x08\x01\x00\x00\x00\x05\x01", "labels"),
    (b"\x00\x00\x08\x01", "labels"),
    (b"\x00\x00\x08\x01\x00\x00\x00\x01\x0c", "labels"),
    (b"\x00\x00\x08\x03\x00\x00\x00\x01\x00\x00\x00\x02\x00\x00\x00\x02\x00", "images"),
    (b"\x00\x00\x08\x01\x00\x00\x00\x01\x00\x00\x00\x02\x00\x00\x00\x02\x00", "images"),
])
def test_malformed_idx(tmp_path, raw, kind):
    (tmp_path / "f").write_bytes(raw)
    with pytest.raises(DataError):
        load_idx(tmp_path / "f", kind)


def test_missing_file_and_count_mismatch(tmp_path, monkeypatch):
    with pytest.raises(DataError):
        load_idx(tmp_path / "nope", "labels")
    write_idx_images(tmp_path / "t10k-images-idx3-ubyte", np.zeros((3, 28, 28), dtype=np.uint8))
    write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte", [1, 2])
    with pytest.raises(DataError):
        load_mnist("test", tmp_path)
    monkeypatch.delenv("CPOOL_DATA_DIR", raising=False)
    with pytest.raises(DataError):
        load_mnist("test")


def test_mnist_task_batches_cover_an_epoch():
    images = np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1) * np.ones((1, 1, 32, 32), np.float32)
    labels = np.arange(10) % 10
    task = MnistTask((images, labels), (images[:4], labels[:4]))
    assert task.steps_per_epoch(3) == 4
    stream = task.train_batches(3, np.random.default_rng(0))
    seen = np.concatenate([next(stream)[1] for _ in range(4)])
    assert sorted(seen.tolist()) == list(range(10))
    assert task.eval_set(None)[0].shape[0] == 4


@needs_mnist
def test_official_test_split():
    images, labels = load_mnist("test", MNIST_DIR)
    assert images.shape == (10000, 1, 32, 32) and labels.shape == (10000,)
    assert set(np.unique(labels).tolist()) == set(range(10))
    assert images.min() == 0.0 and images.max() == 1.0
    # the 28x28 digits sit inside a two-pixel zero border
    assert not images[:, :, :2].any() and not images[:, :, :, -2:].any()
