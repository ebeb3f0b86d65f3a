import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ganprotect.imagedata import (
    AugmentSpec, ImageTensor, IngestionError, LabeledDataset, TruncationError, apply_augment,
    augment, augment_batch, channel_stats, draw_augment, load_cifar10, load_cifar100,
    load_stl10, split_halves, write_cifar10, write_cifar100, write_stl10,
)
from ganprotect.synthetic import make_shapes, random_bytes_dataset

from conftest import read_record, read_stl10_image


def _random_dataset(n, size=8, classes=10, seed=0):
    return random_bytes_dataset(n, size, classes, seed)


def test_cifar10_first_record_matches_byte_reader(tmp_path):
    d = random_bytes_dataset(25, 32, 10, seed=1)
    write_cifar10(tmp_path, d, "train")
    write_cifar10(tmp_path, d.subset(range(5)), "test")
    loaded = load_cifar10(tmp_path, "train")
    assert len(loaded) == 25 and loaded.num_classes == 10
    label, pix = read_record(tmp_path / "data_batch_1.bin", 0, 3073, 0, 1, 3072)
    assert loaded.labels[0] == label
    np.testing.assert_array_equal(np.rint(loaded.images[0] * 255).astype(np.uint8).ravel(), pix)
    assert len(load_cifar10(tmp_path, "test")) == 5


def test_cifar10_empty_dir_names_missing_file(tmp_path):
    with pytest.raises(IngestionError, match="data_batch_1.bin"):
        load_cifar10(tmp_path)


def test_cifar100_uses_fine_label(tmp_path):
    d = random_bytes_dataset(12, 32, 100, seed=2)
    write_cifar100(tmp_path, d, "test", coarse=np.full(12, 7))
    loaded = load_cifar100(tmp_path, "test")
    assert loaded.num_classes == 100
    np.testing.assert_array_equal(loaded.labels, d.labels)
    for k in (0, 5, 11):
        label, pix = read_record(tmp_path / "test.bin", k, 3074, 1, 2, 3072)
        assert loaded.labels[k] == label
        np.testing.assert_array_equal(np.rint(loaded.images[k] * 255).astype(np.uint8).ravel(), pix)


def test_cifar100_truncated_file(tmp_path):
    (tmp_path / "train.bin").write_bytes(bytes(3074 * 2 + 100))
    with pytest.raises(TruncationError) as exc:
        load_cifar100(tmp_path, "train")
    assert exc.value.offset == 3074 * 2


def test_stl10_column_major_decoding(tmp_path):
    d = random_bytes_dataset(4, 96, 10, seed=3)
    write_stl10(tmp_path, d, "train")
    loaded = load_stl10(tmp_path, "train")
    assert loaded.image_shape == (3, 96, 96)
    for k in range(4):
        label, img = read_stl10_image(tmp_path / "train_X.bin", tmp_path / "train_y.bin", k)
        assert loaded.labels[k] == label
        np.testing.assert_array_equal(np.rint(loaded.images[k] * 255).astype(np.uint8), img)


def test_stl10_label_count_mismatch(tmp_path):
    d = random_bytes_dataset(3, 96, 10, seed=3)
    write_stl10(tmp_path, d, "test")
    (tmp_path / "test_y.bin").write_bytes(bytes([1, 2]))
    with pytest.raises(IngestionError, match="labels"):
        load_stl10(tmp_path, "test")


def test_loaded_pixels_are_quantized(tmp_path):
    d = make_shapes(10, 32, 3, seed=4)
    write_cifar10(tmp_path, d)
    loaded = load_cifar10(tmp_path)
    assert loaded.images.min() >= 0 and loaded.images.max() <= 1
    q = loaded.images * 255
    np.testing.assert_allclose(q, np.rint(q), atol=1e-4)
    np.testing.assert_array_equal(loaded.images, d.images)


def test_dataset_is_immutable():
    d = _random_dataset(4)
    with pytest.raises(ValueError):
        d.images[0, 0, 0, 0] = 0.5


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3, 4, 4)), np.array([0, 3]), 3)


def test_image_tensor_range_check():
    with pytest.raises(ValueError):
        ImageTensor(np.full((3, 2, 2), 1.5))
    assert ImageTensor(np.zeros((3, 4, 5))).shape == (3, 4, 5)


# --- split_halves -------------------------------------------------------------------

def test_split_sizes():
    a, b = split_halves(_random_dataset(5000, size=2), seed=0)
    assert (len(a), len(b)) == (2500, 2500)


def test_split_degenerate():
    a, b = split_halves(_random_dataset(1), seed=0)
    assert (len(a), len(b)) == (0, 1)
    with pytest.raises(ValueError):
        split_halves(_random_dataset(1).subset([]), seed=0)


def test_split_deterministic():
    d = _random_dataset(30)
    a1, b1 = split_halves(d, 7)
    a2, b2 = split_halves(d, 7)
    np.testing.assert_array_equal(a1.images, a2.images)
    np.testing.assert_array_equal(b1.labels, b2.labels)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 60), seed=st.integers(0, 2**31))
def test_split_is_partition(n, seed):
    d = LabeledDataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1) / max(n, 1),
                       np.zeros(n, dtype=np.int64), 1)
    a, b = split_halves(d, seed)
    ka = set(np.round(a.images.ravel() * n).astype(int))
    kb = set(np.round(b.images.ravel() * n).astype(int))
    assert not ka & kb
    assert ka | kb == set(range(n))
    assert len(a) == n // 2


# --- augment ------------------------------------------------------------------------

def test_identity_augment_is_identity():
    img = ImageTensor(np.random.default_rng(0).random((3, 8, 8)).astype(np.float32))
    out = augment(img, AugmentSpec.identity(), np.random.default_rng(1))
    np.testing.assert_array_equal(out.values, img.values)


@pytest.mark.parametrize("seed", range(5))
def test_constant_image_survives_crop(seed):
    img = ImageTensor(np.full((3, 8, 8), 0.37, dtype=np.float32))
    spec = AugmentSpec(crop_padding=4, horizontal_flip=True)
    out = augment(img, spec, np.random.default_rng(seed), normalize=False)
    np.testing.assert_array_equal(out.values, img.values)


def test_augment_replays_recorded_draws():
    values = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    spec = AugmentSpec(crop_padding=2, horizontal_flip=True, normalize_mean=(0.5, 0.4, 0.3),
                       normalize_std=(0.2, 0.25, 0.3))
    out = augment(ImageTensor(values), spec, np.random.default_rng(42))

    # replay: same generator, draws in the documented order dy, dx, flip
    rng = np.random.default_rng(42)
    dy, dx = rng.integers(0, 5), rng.integers(0, 5)
    flip = rng.random() < 0.5
    padded = np.pad(values, ((0, 0), (2, 2), (2, 2)), mode="reflect")
    expect = padded[:, dy:dy + 8, dx:dx + 8]
    if flip:
        expect = expect[:, :, ::-1]
    expect = (expect - np.array([0.5, 0.4, 0.3], np.float32)[:, None, None]) / np.array([0.2, 0.25, 0.3], np.float32)[:, None, None]
    np.testing.assert_allclose(out.values, expect, rtol=1e-6)


def test_augment_batch_consumes_stream_in_order():
    imgs = np.random.default_rng(0).random((4, 3, 8, 8)).astype(np.float32)
    spec = AugmentSpec(crop_padding=3)
    batch = augment_batch(imgs, spec, np.random.default_rng(5), normalize=False)
    rng = np.random.default_rng(5)
    for im, got in zip(imgs, batch):
        np.testing.assert_array_equal(got, apply_augment(im, spec, draw_augment(spec, rng), False))


def test_augment_spec_validation():
    with pytest.raises(ValueError):
        AugmentSpec(crop_padding=-1)
    with pytest.raises(ValueError):
        AugmentSpec(normalize_std=(1.0, 0.0, 1.0))


def test_channel_stats():
    d = LabeledDataset(np.stack([np.zeros((3, 2, 2)), np.ones((3, 2, 2))]), np.array([0, 0]), 1)
    mean, std = channel_stats(d)
    np.testing.assert_allclose(mean, (0.5,) * 3)
    np.testing.assert_allclose(std, (0.5,) * 3)
