import numpy as np
import pytest

from ganprotect.classify import (
    ClassifyConfig, build_classifier, chance_level, evaluate_accuracy, full_schedule, predict,
    step_lr, train_classifier,
)
from ganprotect.imagedata import AugmentSpec, LabeledDataset
from ganprotect.synthetic import make_shapes


def test_schedule_table():
    c = ClassifyConfig()
    assert [c.lr_at(e) for e in (0, 60, 120, 160)] == pytest.approx([0.1, 0.02, 0.004, 0.0008])
    sched = full_schedule(c)
    assert len(sched) == 200
    assert [e for e in range(1, 200) if sched[e] != sched[e - 1]] == [60, 120, 160]
    assert step_lr(1.0, (), 10, 99) == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        ClassifyConfig(lr_drop_epochs=(60, 30))
    with pytest.raises(ValueError):
        ClassifyConfig(epochs=50)
    with pytest.raises(ValueError):
        ClassifyConfig(arch="mlp")
    c = ClassifyConfig(augment={"crop_padding": 2})
    assert isinstance(c.augment, AugmentSpec) and c.augment.crop_padding == 2


def test_zero_epochs_returns_untrained(shapes_small):
    model, history = train_classifier(shapes_small, cfg=ClassifyConfig(arch="toy_classifier", epochs=0, lr_drop_epochs=()))
    assert history == [] and not model.train_mode


def test_normalization_constants_follow_what_the_model_sees(shapes_small):
    cfg = ClassifyConfig(arch="toy_classifier", base_channels=4)
    plain = build_classifier(cfg, shapes_small)
    inv = build_classifier(cfg, shapes_small, lambda x: 1 - x)
    m1 = plain.spec.normalize_mean
    m2 = inv.spec.normalize_mean
    np.testing.assert_allclose(m1, shapes_small.images.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(np.add(m1, m2), 1.0, atol=1e-5)
    none = build_classifier(ClassifyConfig(arch="toy_classifier", normalize="none"), shapes_small)
    assert none.spec.normalize_std == (1.0, 1.0, 1.0)


def brightness_task(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    images = 0.35 + 0.3 * labels[:, None, None, None] + rng.normal(0, 0.1, (n, 3, 16, 16))
    return LabeledDataset(np.clip(images, 0, 1).astype(np.float32), labels, 2)


def test_training_learns_and_is_deterministic():
    train, test = brightness_task(96, 1), brightness_task(64, 2)
    cfg = ClassifyConfig(arch="toy_classifier", base_channels=8, epochs=8, lr=0.05,
                         lr_drop_epochs=(6,), batch_size=16)
    m1, h1 = train_classifier(train, None, cfg, test)
    m2, h2 = train_classifier(train, None, cfg, test)
    assert h1 == h2 and m1.checksum() == m2.checksum()
    assert [r["lr"] for r in h1] == [0.05] * 6 + [0.01] * 2
    assert h1[-1]["train_loss"] < h1[0]["train_loss"]
    assert h1[-1]["test_acc"] >= 0.7


def test_transform_applied_after_augmentation(shapes_small):
    calls = []

    def spy(x):
        calls.append(x.copy())
        return x

    cfg = ClassifyConfig(arch="toy_classifier", base_channels=4, epochs=1, lr_drop_epochs=(),
                         batch_size=32, augment=AugmentSpec(crop_padding=4, seed=0))
    train_classifier(shapes_small, spy, cfg)
    batches = calls[1:]  # first call measures normalization constants on the raw set
    np.testing.assert_array_equal(calls[0], shapes_small.images)
    assert sum(len(b) for b in batches) == len(shapes_small)
    flat = {b.tobytes() for batch in batches for b in batch}
    assert flat != {im.tobytes() for im in shapes_small.images}  # augmented before the transform


def test_accuracy_matches_confusion_matrix():
    rng = np.random.default_rng(0)
    images = rng.random((50, 3, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 4, 50)
    test = LabeledDataset(images, labels, 4)
    model = build_classifier(ClassifyConfig(arch="toy_classifier", base_channels=4), test)
    pred = predict(model, images)
    cm = np.zeros((4, 4), int)
    np.add.at(cm, (labels, pred), 1)
    assert evaluate_accuracy(model, test) == pytest.approx(np.trace(cm) / cm.sum())


def test_constant_predictor_hits_chance():
    labels = np.repeat(np.arange(10), 10)
    test = LabeledDataset(np.zeros((100, 3, 8, 8), np.float32), labels, 10)
    model = build_classifier(ClassifyConfig(arch="toy_classifier", base_channels=4, normalize="none"), test)
    acc = evaluate_accuracy(model, test)  # identical inputs give one constant prediction
    assert acc == pytest.approx(0.1) == pytest.approx(chance_level(10))


def test_empty_test_set():
    model = build_classifier(ClassifyConfig(arch="toy_classifier"), make_shapes(4, 8, 2))
    with pytest.raises(ValueError):
        evaluate_accuracy(model, make_shapes(4, 8, 2).subset([]))
