import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq
from torch import nn

from ganprotect.imagedata import LabeledDataset
from ganprotect.models import NetworkSpec, build
from ganprotect.protect import (
    PerturbationSpec, ProtectionError, mean_cross_entropy, pgd_protect_step, project_linf,
    protect_batch, protect_dataset, protect_image,
)


class ScalarModel(nn.Module):
    """Two logits ``[c * x, 0]`` for a single-pixel image."""

    def __init__(self, c):
        super().__init__()
        self.c = nn.Parameter(torch.tensor(float(c)))

    def forward(self, x):
        z = self.c * x.flatten(1).sum(1)
        return torch.stack([z, torch.zeros_like(z)], 1)


class ZeroModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return torch.zeros(len(x), 3) + 0 * self.w + 0 * x.sum((1, 2, 3))[:, None]


def toy_classifier(seed=0):
    return build(NetworkSpec("toy_classifier", num_classes=3, base_channels=4, image_size=8, seed=seed)).eval()


def test_projection_scalar_example():
    spec = PerturbationSpec(epsilon=0.1, alpha=0.01)
    assert project_linf(torch.tensor([0.9]), torch.tensor([0.5]), spec).item() == pytest.approx(0.6)


def test_projection_feasible_point_unchanged():
    spec = PerturbationSpec(epsilon=0.2, alpha=0.01)
    x = torch.rand(3, 4, 4) * 0.5 + 0.25
    xp = x + (torch.rand_like(x) - 0.5) * 0.3
    assert torch.equal(project_linf(xp, x, spec), xp)


def test_projection_zero_radius_and_shape():
    spec = PerturbationSpec(epsilon=0.0, alpha=0.01)
    x = torch.rand(3, 4, 4)
    assert torch.equal(project_linf(torch.rand(3, 4, 4), x, spec), x)
    with pytest.raises(ValueError):
        project_linf(torch.rand(3, 4, 4), torch.rand(3, 4, 5), spec)


def test_step_hand_evaluated():
    # choose c so that d CE / dx = c * sigmoid(c * 0.5) = 2 at x = 0.5, label 1
    c = brentq(lambda c: c / (1 + np.exp(-0.5 * c)) - 2.0, 0.1, 10)
    model = ScalarModel(c).double().eval()
    x = torch.tensor([[[0.5]]], dtype=torch.float64).requires_grad_(True)
    nn.functional.cross_entropy(model(x[None]), torch.tensor([1])).backward()
    assert x.grad.item() == pytest.approx(2.0)
    spec = PerturbationSpec(epsilon=0.03, alpha=0.01)
    out = pgd_protect_step(x.detach(), x.detach(), 1, model, spec)
    assert out.item() == pytest.approx(0.49)


def test_step_descends_loss():
    model = ScalarModel(1.5).double().eval()
    x = torch.full((1, 1, 1), 0.5, dtype=torch.float64)
    for y in (0, 1):
        before = nn.functional.cross_entropy(model(x[None]), torch.tensor([y]))
        out = pgd_protect_step(x, x, y, model, PerturbationSpec(epsilon=0.1, alpha=0.01))
        after = nn.functional.cross_entropy(model(out[None]), torch.tensor([y]))
        assert after < before


def test_zero_gradient_is_fixed_point():
    x = torch.rand(3, 8, 8)
    out = pgd_protect_step(x, x, 2, ZeroModel().eval(), PerturbationSpec())
    assert torch.equal(out, x)


def test_non_finite_gradient_raises():
    class NanModel(ZeroModel):
        def forward(self, x):
            return super().forward(x) * float("nan")

    with pytest.raises(ProtectionError) as exc:
        pgd_protect_step(torch.rand(3, 8, 8), torch.rand(3, 8, 8), 0, NanModel(), PerturbationSpec())
    assert exc.value.loss != exc.value.loss  # nan carried


def test_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec(epsilon=-0.1)
    with pytest.raises(ValueError):
        PerturbationSpec(epsilon=0.01, alpha=0.05)
    with pytest.raises(ValueError):
        PerturbationSpec(alpha=0.0)
    assert PerturbationSpec.with_epsilon(0.2).alpha == pytest.approx(0.02)


def test_iterations_zero_returns_input():
    x = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    out = protect_image(x, 1, toy_classifier(), PerturbationSpec(iterations=0))
    np.testing.assert_array_equal(out, x)


def test_large_epsilon_stays_in_range():
    x = np.random.default_rng(1).random((3, 8, 8)).astype(np.float32)
    out = protect_image(x, 0, toy_classifier(), PerturbationSpec(epsilon=2.0, alpha=0.5, iterations=10))
    assert out.min() >= 0 and out.max() <= 1


@settings(max_examples=25, deadline=None)
@given(eps=st.floats(0.001, 0.5), seed=st.integers(0, 10_000), y=st.integers(0, 2))
def test_protected_image_respects_budget(eps, seed, y):
    x = np.random.default_rng(seed).random((3, 8, 8)).astype(np.float32)
    out = protect_image(x, y, toy_classifier(), PerturbationSpec.with_epsilon(eps, iterations=5))
    assert np.abs(out - x).max() <= eps + 1e-6
    assert out.min() >= 0 and out.max() <= 1


def test_protect_is_deterministic_and_descends():
    rng = np.random.default_rng(2)
    images = rng.random((16, 3, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 3, 16)
    h = toy_classifier(1)
    spec = PerturbationSpec(epsilon=0.3, alpha=0.03, iterations=20)
    a = protect_batch(images, labels, h, spec)
    np.testing.assert_array_equal(a, protect_batch(images, labels, h, spec))
    assert mean_cross_entropy(h, a, labels) < mean_cross_entropy(h, images, labels)


def test_dataset_batching_invariance():
    rng = np.random.default_rng(3)
    d = LabeledDataset(rng.random((20, 3, 8, 8)).astype(np.float32), rng.integers(0, 3, 20), 3, "toy")
    h = toy_classifier(2)
    spec = PerturbationSpec(epsilon=0.2, alpha=0.02, iterations=10)
    one = protect_dataset(d, h, spec, batch=1)
    many = protect_dataset(d, h, spec, batch=64)
    np.testing.assert_allclose(one.images, many.images, atol=1e-6, rtol=0)
    np.testing.assert_array_equal(one.labels, d.labels)


def test_dataset_empty_and_progress():
    d = LabeledDataset(np.zeros((0, 3, 8, 8), np.float32), np.zeros(0, np.int64), 3)
    assert len(protect_dataset(d, toy_classifier(), PerturbationSpec())) == 0
    seen = []
    d2 = LabeledDataset(np.zeros((5, 3, 8, 8), np.float32), np.zeros(5, np.int64), 3)
    protect_dataset(d2, toy_classifier(), PerturbationSpec(iterations=1), batch=2,
                    progress=lambda done, total: seen.append((done, total)))
    assert seen == [(2, 5), (4, 5), (5, 5)]


def test_protect_leaves_classifier_untouched():
    h = toy_classifier(3)
    before = h.checksum()
    protect_batch(np.random.default_rng(0).random((4, 3, 8, 8)).astype(np.float32), [0, 1, 2, 0], h,
                  PerturbationSpec(iterations=3))
    assert h.checksum() == before
