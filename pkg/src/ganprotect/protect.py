"""Preliminary visual protection by projected sign-gradient descent.

Starting from a plain image ``x``, each step moves against the sign of the
classifier's cross-entropy gradient and projects back onto the L-infinity
ball of radius ``epsilon`` around ``x`` intersected with the valid pixel
range. The result carries a large, perceptible perturbation that the
classifier still maps to the correct label.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .imagedata import ImageTensor, LabeledDataset


class ProtectionError(FloatingPointError):
    def __init__(self, message: str, loss: float):
        super().__init__(f"{message} (loss={loss})")
        self.loss = loss


@dataclass(frozen=True)
class PerturbationSpec:
    epsilon: float = 0.3
    alpha: float = 0.03
    iterations: int = 50
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.alpha > 2 * self.epsilon and self.epsilon > 0:
            raise ValueError("alpha must not exceed 2 * epsilon")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.clamp_lo > self.clamp_hi:
            raise ValueError("clamp_lo > clamp_hi")

    @classmethod
    def with_epsilon(cls, epsilon: float, iterations: int = 50, **kw) -> "PerturbationSpec":
        """Default step size of epsilon / 10."""
        return cls(epsilon=epsilon, alpha=epsilon / 10 if epsilon > 0 else 1e-3,
                   iterations=iterations, **kw)


def _tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        x = x.values
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    return x if dtype is None else x.to(dtype)


def project_linf(x_p, x, spec: PerturbationSpec) -> torch.Tensor:
    """Nearest point to ``x_p`` inside ``{|r - x| <= eps} ∩ [clamp_lo, clamp_hi]``."""
    x_p, x = _tensor(x_p), _tensor(x)
    if x_p.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_p.shape)} vs {tuple(x.shape)}")
    r = torch.minimum(torch.maximum(x_p, x - spec.epsilon), x + spec.epsilon)
    return r.clamp(spec.clamp_lo, spec.clamp_hi)


def _ce_gradient(model, x_t: torch.Tensor, y: torch.Tensor):
    x_t = x_t.detach().requires_grad_(True)
    # summed loss keeps each image's gradient independent of the batch
    loss = F.cross_entropy(model(x_t), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x_t)
    return grad, loss.detach()


def pgd_protect_step(x_t, x, y, h_theta, spec: PerturbationSpec) -> torch.Tensor:
    """One descent step: ``project(x_t - alpha * sign(grad CE(h(x_t), y)))``.

    Works on single images (C, H, W) or batches (N, C, H, W). ``h_theta``
    must already be in eval mode; sign(0) is 0, so stationary pixels stay put.
    """
    x_t, x = _tensor(x_t), _tensor(x)
    single = x_t.dim() == 3
    xb, xtb = (x.unsqueeze(0), x_t.unsqueeze(0)) if single else (x, x_t)
    yb = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    grad, loss = _ce_gradient(h_theta, xtb, yb)
    if not torch.isfinite(grad).all():
        raise ProtectionError("non-finite gradient during protection", float(loss))
    out = project_linf(xtb - spec.alpha * grad.sign(), xb, spec).detach()
    return out[0] if single else out


def _eval_copy(h_theta, dtype):
    module = getattr(h_theta, "module", h_theta)
    if dtype is None:
        module.eval()
        return module, None
    m = copy.deepcopy(module).to(dtype).eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m, dtype


def _run(model, x: torch.Tensor, y: torch.Tensor, spec: PerturbationSpec) -> torch.Tensor:
    x_p = x.clone()
    for _ in range(spec.iterations):
        x_p = pgd_protect_step(x_p, x, y, model, spec)
    return x_p


def protect_image(x, y: int, h_theta, spec: PerturbationSpec,
                  dtype: torch.dtype | None = torch.float64) -> np.ndarray:
    """Protected copy of one image, ``spec.iterations`` steps from ``x_p^0 = x``.

    Computation runs on an eval-mode copy of ``h_theta`` in ``dtype``
    (float64 by default, which makes results independent of batching).
    """
    model, dt = _eval_copy(h_theta, dtype)
    xt = _tensor(x, dt)
    out = _run(model, xt.unsqueeze(0), torch.tensor([int(y)]), spec)[0]
    return out.to(torch.float32).numpy() if isinstance(x, (np.ndarray, ImageTensor)) else out


def protect_batch(images, labels, h_theta, spec: PerturbationSpec,
                  dtype: torch.dtype | None = torch.float64) -> np.ndarray:
    model, dt = _eval_copy(h_theta, dtype)
    xt = _tensor(np.asarray(images), dt)
    yt = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return _run(model, xt, yt, spec).to(torch.float32).numpy()


def protect_dataset(X: LabeledDataset, h_theta, spec: PerturbationSpec, batch: int = 64,
                    dtype: torch.dtype | None = torch.float64, progress=None) -> LabeledDataset:
    """Protect every image of ``X``; labels and order are preserved."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if len(X) == 0:
        return X.with_images(X.images, name=f"{X.name}/protected")
    model, dt = _eval_copy(h_theta, dtype)
    out = np.empty_like(X.images)
    for start in range(0, len(X), batch):
        sl = slice(start, start + batch)
        xt = _tensor(X.images[sl].copy(), dt)
        yt = torch.from_numpy(X.labels[sl].copy())
        out[sl] = _run(model, xt, yt, spec).to(torch.float32).numpy()
        if progress:
            progress(min(start + batch, len(X)), len(X))
    return X.with_images(out, name=f"{X.name}/protected")


def mean_cross_entropy(h_theta, images, labels, batch: int = 256) -> float:
    """Mean classifier cross-entropy over a set of pixel-space images."""
    module = getattr(h_theta, "module", h_theta)
    module.eval()
    total, n = 0.0, len(labels)
    with torch.no_grad():
        for s in range(0, n, batch):
            x = torch.tensor(np.array(images[s:s + batch]), dtype=next(module.parameters()).dtype)
            y = torch.as_tensor(np.array(labels[s:s + batch]), dtype=torch.long)
            total += float(F.cross_entropy(module(x), y, reduction="sum"))
    return total / n
