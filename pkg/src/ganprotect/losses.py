"""Objectives for training the transformation CycleGAN.

All functions take tensors and plain callables (handles work too) and
return scalar tensors, so gradients flow to whichever networks were not
frozen by the caller. Both domains are passed in the same value space;
callers wrap ``phi`` and ``h_theta`` to convert if needed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.4
    gamma1: float = -1.0
    gamma2: float = 0.4
    gamma3: float = 0.9

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v != v or v in (float("inf"), float("-inf")):
                raise ValueError(f"loss weight {k} must be finite")


@dataclass
class LossReport:
    step: int = 0
    l_ad_A: float = 0.0
    l_ad_B: float = 0.0
    l_p: float = 0.0
    l_c: float = 0.0
    l_r: float = 0.0
    l_cyc: float = 0.0
    l_gan: float = 0.0
    l_disc_A: float = 0.0
    l_disc_B: float = 0.0

    FIELDS = ("step", "l_ad_A", "l_ad_B", "l_p", "l_c", "l_r", "l_cyc", "l_gan", "l_disc_A", "l_disc_B")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self.FIELDS})

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))

    def composition_error(self, w: LossWeights) -> float:
        """Largest violation of the cycle and full-objective identities."""
        cyc = cycle_consistency_loss(self.l_p, self.l_c, self.l_r, w)
        gan = w.lam * (self.l_ad_A + self.l_ad_B) + self.l_cyc
        return max(abs(cyc - self.l_cyc), abs(gan - self.l_gan))


def write_reports(path, reports) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    return path


def read_reports(path) -> list[LossReport]:
    with Path(path).open() as fh:
        return [LossReport.from_json(line) for line in fh if line.strip()]


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean()


def feature_loss(x: torch.Tensor, xhat: torch.Tensor, phi) -> torch.Tensor:
    """Squared feature distance normalized by the feature map size C*H*W.

    Batches are averaged over images, i.e. a per-element mean overall.
    """
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xhat.shape)}")
    return _mse(phi(xhat), phi(x))


def perceptual_loss(x, G_AB, G_BA, x_p, phi) -> torch.Tensor:
    """``feat(x, G_AB(x)) + feat(x, G_BA(x_p))``; both terms compare against ``x``."""
    return feature_loss(x, G_AB(x), phi) + feature_loss(x, G_BA(x_p), phi)


def classification_loss(x, x_p, y, G_AB, G_BA, h_theta, y_p=None) -> torch.Tensor:
    """Cross-entropy of ``h_theta`` on both translated batches.

    ``y`` labels ``x``; ``y_p`` labels ``x_p`` and defaults to ``y``
    (batches drawn independently from the two domains carry their own labels).
    """
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    y_p = y if y_p is None else torch.as_tensor(y_p, dtype=torch.long).reshape(-1)
    la, lb = h_theta(G_AB(x)), h_theta(G_BA(x_p))
    for logits, labels in ((la, y), (lb, y_p)):
        if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ValueError(f"label out of range [0, {logits.shape[1]})")
    return F.cross_entropy(la, y) + F.cross_entropy(lb, y_p)


def reconstruction_loss(x, x_p, G_AB, G_BA, reduction: str = "mean") -> torch.Tensor:
    """Squared error of both cycles, ``A -> B -> A`` and ``B -> A -> B``."""
    ra, rb = G_BA(G_AB(x)), G_AB(G_BA(x_p))
    if ra.shape != x.shape or rb.shape != x_p.shape:
        raise ValueError("generators must preserve image shape")
    if reduction == "mean":
        return _mse(ra, x) + _mse(rb, x_p)
    if reduction == "sum":
        return (ra - x).pow(2).sum() + (rb - x_p).pow(2).sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def cycle_consistency_loss(l_p, l_c, l_r, w: LossWeights):
    return w.gamma1 * l_p + w.gamma2 * l_c + w.gamma3 * l_r


def adversarial_loss(F_disc, real_batch, fake_batch):
    """Least-squares GAN terms ``(gen_term, disc_term)``.

    ``disc_term = E[(F(real) - 1)^2] + E[F(fake)^2]`` and
    ``gen_term = E[(F(fake) - 1)^2]``. Callers detach ``fake_batch`` for the
    discriminator update.
    """
    if len(real_batch) == 0 or len(fake_batch) == 0:
        raise ValueError("adversarial loss needs non-empty batches")
    s_real, s_fake = F_disc(real_batch), F_disc(fake_batch)
    disc = (s_real - 1).pow(2).mean() + s_fake.pow(2).mean()
    gen = (s_fake - 1).pow(2).mean()
    return gen, disc


def full_objective(parts: LossReport, w: LossWeights) -> float:
    return w.lam * (parts.l_ad_A + parts.l_ad_B) + parts.l_cyc


def generator_objective(l_ad_A, l_ad_B, l_cyc, w: LossWeights):
    """Tensor version of :func:`full_objective` used inside training."""
    return w.lam * (l_ad_A + l_ad_B) + l_cyc
