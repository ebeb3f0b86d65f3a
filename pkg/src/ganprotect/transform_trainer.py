"""CycleGAN training between plain images and their protected copies.

Domain A holds plain images, domain B the protected ones. The trained
``G_AB`` is the transformation network applied to every image before it is
sent to a classifier.

Each step draws an A batch and a B batch independently, updates both
discriminators on least-squares terms, then updates both generators on

    lam * (adv_A + adv_B) + gamma1 * L_p + gamma2 * L_c + gamma3 * L_r

with ``phi`` (perceptual features) and ``h_theta`` (classifier) frozen.
Generators work in ``[-1, 1]``; ``phi`` and ``h_theta`` see pixel space.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imagedata import LabeledDataset
from .losses import LossReport, LossWeights, cycle_consistency_loss, write_reports
from .models import (ModelHandle, NetworkSpec, build, config_hash, forward_generator,
                     load_checkpoint, save_checkpoint, state_checksum, to_model_space,
                     to_pixel_space)

log = logging.getLogger(__name__)

NETWORKS = ("G_AB", "G_BA", "F_A", "F_B")


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(f"{message}; last good checkpoint: {last_checkpoint}")
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class CycleGanConfig:
    epochs: int = 5000
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 100
    generator_arch: str = "unet_generator"
    generator_base: int = 64
    generator_depth: int = 4
    discriminator_base: int = 64
    discriminator_depth: int = 3
    reconstruction_reduction: str = "mean"
    image_pool: bool = False
    pool_size: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    @classmethod
    def from_dict(cls, d: dict) -> "CycleGanConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def stream_seed(seed: int, name: str) -> int:
    """Deterministic per-purpose seed derived from the global seed."""
    return int(np.random.SeedSequence([seed, *name.encode()]).generate_state(1)[0])


def network_specs(cfg: CycleGanConfig, image_size: int) -> dict[str, NetworkSpec]:
    g = dict(arch=cfg.generator_arch, base_channels=cfg.generator_base,
             depth=cfg.generator_depth, image_size=image_size)
    d = dict(arch="patch_discriminator", base_channels=cfg.discriminator_base,
             depth=cfg.discriminator_depth, image_size=image_size)
    return {
        "G_AB": NetworkSpec(**g, seed=stream_seed(cfg.seed, "G_AB")),
        "G_BA": NetworkSpec(**g, seed=stream_seed(cfg.seed, "G_BA")),
        "F_A": NetworkSpec(**d, seed=stream_seed(cfg.seed, "F_A")),
        "F_B": NetworkSpec(**d, seed=stream_seed(cfg.seed, "F_B")),
    }


def _set_grad(handles, flag: bool):
    for h in handles:
        for p in h.parameters():
            p.requires_grad_(flag)


class ImagePool:
    """History buffer of generated images for discriminator updates."""

    def __init__(self, size: int):
        self.size = size
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        out = []
        for img in batch:
            img = img.detach().unsqueeze(0)
            if len(self.images) < self.size:
                self.images.append(img)
                out.append(img)
            elif rng.random() < 0.5:
                j = int(rng.integers(0, self.size))
                out.append(self.images[j].clone())
                self.images[j] = img
            else:
                out.append(img)
        return torch.cat(out)


class CycleGanTrainer:
    """Owns the four networks, their optimizers and the step counter."""

    def __init__(self, X: LabeledDataset, P: LabeledDataset, h_theta: ModelHandle,
                 phi: ModelHandle, cfg: CycleGanConfig, out_dir=None):
        if len(X) != len(P):
            raise ValueError(f"dataset size mismatch: |X|={len(X)} vs |P|={len(P)}")
        if len(X) == 0:
            raise ValueError("empty training set")
        if X.image_shape != P.image_shape:
            raise ValueError("plain and protected images differ in shape")
        self.X, self.P, self.cfg = X, P, cfg
        self.h_theta = h_theta.freeze() if hasattr(h_theta, "freeze") else h_theta
        self.phi = phi.freeze() if hasattr(phi, "freeze") else phi
        self.out_dir = Path(out_dir) if out_dir else None
        specs = network_specs(cfg, X.image_shape[-1])
        self.nets = {k: build(s) for k, s in specs.items()}
        gens = itertools.chain(self.nets["G_AB"].parameters(), self.nets["G_BA"].parameters())
        discs = itertools.chain(self.nets["F_A"].parameters(), self.nets["F_B"].parameters())
        betas = (cfg.beta1, cfg.beta2)
        self.opt_G = torch.optim.Adam(gens, lr=cfg.lr, betas=betas)
        self.opt_D = torch.optim.Adam(discs, lr=cfg.lr, betas=betas)
        self.epoch = 0
        self.step = 0
        self.reports: list[LossReport] = []
        self.warnings: list[str] = []
        self.last_checkpoint: str | None = None
        self.pools = {"A": ImagePool(cfg.pool_size), "B": ImagePool(cfg.pool_size)}
        for h in self.nets.values():
            h.train()

    # -- accessors
    @property
    def G_AB(self) -> ModelHandle:
        return self.nets["G_AB"]

    @property
    def G_BA(self) -> ModelHandle:
        return self.nets["G_BA"]

    @property
    def F_A(self) -> ModelHandle:
        return self.nets["F_A"]

    @property
    def F_B(self) -> ModelHandle:
        return self.nets["F_B"]

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.X) / self.cfg.batch_size)

    def _phi(self, z):
        return self.phi(to_pixel_space(z))

    def _h(self, z):
        return self.h_theta(to_pixel_space(z))

    def epoch_batches(self, epoch: int):
        """Unpaired index batches for one epoch, a pure function of (seed, epoch)."""
        rng = np.random.default_rng([self.cfg.seed, epoch])
        n, b = len(self.X), self.cfg.batch_size
        pa, pb = rng.permutation(n), rng.permutation(n)
        for s in range(0, n, b):
            yield pa[s:s + b], pb[s:s + b]

    def make_batch(self, idx_a, idx_b):
        x = to_model_space(torch.from_numpy(self.X.images[idx_a].copy()))
        xp = to_model_space(torch.from_numpy(self.P.images[idx_b].copy()))
        y = torch.from_numpy(self.X.labels[idx_a].copy())
        yp = torch.from_numpy(self.P.labels[idx_b].copy())
        return x, xp, y, yp

    # -- half steps
    def discriminator_step(self, x, xp) -> tuple[float, float]:
        _set_grad([self.F_A, self.F_B], True)
        with torch.no_grad():
            fake_B = self.G_AB(x)
            fake_A = self.G_BA(xp)
        if self.cfg.image_pool:
            rng = np.random.default_rng([self.cfg.seed, self.step, 7])
            fake_A = self.pools["A"].query(fake_A, rng)
            fake_B = self.pools["B"].query(fake_B, rng)
        d_A = (self.F_A(x) - 1).pow(2).mean() + self.F_A(fake_A).pow(2).mean()
        d_B = (self.F_B(xp) - 1).pow(2).mean() + self.F_B(fake_B).pow(2).mean()
        self.opt_D.zero_grad(set_to_none=True)
        (d_A + d_B).backward()
        self.opt_D.step()
        return d_A.item(), d_B.item()

    def generator_step(self, x, xp, y, yp) -> LossReport:
        w = self.cfg.weights
        _set_grad([self.F_A, self.F_B], False)
        fake_B = self.G_AB(x)
        fake_A = self.G_BA(xp)
        ad_A = (self.F_A(fake_A) - 1).pow(2).mean()
        ad_B = (self.F_B(fake_B) - 1).pow(2).mean()
        with torch.no_grad():
            fx = self._phi(x)
        # both perceptual terms compare against the plain batch
        l_p = F.mse_loss(self._phi(fake_B), fx) + F.mse_loss(self._phi(fake_A), fx)
        l_c = F.cross_entropy(self._h(fake_B), y) + F.cross_entropy(self._h(fake_A), yp)
        red = self.cfg.reconstruction_reduction
        l_r = (F.mse_loss(self.G_BA(fake_B), x, reduction=red)
               + F.mse_loss(self.G_AB(fake_A), xp, reduction=red))
        l_cyc = cycle_consistency_loss(l_p, l_c, l_r, w)
        l_gan = w.lam * (ad_A + ad_B) + l_cyc
        if not torch.isfinite(l_gan):
            raise TrainingError(f"non-finite generator loss at step {self.step}", self.last_checkpoint)
        self.opt_G.zero_grad(set_to_none=True)
        l_gan.backward()
        self.opt_G.step()
        _set_grad([self.F_A, self.F_B], True)
        vals = [t.item() for t in (ad_A, ad_B, l_p, l_c, l_r)]
        rep = LossReport(self.step, *vals)
        rep.l_cyc = cycle_consistency_loss(rep.l_p, rep.l_c, rep.l_r, w)
        rep.l_gan = w.lam * (rep.l_ad_A + rep.l_ad_B) + rep.l_cyc
        return rep

    def train_step(self, idx_a, idx_b) -> LossReport:
        x, xp, y, yp = self.make_batch(idx_a, idx_b)
        d_A, d_B = self.discriminator_step(x, xp)
        if not (math.isfinite(d_A) and math.isfinite(d_B)):
            raise TrainingError(f"non-finite discriminator loss at step {self.step}", self.last_checkpoint)
        rep = self.generator_step(x, xp, y, yp)
        rep.l_disc_A, rep.l_disc_B = d_A, d_B
        self.step += 1
        return rep

    def train(self, epochs: int | None = None, log_every: int = 0) -> list[LossReport]:
        """Run until ``epochs`` (default ``cfg.epochs``) epochs have completed."""
        end = self.cfg.epochs if epochs is None else epochs
        new = []
        while self.epoch < end:
            for idx_a, idx_b in self.epoch_batches(self.epoch):
                rep = self.train_step(idx_a, idx_b)
                new.append(rep)
                self.reports.append(rep)
                if log_every and rep.step % log_every == 0:
                    log.info("step %d  l_gan=%.4f l_p=%.4f l_c=%.4f l_r=%.4f",
                             rep.step, rep.l_gan, rep.l_p, rep.l_c, rep.l_r)
            self.epoch += 1
            if self.out_dir and (self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == self.cfg.epochs):
                self.save(self.out_dir / f"ckpt_epoch{self.epoch:05d}.pt")
        if self.out_dir:
            write_reports(self.out_dir / "losses.jsonl", self.reports)
        return new

    # -- persistence
    def save(self, path) -> Path:
        extra = {
            "step": self.step,
            "opt_G": self.opt_G.state_dict(),
            "opt_D": self.opt_D.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "pool_A": [t for t in self.pools["A"].images],
            "pool_B": [t for t in self.pools["B"].images],
        }
        path = save_checkpoint(path, self.nets, asdict(self.cfg), self.epoch, extra)
        latest = Path(path).parent / "latest.pt"
        save_checkpoint(latest, self.nets, asdict(self.cfg), self.epoch, extra)
        self.last_checkpoint = str(path)
        return path

    def resume(self, path) -> "CycleGanTrainer":
        """Restore networks, optimizers and counters from a trainer checkpoint."""
        handles, meta = load_checkpoint(path, expect_arch={k: v.spec.arch for k, v in self.nets.items()})
        for k, h in handles.items():
            self.nets[k].module.load_state_dict(h.module.state_dict())
        expected = config_hash(asdict(self.cfg))
        if meta["config_hash"] != expected:
            msg = f"{path}: config hash {meta['config_hash']} differs from current {expected}"
            self.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
        extra = meta["extra"]
        self.opt_G.load_state_dict(extra["opt_G"])
        self.opt_D.load_state_dict(extra["opt_D"])
        torch.set_rng_state(extra["torch_rng"])
        self.pools["A"].images = list(extra.get("pool_A", []))
        self.pools["B"].images = list(extra.get("pool_B", []))
        self.epoch = int(meta["epoch"])
        self.step = int(extra["step"])
        self.reports = [r for r in self.reports if r.step < self.step]
        self.last_checkpoint = str(path)
        return self

    def checksums(self) -> dict[str, str]:
        sums = {k: h.checksum() for k, h in self.nets.items()}
        sums["h_theta"] = state_checksum(getattr(self.h_theta, "module", self.h_theta))
        sums["phi"] = state_checksum(getattr(self.phi, "module", self.phi))
        return sums


@dataclass
class CycleGanResult:
    G_AB: ModelHandle
    G_BA: ModelHandle
    F_A: ModelHandle
    F_B: ModelHandle
    reports: list[LossReport]
    trainer: CycleGanTrainer


def train_cyclegan(X: LabeledDataset, P: LabeledDataset, h_theta, phi, cfg: CycleGanConfig,
                   out_dir=None, resume_from=None, log_every: int = 0) -> CycleGanResult:
    """Train ``G_AB: plain -> protected`` and its companions; see module docstring."""
    trainer = CycleGanTrainer(X, P, h_theta, phi, cfg, out_dir)
    if resume_from:
        trainer.resume(resume_from)
    reports = trainer.train(log_every=log_every)
    for h in trainer.nets.values():
        h.eval()
    return CycleGanResult(trainer.G_AB, trainer.G_BA, trainer.F_A, trainer.F_B, reports, trainer)


class Transform:
    """Pixel-space view of a trained generator: ``[0, 1]`` in, ``[0, 1]`` out."""

    def __init__(self, G_AB: ModelHandle, batch: int = 256):
        self.G = G_AB.eval()
        self.batch = batch

    def __call__(self, images) -> np.ndarray:
        return transform(self.G, images, self.batch)


def transform(G_AB: ModelHandle, x, batch: int = 256) -> np.ndarray:
    """Apply ``G_AB`` in eval mode to one image ``(C, H, W)`` or a batch ``(N, C, H, W)``."""
    arr = np.asarray(getattr(x, "values", x), dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    G_AB.eval()
    out = np.empty_like(arr)
    with torch.no_grad():
        for s in range(0, len(arr), batch):
            z = to_model_space(torch.from_numpy(arr[s:s + batch].copy()))
            out[s:s + batch] = to_pixel_space(forward_generator(G_AB, z)).clamp(0, 1).numpy()
    return out[0] if single else out


def load_transform(path) -> ModelHandle:
    """``G_AB`` from a trainer checkpoint."""
    handles, _ = load_checkpoint(path)
    if "G_AB" not in handles:
        raise KeyError(f"{path}: no G_AB in checkpoint")
    return handles["G_AB"].eval()
