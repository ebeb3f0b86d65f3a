"""Ciphertext-only reconstruction attacks against perceptual encryption.

Two attacks are provided:

* the GAN-based attack: a generator learns to turn encrypted images into
  plain-looking ones using only a discriminator that compares its output
  with a *different* set of plain images. The training set is split in
  half; the first half is encrypted and the second stays plain, so the
  generator never sees the plain version of anything it reconstructs.
* a supervised paired attack: the generator is fit to (encrypted, plain)
  pairs by mean squared error with a step-decayed SGD schedule.

Schemes are pluggable through :class:`EncryptionScheme`.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .classify import step_lr
from .imagedata import LabeledDataset, split_halves
from .metrics import SsimParams, ssim_batch
from .models import (ModelHandle, NetworkSpec, build, forward_generator, to_model_space,
                     to_pixel_space)
from .transform_trainer import TrainingError, Transform, load_transform, stream_seed


# --- schemes -------------------------------------------------------------------

class EncryptionScheme:
    """Maps pixel-space images ``(N, C, H, W)`` or ``(C, H, W)`` to same-shape images."""

    name = "scheme"
    keyed = False

    def encrypt_one(self, img: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply(self, images) -> np.ndarray:
        arr = np.asarray(getattr(images, "values", images), dtype=np.float32)
        if arr.ndim == 3:
            return self.encrypt_one(arr)
        return np.stack([self.encrypt_one(im) for im in arr]) if len(arr) else arr.copy()

    def __call__(self, images) -> np.ndarray:
        return self.apply(images)


class IdentityScheme(EncryptionScheme):
    name = "identity"

    def apply(self, images) -> np.ndarray:
        return np.array(getattr(images, "values", images), dtype=np.float32)


class BlockShuffleScheme(EncryptionScheme):
    """Permutes non-overlapping ``block`` x ``block`` tiles with one common key."""

    name = "block_shuffle"
    keyed = True

    def __init__(self, seed: int = 0, block: int = 4):
        self.seed = seed
        self.block = block

    def key(self, grid_h: int, grid_w: int) -> np.ndarray:
        return np.random.default_rng([self.seed, grid_h, grid_w]).permutation(grid_h * grid_w)

    def _tiles(self, img):
        c, h, w = img.shape
        b = self.block
        if h % b or w % b:
            raise ValueError(f"image {h}x{w} not divisible into {b}x{b} blocks")
        gh, gw = h // b, w // b
        tiles = img.reshape(c, gh, b, gw, b).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c, b, b)
        return tiles, gh, gw

    def _untile(self, tiles, c, gh, gw):
        b = self.block
        return tiles.reshape(gh, gw, c, b, b).transpose(2, 0, 3, 1, 4).reshape(c, gh * b, gw * b)

    def encrypt_one(self, img):
        tiles, gh, gw = self._tiles(img)
        return np.ascontiguousarray(self._untile(tiles[self.key(gh, gw)], img.shape[0], gh, gw))

    def decrypt_one(self, img):
        tiles, gh, gw = self._tiles(img)
        out = np.empty_like(tiles)
        out[self.key(gh, gw)] = tiles
        return np.ascontiguousarray(self._untile(out, img.shape[0], gh, gw))


class NegPosFlipScheme(EncryptionScheme):
    """Inverts a random half of the pixel values, ``v -> 1 - v``, with a key per image.

    The key is derived from the scheme seed and a CRC of the image bytes, so
    encryption is deterministic while every image gets its own key.
    """

    name = "negpos"
    keyed = True

    def __init__(self, seed: int = 0):
        self.seed = seed

    def mask(self, img: np.ndarray) -> np.ndarray:
        crc = zlib.crc32(np.ascontiguousarray(img, dtype=np.float32).tobytes())
        return np.random.default_rng([self.seed, crc]).random(img.shape) < 0.5

    def encrypt_one(self, img):
        return np.where(self.mask(img), 1.0 - img, img).astype(np.float32)


class GeneratorScheme(EncryptionScheme):
    """A trained transformation network used as a keyless scheme."""

    name = "proposed"

    def __init__(self, G_AB: ModelHandle, name: str = "proposed"):
        self.transform = Transform(G_AB)
        self.name = name

    def apply(self, images):
        return self.transform(np.asarray(getattr(images, "values", images), dtype=np.float32))


def scheme_by_name(name: str, seed: int = 0) -> EncryptionScheme:
    """``identity``, ``block_shuffle``, ``negpos`` or a path to a transform checkpoint."""
    if name == "identity":
        return IdentityScheme()
    if name == "block_shuffle":
        return BlockShuffleScheme(seed)
    if name == "negpos":
        return NegPosFlipScheme(seed)
    if Path(name).is_file():
        return GeneratorScheme(load_transform(name))
    raise ValueError(f"unknown scheme {name!r}")


# --- configs -------------------------------------------------------------------

@dataclass(frozen=True)
class GaConfig:
    epochs: int = 100
    lr: float = 2e-4
    beta: float = 0.5
    batch_size: int = 64
    seed: int = 0
    generator: str = "unet_generator"
    generator_base: int = 64
    generator_depth: int = 4
    identity_skip: bool = True
    discriminator_base: int = 64
    discriminator_depth: int = 3
    r1_gamma: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1 or not 0 <= self.beta < 1:
            raise ValueError("GaConfig values must be positive")


@dataclass(frozen=True)
class PairedConfig:
    epochs: int = 70
    lr: float = 0.1
    lr_drop_epochs: tuple[int, ...] = (40, 60)
    lr_drop_factor: float = 10.0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    generator: str = "unet_generator"
    generator_base: int = 64
    generator_depth: int = 4
    identity_skip: bool = True

    def lr_at(self, epoch: int) -> float:
        return step_lr(self.lr, self.lr_drop_epochs, self.lr_drop_factor, epoch)


def _generator_spec(cfg, image_size: int, stream: str) -> NetworkSpec:
    return NetworkSpec(cfg.generator, base_channels=cfg.generator_base, depth=cfg.generator_depth,
                       image_size=image_size, identity_skip=cfg.identity_skip,
                       seed=stream_seed(cfg.seed, stream))


# --- GAN-based attack ------------------------------------------------------------

@dataclass
class GaResult:
    G_att: ModelHandle
    D_att: ModelHandle
    history: list[dict]


def train_ga(scheme: EncryptionScheme, T: LabeledDataset, cfg: GaConfig = GaConfig()) -> GaResult:
    """Split ``T`` in half, encrypt the first half, and train on (Enc(T1), T2)."""
    T1, T2 = split_halves(T, stream_seed(cfg.seed, "split"))
    if len(T1) == 0:
        raise ValueError("GA training needs at least two images")
    return train_ga_ciphertext_only(scheme.apply(T1.images), T2.images, cfg)


def train_ga_ciphertext_only(encrypted: np.ndarray, plain: np.ndarray,
                             cfg: GaConfig = GaConfig()) -> GaResult:
    """Adversarial training from encrypted images and *unrelated* plain images only."""
    encrypted = np.asarray(encrypted, dtype=np.float32)
    plain = np.asarray(plain, dtype=np.float32)
    if len(encrypted) == 0 or len(plain) == 0:
        raise ValueError("GA needs non-empty encrypted and plain sets")
    size = encrypted.shape[-1]
    G = build(_generator_spec(cfg, size, "G_att")).train()
    D = build(NetworkSpec("att_discriminator", base_channels=cfg.discriminator_base,
                          depth=cfg.discriminator_depth, image_size=size,
                          seed=stream_seed(cfg.seed, "D_att"))).train()
    betas = (cfg.beta, 0.999)
    opt_G = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=betas)
    opt_D = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=betas)
    n, b = len(encrypted), cfg.batch_size
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        pe, pp = rng.permutation(n), rng.permutation(len(plain))
        d_sum = g_sum = 0.0
        steps = 0
        for s in range(0, n, b):
            ie = pe[s:s + b]
            ip = pp[np.arange(s, s + len(ie)) % len(plain)]
            z = to_model_space(torch.from_numpy(encrypted[ie].copy()))
            real = to_model_space(torch.from_numpy(plain[ip].copy()))
            fake = G(z)
            if cfg.r1_gamma:
                real.requires_grad_(True)
            lr_real, lr_fake = D(real), D(fake.detach())
            d_loss = (F.binary_cross_entropy_with_logits(lr_real, torch.ones_like(lr_real))
                      + F.binary_cross_entropy_with_logits(lr_fake, torch.zeros_like(lr_fake)))
            if cfg.r1_gamma:
                (g_real,) = torch.autograd.grad(lr_real.sum(), real, create_graph=True)
                d_loss = d_loss + 0.5 * cfg.r1_gamma * g_real.pow(2).flatten(1).sum(1).mean()
            opt_D.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_D.step()
            out = D(fake)
            g_loss = F.binary_cross_entropy_with_logits(out, torch.ones_like(out))
            opt_G.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_G.step()
            dl, gl = d_loss.item(), g_loss.item()
            if not (math.isfinite(dl) and math.isfinite(gl)):
                raise TrainingError(f"non-finite GA loss in epoch {epoch}")
            d_sum += dl
            g_sum += gl
            steps += 1
        history.append({"epoch": epoch, "d_loss": d_sum / steps, "g_loss": g_sum / steps})
    return GaResult(G.eval(), D.eval(), history)


# --- paired attack -----------------------------------------------------------------

@dataclass
class PairedResult:
    G_att: ModelHandle
    history: list[dict]


def train_paired_attack(scheme: EncryptionScheme, pairs=None, plain=None,
                        cfg: PairedConfig = PairedConfig()) -> PairedResult:
    """Fit ``G_att(enc) ~ plain`` by MSE.

    ``pairs`` is ``(plain_images, encrypted_images)``. Without explicit pairs
    the attacker encrypts ``plain`` itself, which is only allowed for keyed
    schemes (it models a known-key / chosen-plaintext setting).
    """
    if pairs is None:
        if plain is None:
            raise ValueError("need either pairs or plain images")
        if not scheme.keyed:
            raise ValueError(f"scheme {scheme.name!r} has no key; supply (plain, encrypted) pairs explicitly")
        plain = np.asarray(plain, dtype=np.float32)
        pairs = (plain, scheme.apply(plain))
    pl, enc = (np.asarray(a, dtype=np.float32) for a in pairs)
    if len(pl) == 0:
        raise ValueError("empty pair list")
    if pl.shape != enc.shape:
        raise ValueError("plain and encrypted arrays differ in shape")
    G = build(_generator_spec(cfg, pl.shape[-1], "G_paired")).train()
    opt = torch.optim.SGD(G.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    n, b = len(pl), cfg.batch_size
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for s in range(0, n, b):
            idx = perm[s:s + b]
            z = to_model_space(torch.from_numpy(enc[idx].copy()))
            target = to_model_space(torch.from_numpy(pl[idx].copy()))
            loss = F.mse_loss(G(z), target)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite paired-attack loss in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "lr": lr, "mse": total / n})
    return PairedResult(G.eval(), history)


# --- evaluation ----------------------------------------------------------------

def reconstruct(G_att: ModelHandle, encrypted, batch: int = 256) -> np.ndarray:
    """Pixel-space reconstructions of pixel-space encrypted images."""
    arr = np.asarray(getattr(encrypted, "values", encrypted), dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    G_att.eval()
    out = np.empty_like(arr)
    with torch.no_grad():
        for s in range(0, len(arr), batch):
            z = to_model_space(torch.from_numpy(arr[s:s + batch].copy()))
            out[s:s + batch] = to_pixel_space(forward_generator(G_att, z)).clamp(0, 1).numpy()
    return out[0] if single else out


@dataclass
class AttackReport:
    scheme: str
    attack: str
    mean_ssim: float
    per_image: list[float] = field(default_factory=list)
    dataset: str = ""

    def to_json(self) -> dict:
        return {"scheme": self.scheme, "attack": self.attack, "dataset": self.dataset,
                "mean_ssim": self.mean_ssim, "n": len(self.per_image)}

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jp, cp = out_dir / "attack_report.json", out_dir / "attack_per_image.csv"
        jp.write_text(json.dumps(self.to_json(), indent=2))
        with cp.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "ssim"])
            w.writerows([i, repr(v)] for i, v in enumerate(self.per_image))
        return jp, cp


def evaluate_attack(G_att, scheme: EncryptionScheme, test: LabeledDataset, attack: str = "ga",
                    params: SsimParams = SsimParams()) -> AttackReport:
    """Mean SSIM between each test image and ``G_att(Enc(x))``.

    ``G_att`` may be a generator handle or any callable on pixel-space batches.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    enc = scheme.apply(test.images)
    rec = reconstruct(G_att, enc) if isinstance(G_att, ModelHandle) else np.asarray(G_att(enc))
    per = ssim_batch(test.images, rec, params)
    return AttackReport(scheme.name, attack, math.fsum(per) / len(per), per.tolist(), test.name)


def ga_config_from_dict(d: dict) -> GaConfig:
    return GaConfig(**d)


def paired_config_from_dict(d: dict) -> PairedConfig:
    d = dict(d)
    if "lr_drop_epochs" in d:
        d["lr_drop_epochs"] = tuple(d["lr_drop_epochs"])
    return PairedConfig(**d)

