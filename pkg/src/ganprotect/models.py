"""Network builders, forward contracts and checkpoint files.

Every network lives behind a :class:`ModelHandle` that records its kind and
shape contract. Handles are callable, so loss functions accept a handle or
any plain ``torch`` callable interchangeably.

Value-space conventions:

* classifiers and the feature extractor take pixel-space input in ``[0, 1]``
  and apply their own input normalization as a first layer;
* generators map ``[-1, 1]`` to ``[-1, 1]`` (tanh output); use
  :func:`to_model_space` / :func:`to_pixel_space` at the boundary.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT = "ganprotect-checkpoint"
CHECKPOINT_VERSION = 1

KINDS = {
    "vgg13_bn": "classifier",
    "resnet18": "classifier",
    "unet_generator": "generator",
    "conv_encoder_decoder": "generator",
    "patch_discriminator": "discriminator",
    "att_discriminator": "discriminator",
    "vgg16_features": "feature_extractor",
    "toy_classifier": "classifier",
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class CheckpointError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


def to_model_space(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def to_pixel_space(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) * 0.5


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture id plus the knobs needed to rebuild it deterministically.

    ``base_channels`` is the width of the first stage (64 gives the
    published widths); ``depth`` is the number of down-sampling stages for
    generators and discriminators.
    """

    arch: str
    num_classes: int = 10
    in_channels: int = 3
    base_channels: int = 64
    depth: int = 4
    image_size: int = 32
    seed: int = 0
    identity_skip: bool = False
    normalize_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    normalize_std: tuple[float, ...] = (1.0, 1.0, 1.0)
    weights_path: str | None = None
    allow_random_init: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        names = {f.name for f in fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names}
        return cls(**kw)


# --- building blocks ---------------------------------------------------------

class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


VGG13_PLAN = (1, 1, "M", 2, 2, "M", 4, 4, "M", 8, 8, "M", 8, 8, "M")


class VGG(nn.Module):
    """VGG13 with batch normalization, CIFAR-style single linear head."""

    def __init__(self, num_classes, base=64, in_channels=3, mean=None, std=None):
        super().__init__()
        self.norm = Normalize(mean or (0.0,) * in_channels, std or (1.0,) * in_channels)
        layers, c = [], in_channels
        for v in VGG13_PLAN:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(c, v * base, 3, padding=1), nn.BatchNorm2d(v * base), nn.ReLU(inplace=True)]
                c = v * base
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(c, num_classes)

    def forward(self, x):
        h = self.pool(self.features(self.norm(x)))
        return self.classifier(h.flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """ResNet-18 for 32x32 inputs: 3x3 stem, no max-pool, four stages of two blocks."""

    def __init__(self, num_classes, base=64, in_channels=3, mean=None, std=None):
        super().__init__()
        self.norm = Normalize(mean or (0.0,) * in_channels, std or (1.0,) * in_channels)
        self.stem = nn.Sequential(nn.Conv2d(in_channels, base, 3, 1, 1, bias=False), nn.BatchNorm2d(base), nn.ReLU(inplace=True))
        stages, c = [], base
        for mult, stride in ((1, 1), (2, 2), (4, 2), (8, 2)):
            stages += [BasicBlock(c, base * mult, stride), BasicBlock(base * mult, base * mult, 1)]
            c = base * mult
        self.layers = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c, num_classes)

    def forward(self, x):
        h = self.layers(self.stem(self.norm(x)))
        return self.fc(self.pool(h).flatten(1))


class ToyClassifier(nn.Module):
    """Two conv layers and a linear head; for tests and tiny smoke runs."""

    def __init__(self, num_classes, base=8, in_channels=3, mean=None, std=None):
        super().__init__()
        self.norm = Normalize(mean or (0.0,) * in_channels, std or (1.0,) * in_channels)
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, base, 3, padding=1), nn.Tanh(),
            nn.Conv2d(base, base, 3, stride=2, padding=1), nn.Tanh(),
            nn.AdaptiveAvgPool2d(2),
        )
        self.head = nn.Linear(4 * base, num_classes)

    def forward(self, x):
        return self.head(self.body(self.norm(x)).flatten(1))


def _widths(base, depth, cap=8):
    return [base * min(2 ** i, cap) for i in range(depth)]


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections between mirrored stages.

    Down-sampling uses 4x4 stride-2 convolutions, up-sampling 4x4 stride-2
    transposed convolutions; instance normalization everywhere except the
    outermost and innermost layers. Output is tanh-bounded.

    With ``identity_skip`` the last layer starts at zero and its output is
    added to ``atanh(x)`` before the tanh, so the untrained network is close
    to the identity map.
    """

    def __init__(self, in_channels=3, out_channels=3, base=64, depth=4, identity_skip=False):
        super().__init__()
        if depth < 2:
            raise ValueError("U-Net depth must be >= 2")
        c = _widths(base, depth)
        self.depth = depth
        self.identity_skip = identity_skip
        downs = [nn.Conv2d(in_channels, c[0], 4, 2, 1)]
        for i in range(1, depth):
            block = [nn.LeakyReLU(0.2), nn.Conv2d(c[i - 1], c[i], 4, 2, 1)]
            if i < depth - 1:
                block.append(nn.InstanceNorm2d(c[i], affine=True))
            downs.append(nn.Sequential(*block))
        self.downs = nn.ModuleList(downs)
        ups = [nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(c[-1], c[-2], 4, 2, 1), nn.InstanceNorm2d(c[-2], affine=True))]
        for i in range(depth - 2, 0, -1):
            ups.append(nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(2 * c[i], c[i - 1], 4, 2, 1), nn.InstanceNorm2d(c[i - 1], affine=True)))
        self.ups = nn.ModuleList(ups)
        self.out = nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(2 * c[0], out_channels, 4, 2, 1))

    def forward(self, x):
        skips, h = [], x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = self.ups[0](skips[-1])
        for j, up in enumerate(self.ups[1:]):
            h = up(torch.cat([h, skips[-2 - j]], 1))
        h = self.out(torch.cat([h, skips[0]], 1))
        if self.identity_skip:
            h = h + torch.atanh(x.clamp(-1.0, 1.0) * 0.999)
        return torch.tanh(h)


class ConvEncoderDecoder(nn.Module):
    """Plain convolutional encoder-decoder without skip connections."""

    def __init__(self, in_channels=3, out_channels=3, base=64, depth=3, identity_skip=False):
        super().__init__()
        c = _widths(base, depth)
        enc, prev = [], in_channels
        for w in c:
            enc += [nn.Conv2d(prev, w, 4, 2, 1), nn.BatchNorm2d(w), nn.LeakyReLU(0.2)]
            prev = w
        dec = []
        outs = list(reversed(c[:-1])) + [out_channels]
        for i, w in enumerate(outs):
            dec.append(nn.ConvTranspose2d(prev, w, 4, 2, 1))
            if i < len(outs) - 1:
                dec += [nn.BatchNorm2d(w), nn.ReLU()]
            prev = w
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)
        self.identity_skip = identity_skip

    def forward(self, x):
        h = self.decoder(self.encoder(x))
        if self.identity_skip:
            h = h + torch.atanh(x.clamp(-1.0, 1.0) * 0.999)
        return torch.tanh(h)


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator: one real/fake score per overlapping patch."""

    def __init__(self, in_channels=3, base=64, depth=3):
        super().__init__()
        c = _widths(base, depth + 1)
        layers = [nn.Conv2d(in_channels, c[0], 4, 2, 1), nn.LeakyReLU(0.2)]
        for i in range(1, depth):
            layers += [nn.Conv2d(c[i - 1], c[i], 4, 2, 1), nn.InstanceNorm2d(c[i], affine=True), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(c[depth - 1], c[depth], 4, 1, 1), nn.InstanceNorm2d(c[depth], affine=True), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(c[depth], 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class AttackDiscriminator(nn.Module):
    """DCGAN-style down-sampling stack ending in one logit per image.

    No batch normalization: real and fake batches are scored separately, and
    per-batch statistics would let the network separate them by batch
    membership alone.
    """

    def __init__(self, in_channels=3, base=64, depth=3):
        super().__init__()
        c = _widths(base, depth)
        layers, prev = [], in_channels
        for w in c:
            layers += [nn.Conv2d(prev, w, 4, 2, 1), nn.LeakyReLU(0.2)]
            prev = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(prev, 1)

    def forward(self, x):
        return self.head(self.pool(self.features(x)).flatten(1))


class VGG16Features(nn.Module):
    """VGG16 truncated after its second ReLU (conv1_2), ImageNet input normalization."""

    def __init__(self):
        super().__init__()
        self.norm = Normalize(IMAGENET_MEAN, IMAGENET_STD)
        self.features = nn.Sequential(
            nn.Conv2d(3, 64, 3, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(),
        )

    def forward(self, x):
        return self.features(self.norm(x))


def _init_gan(m):
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


def _load_vgg16_weights(module: VGG16Features, path: str) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "models" in state:  # one of our own checkpoints
        state = next(iter(state["models"].values()))["state"]
        module.load_state_dict(state)
        return
    # torchvision layout: features.0 = conv1_1, features.2 = conv1_2
    try:
        sub = {k: state[k] for k in ("features.0.weight", "features.0.bias", "features.2.weight", "features.2.bias")}
    except KeyError as exc:
        raise CheckpointError(f"{path}: not a VGG16 state dict ({exc})") from None
    module.load_state_dict(sub, strict=False)


# --- handles -----------------------------------------------------------------

@dataclass
class ModelHandle:
    """A built network together with its spec and shape contract."""

    spec: NetworkSpec
    module: nn.Module
    kind: str = field(init=False)

    def __post_init__(self):
        self.kind = KINDS[self.spec.arch]

    def __call__(self, x):
        return self.module(x)

    @property
    def input_shape(self) -> tuple[int, ...]:
        s = self.spec
        return (s.in_channels, s.image_size, s.image_size)

    @property
    def output_shape(self) -> tuple[int, ...]:
        s = self.spec
        if self.kind == "classifier":
            return (s.num_classes,)
        if self.kind == "generator":
            return self.input_shape
        if self.kind == "discriminator":
            return (1,)
        return (64, s.image_size, s.image_size)

    @property
    def train_mode(self) -> bool:
        return self.module.training

    def train(self, mode: bool = True) -> "ModelHandle":
        self.module.train(mode)
        return self

    def eval(self) -> "ModelHandle":
        return self.train(False)

    def parameters(self):
        return self.module.parameters()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def checksum(self) -> str:
        return state_checksum(self.module)

    def freeze(self) -> "ModelHandle":
        for p in self.module.parameters():
            p.requires_grad_(False)
        return self.eval()


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build(spec: NetworkSpec) -> ModelHandle:
    """Construct the network named by ``spec.arch``; initialization depends only on ``spec.seed``."""
    if spec.arch not in KINDS:
        raise ValueError(f"unknown architecture id {spec.arch!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        module = _construct(spec)
    handle = ModelHandle(spec, module)
    if handle.kind == "feature_extractor":
        handle.freeze()
    return handle


def _construct(spec: NetworkSpec) -> nn.Module:
    a, b = spec.arch, spec.base_channels
    norm = dict(mean=tuple(spec.normalize_mean), std=tuple(spec.normalize_std))
    if a == "vgg13_bn":
        return VGG(spec.num_classes, b, spec.in_channels, **norm)
    if a == "resnet18":
        return ResNet18(spec.num_classes, b, spec.in_channels, **norm)
    if a == "toy_classifier":
        return ToyClassifier(spec.num_classes, b, spec.in_channels, **norm)
    if a == "unet_generator":
        m = UNetGenerator(spec.in_channels, spec.in_channels, b, spec.depth, spec.identity_skip)
    elif a == "conv_encoder_decoder":
        m = ConvEncoderDecoder(spec.in_channels, spec.in_channels, b, spec.depth, spec.identity_skip)
    elif a == "patch_discriminator":
        m = PatchDiscriminator(spec.in_channels, b, spec.depth)
    elif a == "att_discriminator":
        m = AttackDiscriminator(spec.in_channels, b, spec.depth)
    else:
        m = VGG16Features()
        if spec.weights_path:
            _load_vgg16_weights(m, spec.weights_path)
        elif not spec.allow_random_init:
            raise CheckpointError(
                "vgg16_features needs pre-trained weights: pass weights_path "
                "(torchvision vgg16 state dict) or set allow_random_init=True explicitly"
            )
        return m
    m.apply(_init_gan)
    if spec.identity_skip:
        last = m.out[-1] if a == "unet_generator" else m.decoder[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    return m


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x


def _check_channels(m: ModelHandle, x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != m.spec.in_channels:
        raise ShapeError(f"{m.spec.arch} expects (N, {m.spec.in_channels}, H, W), got {tuple(x.shape)}")


def forward_classifier(m: ModelHandle, batch) -> torch.Tensor:
    """Logits ``(N, num_classes)`` for a pixel-space batch."""
    if m.kind != "classifier":
        raise TypeError(f"{m.spec.arch} is not a classifier")
    x = _as_batch(batch)
    _check_channels(m, x)
    if tuple(x.shape[2:]) != (m.spec.image_size, m.spec.image_size):
        raise ShapeError(f"classifier expects {m.spec.image_size}x{m.spec.image_size} images, got {tuple(x.shape[2:])}")
    return m(x)


def extract_features(phi: ModelHandle, img) -> torch.Tensor:
    """Activations after the second ReLU: ``(N, 64, H, W)`` for pixel-space input."""
    if phi.kind != "feature_extractor":
        raise TypeError(f"{phi.spec.arch} is not a feature extractor")
    x = _as_batch(img)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"feature extractor expects 3 input channels, got {tuple(x.shape)}")
    return phi(x)


def forward_generator(g: ModelHandle, batch) -> torch.Tensor:
    """Model-space (``[-1, 1]``) images of the same shape as the input."""
    if g.kind != "generator":
        raise TypeError(f"{g.spec.arch} is not a generator")
    x = _as_batch(batch)
    _check_channels(g, x)
    step = 2 ** g.spec.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(f"generator of depth {g.spec.depth} needs H, W divisible by {step}")
    return g(x)


def forward_discriminator(d: ModelHandle, batch) -> torch.Tensor:
    """One real/fake score per image (patch scores are averaged)."""
    if d.kind != "discriminator":
        raise TypeError(f"{d.spec.arch} is not a discriminator")
    x = _as_batch(batch)
    _check_channels(d, x)
    return d(x).flatten(1).mean(1)


# --- checkpoints ---------------------------------------------------------------

def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def config_hash(config: Any) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def save_checkpoint(path, models: dict[str, ModelHandle], config: Any = None,
                    epoch: int = 0, extra: dict | None = None) -> Path:
    """Write a self-describing checkpoint holding every handle in ``models``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = json.loads(canonical_json(config)) if config is not None else None
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "models": {
            name: {"spec": asdict(h.spec), "state": h.module.state_dict()}
            for name, h in models.items()
        },
        "config": cfg,
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "epoch": int(epoch),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_arch: dict[str, str] | None = None) -> tuple[dict[str, ModelHandle], dict]:
    """Load handles and metadata; raise :class:`CheckpointError` on bad files.

    ``expect_arch`` maps handle names to architecture ids that must match.
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    handles = {}
    for name, entry in payload["models"].items():
        spec = NetworkSpec.from_dict(entry["spec"])
        if expect_arch and name in expect_arch and spec.arch != expect_arch[name]:
            raise CheckpointError(f"{path}: model {name!r} is {spec.arch}, expected {expect_arch[name]}")
        # weights come from the file, so a random-init feature extractor is fine here
        spec_for_build = NetworkSpec.from_dict({**asdict(spec), "weights_path": None, "allow_random_init": True})
        h = build(spec_for_build)
        h.spec = spec
        h.module.load_state_dict(entry["state"])
        if h.kind == "feature_extractor":
            h.freeze()
        handles[name] = h
    if expect_arch:
        missing = set(expect_arch) - set(handles)
        if missing:
            raise CheckpointError(f"{path}: missing models {sorted(missing)}")
    meta = {k: payload.get(k) for k in ("config", "config_hash", "epoch", "extra")}
    return handles, meta
