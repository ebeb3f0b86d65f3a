"""Preliminary visual protection on a toy dataset.

We train a small classifier on procedurally drawn shapes, then push every
training image through projected sign-gradient descent on that classifier's
loss. The perturbation is large (epsilon = 0.3) and clearly visible, yet the
classifier's loss goes *down*: the protected images look scrambled to a
person while remaining easy for the network.

    python3 demos/01_protect.py --out demo_out
"""
import argparse

import numpy as np

from ganprotect.classify import ClassifyConfig, evaluate_accuracy, train_classifier
from ganprotect.metrics import ssim_batch
from ganprotect.protect import PerturbationSpec, mean_cross_entropy, protect_dataset
from ganprotect.synthetic import make_shapes

from _grid import save_grid

p = argparse.ArgumentParser()
p.add_argument("--out", default="demo_out")
p.add_argument("--epochs", type=int, default=30)
args = p.parse_args()

train = make_shapes(500, 32, 2, seed=10, name="train")
test = make_shapes(200, 32, 2, seed=11, name="test")

# 1. the classifier whose loss the perturbation minimizes
cfg = ClassifyConfig(arch="vgg13_bn", base_channels=16, epochs=args.epochs, lr=0.01,
                     lr_drop_epochs=(int(args.epochs * 2 / 3),), batch_size=64)
h, _ = train_classifier(train, None, cfg)
print(f"classifier test accuracy: {evaluate_accuracy(h, test):.3f}")

# 2. protect: x_p <- clip(x_p - alpha * sign(grad CE), x +- eps, [0, 1])
spec = PerturbationSpec(epsilon=0.3, alpha=0.03, iterations=50)
P = protect_dataset(train, h, spec, batch=100)
print(f"mean cross-entropy  plain {mean_cross_entropy(h, train.images, train.labels):.5f}"
      f"  protected {mean_cross_entropy(h, P.images, P.labels):.5f}")
print(f"max |x_p - x|       {np.abs(P.images - train.images).max():.3f} (epsilon {spec.epsilon})")
print(f"mean SSIM(x_p, x)   {ssim_batch(train.images, P.images).mean():.3f}")

path = save_grid(f"{args.out}/protect.ppm", [train.images[:8], P.images[:8]])
print(f"top row plain, bottom row protected: {path}")
