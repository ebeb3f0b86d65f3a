"""The full toy chain: protection, transformation network, downstream classifier.

Protected images are expensive (50 gradient steps each) and tied to one
classifier. So we train a CycleGAN between plain and protected images. Its
plain-to-protected generator G_AB is the transformation network h_p, which
turns any new image into a visually-protected one in a single forward pass.
A fresh classifier trained on h_p(train) is then evaluated on h_p(test).

Tracks SSIM(h_p(x), x) and the accuracy of the original classifier on h_p
images while training; expect roughly 5 to 7 seconds per epoch on one CPU core.

    python3 demos/02_transform_chain.py --epochs 60 --out demo_out
"""
import argparse

from ganprotect.classify import ClassifyConfig, evaluate_accuracy, train_classifier
from ganprotect.metrics import ssim_batch
from ganprotect.models import NetworkSpec, build
from ganprotect.protect import PerturbationSpec, protect_dataset
from ganprotect.synthetic import make_shapes
from ganprotect.transform_trainer import CycleGanConfig, CycleGanTrainer, Transform

from _grid import save_grid

p = argparse.ArgumentParser()
p.add_argument("--out", default="demo_out")
p.add_argument("--epochs", type=int, default=60)
args = p.parse_args()

train = make_shapes(500, 32, 2, seed=10, name="train")
test = make_shapes(200, 32, 2, seed=11, name="test")
recipe = dict(arch="vgg13_bn", base_channels=16, epochs=30, lr=0.01, lr_drop_epochs=(20,), batch_size=64)

h_theta, _ = train_classifier(train, None, ClassifyConfig(**recipe))
P = protect_dataset(train, h_theta, PerturbationSpec(0.3, 0.03, 50), batch=100)

# phi should be ImageNet VGG16 conv1_2; pass weights_path=... when you have them
phi = build(NetworkSpec("vgg16_features", allow_random_init=True))
cfg = CycleGanConfig(epochs=args.epochs, batch_size=64, generator_base=16, generator_depth=3,
                     discriminator_base=16, discriminator_depth=2, checkpoint_every=20)
trainer = CycleGanTrainer(train, P, h_theta, phi, cfg, out_dir=f"{args.out}/cyclegan")
for epoch in range(args.epochs):
    trainer.train(epoch + 1)
    if (epoch + 1) % 10 == 0:
        hp = Transform(trainer.G_AB)
        t = hp(test.images)
        r = trainer.reports[-1]
        print(f"epoch {epoch + 1:4d}  SSIM(h_p(x), x) {ssim_batch(test.images, t).mean():.3f}"
              f"  h_theta acc on h_p(test) {evaluate_accuracy(h_theta, test.with_images(t)):.3f}"
              f"  l_p {r.l_p:.3f} l_c {r.l_c:.3f} l_r {r.l_r:.3f}")

hp = Transform(trainer.G_AB)
model, _ = train_classifier(train, hp, ClassifyConfig(**recipe))
print(f"classifier trained on h_p(train): accuracy on h_p(test) {evaluate_accuracy(model, test, hp):.3f}")
path = save_grid(f"{args.out}/chain.ppm", [test.images[:8], hp(test.images[:8])])
print(f"top row plain, bottom row h_p(x): {path}")
