"""Ciphertext-only and paired reconstruction attacks on the toy schemes.

The GAN attack sees encrypted images of one half of the data and plain
images of the other half, never a matching pair. Its generator learns to
map ciphertexts to plausible plain images. Against the identity "scheme"
this should succeed (high SSIM). Against 4x4 block shuffling it should
do much worse. The paired attack is the stronger known-plaintext attacker.

Pass ``--scheme path/to/latest.pt`` to attack a trained transformation network.

    python3 demos/03_attacks.py
"""
import argparse

from ganprotect.attacks import (
    GaConfig, PairedConfig, evaluate_attack, scheme_by_name, train_ga, train_paired_attack,
)
from ganprotect.synthetic import make_shapes

p = argparse.ArgumentParser()
p.add_argument("--scheme", action="append", help="identity, block_shuffle, negpos or a checkpoint")
p.add_argument("--epochs", type=int, default=30)
args = p.parse_args()

T = make_shapes(500, 32, 2, seed=20, name="ga-train")
held = make_shapes(100, 32, 2, seed=21, name="ga-test")
ga = GaConfig(epochs=args.epochs, batch_size=64, generator_base=16, generator_depth=3, discriminator_base=16)
paired = PairedConfig(epochs=args.epochs, lr_drop_epochs=(args.epochs // 2, 3 * args.epochs // 4),
                      batch_size=64, generator_base=16, generator_depth=3)

for name in args.scheme or ["identity", "block_shuffle", "negpos"]:
    scheme = scheme_by_name(name)
    G = train_ga(scheme, T, ga).G_att
    print(f"{scheme.name:14s} GA      held-out SSIM {evaluate_attack(G, scheme, held).mean_ssim:.3f}")
    G = train_paired_attack(scheme, pairs=(T.images, scheme(T.images)), cfg=paired).G_att
    print(f"{scheme.name:14s} paired  held-out SSIM {evaluate_attack(G, scheme, held, 'paired').mean_ssim:.3f}")
