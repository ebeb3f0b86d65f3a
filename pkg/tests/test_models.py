import numpy as np
import pytest
import torch

from ganprotect.models import (
    CheckpointError, NetworkSpec, ShapeError, build, config_hash, extract_features,
    forward_classifier, forward_discriminator, forward_generator, load_checkpoint,
    save_checkpoint, to_model_space, to_pixel_space,
)


def small(arch, **kw):
    defaults = dict(base_channels=8, depth=3)
    if arch == "vgg16_features":
        defaults = dict(allow_random_init=True)
    return build(NetworkSpec(arch, **{**defaults, **kw}))


@pytest.mark.parametrize("arch", ["vgg13_bn", "resnet18", "toy_classifier"])
def test_classifier_logit_shape(arch):
    m = small(arch).eval()
    out = forward_classifier(m, torch.rand(5, 3, 32, 32))
    assert out.shape == (5, 10)
    assert m.output_shape == (10,)
    np.testing.assert_allclose(out.softmax(1).sum(1).detach().numpy(), 1.0, atol=1e-6)


def test_classifier_eval_is_deterministic():
    m = small("vgg13_bn").eval()
    x = torch.rand(4, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(m(x), m(x))


def test_classifier_rejects_wrong_size():
    with pytest.raises(ShapeError):
        forward_classifier(small("vgg13_bn"), torch.rand(1, 3, 16, 16))
    with pytest.raises(ShapeError):
        forward_classifier(small("vgg13_bn"), torch.rand(1, 1, 32, 32))


@pytest.mark.parametrize("arch", ["vgg13_bn", "resnet18", "unet_generator", "patch_discriminator",
                                  "att_discriminator", "conv_encoder_decoder"])
def test_build_is_deterministic(arch):
    assert small(arch, seed=3).checksum() == small(arch, seed=3).checksum()
    assert small(arch, seed=3).checksum() != small(arch, seed=4).checksum()


def test_build_does_not_touch_global_rng():
    torch.manual_seed(11)
    a = torch.rand(1)
    torch.manual_seed(11)
    small("resnet18")
    assert torch.equal(torch.rand(1), a)


def test_unknown_arch():
    with pytest.raises(ValueError):
        build(NetworkSpec("alexnet"))


@pytest.mark.parametrize("arch", ["unet_generator", "conv_encoder_decoder"])
@pytest.mark.parametrize("size", [32, 96])
def test_generator_preserves_shape_and_range(arch, size):
    g = small(arch).eval()
    x = torch.rand(2, 3, size, size) * 6 - 3
    with torch.no_grad():
        out = forward_generator(g, x)
    assert out.shape == x.shape
    assert out.min() >= -1 and out.max() <= 1


def test_generator_rejects_indivisible_size():
    with pytest.raises(ShapeError):
        forward_generator(small("unet_generator"), torch.rand(1, 3, 20, 20))


def test_identity_skip_starts_near_identity():
    g = small("unet_generator", identity_skip=True).eval()
    x = torch.rand(2, 3, 32, 32) * 1.8 - 0.9
    with torch.no_grad():
        torch.testing.assert_close(g(x), 0.999 * x, atol=1e-5, rtol=0)


@pytest.mark.parametrize("arch", ["patch_discriminator", "att_discriminator"])
def test_discriminator_scores_one_per_image(arch):
    d = small(arch)
    assert forward_discriminator(d, torch.rand(6, 3, 32, 32)).shape == (6,)


def test_feature_extractor_contract():
    phi = small("vgg16_features")
    x = torch.rand(2, 3, 32, 32)
    f = extract_features(phi, x)
    assert f.shape == (2, 64, 32, 32)
    assert (f >= 0).all()
    assert torch.equal(f, extract_features(phi, x))
    assert all(not p.requires_grad for p in phi.parameters())
    with pytest.raises(ShapeError):
        extract_features(phi, torch.rand(1, 1, 32, 32))


def test_feature_extractor_refuses_silent_random_init():
    with pytest.raises(CheckpointError):
        build(NetworkSpec("vgg16_features"))


def test_feature_extractor_loads_torchvision_layout(tmp_path):
    g = torch.Generator().manual_seed(0)
    state = {"features.0.weight": torch.randn(64, 3, 3, 3, generator=g), "features.0.bias": torch.randn(64, generator=g),
             "features.2.weight": torch.randn(64, 64, 3, 3, generator=g), "features.2.bias": torch.randn(64, generator=g),
             "classifier.0.weight": torch.zeros(1)}
    torch.save(state, tmp_path / "vgg16.pth")
    phi = build(NetworkSpec("vgg16_features", weights_path=str(tmp_path / "vgg16.pth")))
    assert torch.equal(phi.module.features[0].weight, state["features.0.weight"])
    assert torch.equal(phi.module.features[2].bias, state["features.2.bias"])

    torch.save({"nothing": torch.zeros(1)}, tmp_path / "bad.pth")
    with pytest.raises(CheckpointError):
        build(NetworkSpec("vgg16_features", weights_path=str(tmp_path / "bad.pth")))


def test_space_conversion_round_trip():
    x = torch.rand(10)
    torch.testing.assert_close(to_pixel_space(to_model_space(x)), x)
    assert to_model_space(torch.tensor([0.0, 1.0])).tolist() == [-1.0, 1.0]


def test_checkpoint_round_trip(tmp_path):
    models = {"h": small("vgg13_bn", seed=1), "G": small("unet_generator", seed=2),
              "phi": small("vgg16_features")}
    with torch.no_grad():  # make batch-norm buffers non-trivial
        models["h"].train()(torch.rand(8, 3, 32, 32))
    cfg = {"lr": 0.1, "name": "x"}
    path = save_checkpoint(tmp_path / "c.pt", models, cfg, epoch=7)
    loaded, meta = load_checkpoint(path)
    assert meta["epoch"] == 7 and meta["config_hash"] == config_hash(cfg)
    probe = torch.rand(3, 3, 32, 32)
    for name, h in models.items():
        assert loaded[name].checksum() == h.checksum()
        with torch.no_grad():
            assert torch.equal(loaded[name].eval()(probe), h.eval()(probe))
    assert loaded["phi"].spec.allow_random_init


def test_checkpoint_arch_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "c.pt", {"h": small("toy_classifier")})
    with pytest.raises(CheckpointError, match="expected resnet18"):
        load_checkpoint(path, expect_arch={"h": "resnet18"})


def test_checkpoint_corrupt_and_wrong_version(tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    torch.save({"format": "ganprotect-checkpoint", "version": 99, "models": {}}, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "v.pt")


def test_config_hash_is_key_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
