import json

import numpy as np
import pytest

from ganprotect import attacks
from ganprotect.attacks import (
    AttackReport, BlockShuffleScheme, GaConfig, GeneratorScheme, IdentityScheme, NegPosFlipScheme,
    PairedConfig, evaluate_attack, paired_config_from_dict, reconstruct, scheme_by_name, train_ga,
    train_paired_attack,
)
from ganprotect.models import NetworkSpec, build, save_checkpoint
from ganprotect.synthetic import make_shapes


@pytest.fixture(scope="module")
def images():
    return make_shapes(8, 16, 2, seed=9, name="atk").images


SCHEMES = [IdentityScheme(), BlockShuffleScheme(seed=1), NegPosFlipScheme(seed=2)]


@pytest.mark.parametrize("scheme", SCHEMES, ids=lambda s: s.name)
def test_scheme_shape_range_determinism(scheme, images):
    enc = scheme(images)
    assert enc.shape == images.shape and enc.dtype == np.float32
    assert enc.min() >= 0 and enc.max() <= 1
    np.testing.assert_array_equal(enc, scheme(images))
    np.testing.assert_array_equal(scheme(images[0]), enc[0])


def test_block_shuffle_permutes_tiles_and_inverts(images):
    s = BlockShuffleScheme(seed=3, block=4)
    enc = s(images)
    assert not np.array_equal(enc, images)
    for img, e in zip(images, enc):
        np.testing.assert_array_equal(s.decrypt_one(e), img)
        tiles = sorted(img[:, i:i + 4, j:j + 4].tobytes() for i in range(0, 16, 4) for j in range(0, 16, 4))
        etiles = sorted(e[:, i:i + 4, j:j + 4].tobytes() for i in range(0, 16, 4) for j in range(0, 16, 4))
        assert tiles == etiles
    with pytest.raises(ValueError):
        s(np.zeros((3, 10, 10), np.float32))


def test_block_shuffle_key_is_common(images):
    s = BlockShuffleScheme(seed=3)
    assert np.array_equal(s.key(4, 4), s.key(4, 4))
    assert sorted(s.key(4, 4)) == list(range(16))
    assert not np.array_equal(s.key(4, 4), BlockShuffleScheme(seed=4).key(4, 4))


def test_negpos_key_depends_on_image(images):
    s = NegPosFlipScheme(seed=0)
    assert not np.array_equal(s.mask(images[0]), s.mask(images[1]))
    enc = s(images[0])
    m = s.mask(images[0])
    np.testing.assert_allclose(enc[m], 1 - images[0][m])
    np.testing.assert_array_equal(enc[~m], images[0][~m])


def test_scheme_by_name(tmp_path):
    assert isinstance(scheme_by_name("identity"), IdentityScheme)
    assert scheme_by_name("block_shuffle", 5).seed == 5
    assert isinstance(scheme_by_name("negpos"), NegPosFlipScheme)
    g = build(NetworkSpec("unet_generator", base_channels=4, depth=2, image_size=16))
    save_checkpoint(tmp_path / "t.pt", {"G_AB": g})
    assert isinstance(scheme_by_name(str(tmp_path / "t.pt")), GeneratorScheme)
    with pytest.raises(ValueError):
        scheme_by_name("rot13")


def small_ga(**kw):
    base = dict(epochs=1, batch_size=4, generator_base=4, generator_depth=2,
                discriminator_base=4, discriminator_depth=2)
    return GaConfig(**{**base, **kw})


def test_ga_sees_only_ciphertext_of_first_half(monkeypatch, images):
    from ganprotect.imagedata import LabeledDataset
    T = LabeledDataset(images, np.zeros(len(images), np.int64), 2, "T")
    seen = {}

    def spy(encrypted, plain, cfg):
        seen["enc"], seen["plain"] = encrypted, plain
        return "ok"

    monkeypatch.setattr(attacks, "train_ga_ciphertext_only", spy)
    scheme = BlockShuffleScheme(seed=1)
    assert train_ga(scheme, T, small_ga()) == "ok"
    assert len(seen["enc"]) == len(seen["plain"]) == 4
    plain_keys = {p.tobytes() for p in seen["plain"]}
    decrypted = {scheme.decrypt_one(e).tobytes() for e in seen["enc"]}
    assert not plain_keys & decrypted
    assert plain_keys | decrypted == {im.tobytes() for im in images}


def test_ga_degenerate_split_runs():
    T = make_shapes(2, 16, 2, seed=1)
    res = train_ga(IdentityScheme(), T, small_ga(epochs=2))
    assert len(res.history) == 2
    assert reconstruct(res.G_att, T.images).shape == T.images.shape
    with pytest.raises(ValueError):
        train_ga(IdentityScheme(), T.subset([0]), small_ga())


def test_ga_deterministic(images):
    from ganprotect.imagedata import LabeledDataset
    T = LabeledDataset(images, np.zeros(len(images), np.int64), 2, "T")
    a = train_ga(NegPosFlipScheme(), T, small_ga(epochs=2))
    b = train_ga(NegPosFlipScheme(), T, small_ga(epochs=2))
    assert a.history == b.history
    assert a.G_att.checksum() == b.G_att.checksum()


def test_ga_optional_r1_penalty_runs(images):
    res = attacks.train_ga_ciphertext_only(images[:4], images[4:], small_ga(r1_gamma=1.0))
    assert np.isfinite(res.history[0]["d_loss"])


def test_paired_schedule():
    c = PairedConfig()
    rates = [c.lr_at(e) for e in range(70)]
    drops = [e for e in range(1, 70) if rates[e] != rates[e - 1]]
    assert drops == [40, 60]
    assert rates[0] == 0.1
    assert rates[40] == pytest.approx(0.01) and rates[60] == pytest.approx(0.001)
    assert paired_config_from_dict({"lr_drop_epochs": [5, 9]}).lr_drop_epochs == (5, 9)


def test_paired_refuses_keyless_without_pairs(images):
    g = build(NetworkSpec("unet_generator", base_channels=4, depth=2, image_size=16))
    with pytest.raises(ValueError, match="no key"):
        train_paired_attack(GeneratorScheme(g), plain=images)
    with pytest.raises(ValueError, match="empty"):
        train_paired_attack(IdentityScheme(), pairs=(images[:0], images[:0]))
    with pytest.raises(ValueError):
        train_paired_attack(BlockShuffleScheme())


def test_paired_attack_reduces_error(images):
    cfg = PairedConfig(epochs=6, lr=0.05, lr_drop_epochs=(4,), batch_size=4, generator_base=8, generator_depth=2)
    res = train_paired_attack(NegPosFlipScheme(), plain=images, cfg=cfg)
    assert res.history[-1]["mse"] < res.history[0]["mse"]
    assert [h["lr"] for h in res.history] == [0.05] * 4 + [0.005] * 2


def test_evaluate_identity_callable_is_perfect(images, tmp_path):
    from ganprotect.imagedata import LabeledDataset
    test = LabeledDataset(images, np.zeros(len(images), np.int64), 2, "held")
    rep = evaluate_attack(lambda z: z, IdentityScheme(), test, attack="none")
    assert rep.mean_ssim == pytest.approx(1.0)
    assert len(rep.per_image) == len(images)
    jp, cp = rep.write(tmp_path)
    assert json.loads(jp.read_text())["n"] == len(images)
    assert cp.read_text().splitlines()[0] == "index,ssim"


def test_report_json_fields():
    r = AttackReport("block_shuffle", "ga", 0.1, [0.1, 0.1], "toy")
    assert r.to_json() == {"scheme": "block_shuffle", "attack": "ga", "dataset": "toy", "mean_ssim": 0.1, "n": 2}
