import numpy as np
import pytest

from peftlab import autodiff as ad
from peftlab.backbone import BackboneConfig, build_backbone
from peftlab.store import GROUP_ATT, GROUP_HEAD, GROUP_MLP, GROUP_OTHER


def tiny_config(**kw):
    base = dict(image_size=(32, 32), in_channels=3, patch_size=4, embed_dim=8,
                num_blocks=1, num_heads=2, mlp_ratio=4, head_kind="segmentation",
                num_classes=3)
    base.update(kw)
    return BackboneConfig(**base)


def test_token_count():
    assert tiny_config().num_tokens == 64


def test_invalid_configs_rejected():
    with pytest.raises(ValueError, match="divisible"):
        tiny_config(image_size=(30, 32))
    with pytest.raises(ValueError, match="heads"):
        tiny_config(embed_dim=9)
    with pytest.raises(ValueError, match="head_kind"):
        tiny_config(head_kind="boxes")
    with pytest.raises(ValueError, match="num_classes"):
        tiny_config(num_classes=1)


def test_att_param_count_per_block():
    model = build_backbone(tiny_config(num_blocks=3), seed=0)
    d = 8
    assert model.store.count(GROUP_ATT) == 3 * 4 * (d * d + d)


def test_same_seed_bit_identical():
    a = build_backbone(tiny_config(), seed=5)
    b = build_backbone(tiny_config(), seed=5)
    for name in a.store.names():
        assert a.store[name].data.tobytes() == b.store[name].data.tobytes()
    c = build_backbone(tiny_config(), seed=6)
    assert any(a.store[n].data.tobytes() != c.store[n].data.tobytes()
               for n in a.store.names())


def test_output_shape():
    model = build_backbone(tiny_config(num_classes=5), seed=0)
    images = np.random.default_rng(0).random((2, 32, 32, 3), dtype=np.float32)
    assert model.forward(images).shape == (2, 32, 32, 5)


def test_zero_projections_reduce_to_embedding_head():
    model = build_backbone(tiny_config(num_blocks=3), seed=1)
    s = model.store
    for i in range(3):
        for n in (f"block{i}.att.wo", f"block{i}.att.bo",
                  f"block{i}.mlp.w2", f"block{i}.mlp.b2"):
            s[n].data[:] = 0.0
    images = np.random.default_rng(1).random((2, 32, 32, 3), dtype=np.float32)
    got = model.forward(images).data

    # Oracle: the block-free pipeline on the same weights.
    x = ad.add(ad.linear(ad.Tensor(model.patchify(images)),
                         s["patch_embed.w"], s["patch_embed.b"]), s["pos_embed"])
    x = ad.layer_norm(x, s["final_norm.gamma"], s["final_norm.beta"])
    x = ad.linear(x, s["head.w"], s["head.b"])
    hp, wp = model.config.grid
    expected = ad.upsample_nearest(ad.reshape(x, (2, hp, wp, 3)), 4).data
    assert got.tobytes() == expected.tobytes()


def test_forward_finite_on_random_inputs():
    model = build_backbone(tiny_config(num_blocks=2), seed=2)
    images = np.random.default_rng(2).uniform(-1, 1, (2, 32, 32, 3)).astype(np.float32)
    assert np.isfinite(model.forward(images).data).all()


def test_group_partition_covers_backbone():
    model = build_backbone(tiny_config(num_blocks=2), seed=0)
    s = model.store
    backbone_total = s.count(GROUP_ATT) + s.count(GROUP_MLP) + s.count(GROUP_OTHER)
    assert backbone_total + s.count(GROUP_HEAD) == s.count()
    for name in s.names():
        assert s.group_of(name) in (GROUP_ATT, GROUP_MLP, GROUP_OTHER, GROUP_HEAD)


def test_upsampling_conservation():
    model = build_backbone(tiny_config(), seed=3)
    images = np.random.default_rng(3).random((1, 32, 32, 3), dtype=np.float32)
    out = model.forward(images).data
    p = model.config.patch_size
    for i in range(0, 32, p):
        for j in range(0, 32, p):
            tile = out[0, i:i + p, j:j + p, :]
            assert (tile == tile[0, 0]).all()


def test_forward_shape_mismatch():
    model = build_backbone(tiny_config(), seed=0)
    with pytest.raises(ad.ShapeError, match="patchify"):
        model.forward(np.zeros((1, 16, 16, 3), dtype=np.float32))


def test_predict_segmentation_labels():
    model = build_backbone(tiny_config(num_classes=4), seed=0)
    images = np.random.default_rng(4).random((3, 32, 32, 3), dtype=np.float32)
    pred = model.predict(images)
    assert pred.shape == (3, 32, 32)
    assert pred.min() >= 0 and pred.max() < 4


def test_predict_regression_map():
    model = build_backbone(tiny_config(head_kind="regression", num_classes=5), seed=0)
    images = np.random.default_rng(5).random((2, 32, 32, 3), dtype=np.float32)
    pred = model.predict(images)
    assert pred.shape == (2, 32, 32)
    assert pred.dtype == np.float32
