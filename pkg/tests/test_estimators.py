import numpy as np
import pytest
from sklearn.base import clone

from peftlab.backbone import BackboneConfig
from peftlab.estimators import AdaptedDepthRegressor, AdaptedSegmenter
from peftlab.serialization import save_checkpoint
from peftlab.tasks import task_preset
from peftlab.training import TaskData, TrainConfig, pretrain
from peftlab.validation import (
    check_image_array,
    check_segmentation_labels,
    train_val_split,
)

TINY_BACKBONE = dict(patch_size=4, embed_dim=8, num_blocks=1, num_heads=2,
                     mlp_ratio=2)


def tiny_task(name="seg-source", **kw):
    base = dict(image_size=(16, 16), num_classes=3,
                palette=((0.9, 0.2, 0.1), (0.2, 0.9, 0.2)),
                n_train=28, n_val=6, size_range=(4, 8))
    base.update(kw)
    return task_preset(name, **base)


@pytest.fixture(scope="module")
def seg_arrays():
    from peftlab.tasks import materialize
    spec = tiny_task()
    x, y = materialize(spec, "train")
    return x, y


@pytest.fixture(scope="module")
def base_ckpt(tmp_path_factory, seg_arrays):
    x, y = seg_arrays
    data = TaskData.from_arrays(x[:20], y[:20], x[20:], y[20:], "segmentation", 3)
    cfg = BackboneConfig(image_size=(16, 16), num_classes=3, **TINY_BACKBONE)
    model = pretrain(cfg, data, TrainConfig(steps=15, batch_size=4, seed=0)).model
    path = tmp_path_factory.mktemp("ckpt") / "base.ckpt"
    save_checkpoint(path, model.store, model.config)
    return str(path)


def fast_params(**kw):
    params = dict(steps=12, batch_size=4, beta=0.2, step_size=3, seed=0)
    params.update(kw)
    return params


def test_get_set_params_and_clone_roundtrip():
    est = AdaptedSegmenter(beta=0.07, steps=42)
    params = est.get_params()
    assert params["beta"] == 0.07 and params["steps"] == 42
    est.set_params(beta=0.2)
    assert est.beta == 0.2
    cloned = clone(est)
    assert cloned.get_params() == est.get_params()


def test_fit_predict_score_with_checkpoint(base_ckpt, seg_arrays):
    x, y = seg_arrays
    est = AdaptedSegmenter(base_checkpoint=base_ckpt, **fast_params())
    est.fit(x, y)
    assert est.report_.kind == "adaptation"
    assert est.mask_manifest_
    pred = est.predict(x[:3])
    assert pred.shape == (3, 16, 16)
    assert set(np.unique(pred)) <= {0, 1, 2}
    assert 0.0 <= est.score(x[:6], y[:6]) <= 1.0
    np.testing.assert_array_equal(est.classes_, [0, 1, 2])


def test_fit_from_scratch_without_checkpoint(seg_arrays):
    x, y = seg_arrays
    est = AdaptedSegmenter(backbone=TINY_BACKBONE, **fast_params())
    est.fit(x, y)
    assert est.report_.kind == "pretrain"
    assert est.config_.num_classes == 3
    assert est.predict(x[:2]).shape == (2, 16, 16)


def test_baseline_parameter(base_ckpt, seg_arrays):
    x, y = seg_arrays
    est = AdaptedSegmenter(base_checkpoint=base_ckpt, baseline="frozen",
                           **fast_params())
    est.fit(x, y)
    assert est.report_.kind == "frozen"
    assert est.mask_manifest_ is None
    with pytest.raises(ValueError, match="baseline"):
        AdaptedSegmenter(base_checkpoint=base_ckpt, baseline="lora",
                         **fast_params()).fit(x, y)


def test_imported_mask_parameter(base_ckpt, seg_arrays):
    x, y = seg_arrays
    first = AdaptedSegmenter(base_checkpoint=base_ckpt, **fast_params()).fit(x, y)
    second = AdaptedSegmenter(base_checkpoint=base_ckpt,
                              imported_mask=first.mask_manifest_,
                              **fast_params(seed=1)).fit(x, y)
    assert second.report_.kind == "imported_mask"
    assert second.mask_manifest_ == first.mask_manifest_


def test_unfitted_predict_raises(seg_arrays):
    x, _ = seg_arrays
    with pytest.raises(RuntimeError, match="not fitted"):
        AdaptedSegmenter().predict(x[:1])


def test_input_validation_errors(base_ckpt, seg_arrays):
    x, y = seg_arrays
    est = AdaptedSegmenter(base_checkpoint=base_ckpt, **fast_params())
    with pytest.raises(ValueError, match="4-d"):
        est.fit(x[0], y)
    with pytest.raises(ValueError, match="shape"):
        est.fit(x, y[:, :8])
    bad = y.copy()
    bad[0, 0, 0] = 99
    with pytest.raises(ValueError, match="class id"):
        est.fit(x, bad)
    with pytest.raises(ValueError, match="does not match checkpoint"):
        est.fit(np.zeros((4, 8, 8, 3), dtype=np.float32), np.zeros((4, 8, 8), dtype=int))


def test_depth_regressor_roundtrip():
    from peftlab.tasks import materialize
    spec = tiny_task("depth-source")
    x, y = materialize(spec, "train")
    est = AdaptedDepthRegressor(backbone=TINY_BACKBONE, **fast_params())
    est.fit(x, y)
    assert est.predict(x[:2]).shape == (2, 16, 16)
    assert est.score(x[:6], y[:6]) <= 0.0  # negative RMSE


def test_validation_helpers():
    x = np.zeros((4, 8, 8, 3), dtype=np.float32)
    assert check_image_array(x).dtype == np.float32
    with pytest.raises(ValueError, match="zero samples"):
        check_image_array(np.zeros((0, 8, 8, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        check_image_array(np.full((1, 2, 2, 1), np.nan))
    y = np.zeros((4, 8, 8))
    assert check_segmentation_labels(y, x, 3).dtype == np.int64
    with pytest.raises(ValueError, match="integer"):
        check_segmentation_labels(y + 0.5, x, 3)
    train, val = train_val_split(10, 0.2, seed=0)
    assert len(train) == 8 and len(val) == 2
    assert not (set(train.tolist()) & set(val.tolist()))
    t2, v2 = train_val_split(10, 0.2, seed=0)
    np.testing.assert_array_equal(train, t2)
    with pytest.raises(ValueError, match="val_fraction"):
        train_val_split(10, 1.5, seed=0)
