import numpy as np
import pytest

from peftlab import autodiff as ad
from peftlab.autodiff import ShapeError, Tensor
from peftlab.gradcheck import CHECKED_OPS, TOLERANCE, check_op
from peftlab.store import (
    GROUP_ATT,
    GROUP_HEAD,
    GROUP_MLP,
    GROUP_OTHER,
    ParameterStore,
)


def test_relu_definition():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    assert out.data.tolist() == [0.0, 0.0, 2.0]


def test_layer_norm_constant_vector_is_zero_before_affine():
    x = Tensor(np.full((2, 8), 3.7, dtype=np.float32))
    gamma = Tensor(np.ones(8, dtype=np.float32))
    beta = Tensor(np.zeros(8, dtype=np.float32))
    out = ad.layer_norm(x, gamma, beta, eps=1e-5)
    assert np.all(out.data == 0.0)


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_forward_determinism_bitwise():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 8)).astype(np.float32)
    w = rng.standard_normal((8, 8)).astype(np.float32)

    def run():
        return ad.gelu(ad.linear(Tensor(x), Tensor(w))).data

    assert run().tobytes() == run().tobytes()


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match="matmul") as err:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)
    with pytest.raises(ShapeError, match="linear"):
        ad.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((5, 4))))


def test_layer_norm_rejects_bad_eps():
    x = Tensor(np.zeros((2, 4)))
    with pytest.raises(ValueError, match="eps"):
        ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)


def test_backward_linear_map_gradient():
    # loss = sum(W @ x) with x fixed: dL/dW[i, j] = x[j] for every row i.
    x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    w = Tensor(np.zeros((4, 3), dtype=np.float32), requires_grad=True)
    loss = ad.total_sum(ad.matmul(w, Tensor(x.reshape(3, 1))))
    loss.backward()
    np.testing.assert_allclose(w.grad, np.tile(x, (4, 1)))


def test_backward_requires_scalar_and_finite_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.relu(x).backward()
    bad = ad.mul(x, Tensor(np.array(np.inf, dtype=np.float32)))
    with pytest.raises(FloatingPointError):
        ad.total_sum(bad).backward()


def test_unreached_parameter_gets_no_gradient():
    used = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    unused = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    ad.total_sum(ad.mul(used, 2.0)).backward()
    assert used.grad is not None
    assert unused.grad is None  # trainer fills zeros for these


def test_gradient_accumulates_over_repeated_use():
    x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    loss = ad.total_sum(ad.add(ad.mul(x, 3.0), ad.mul(x, 4.0)))
    loss.backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_dtype_preserved_for_shadow_mode():
    x64 = Tensor(np.ones((2, 4), dtype=np.float64))
    w64 = Tensor(np.ones((4, 4), dtype=np.float64))
    assert ad.linear(x64, w64).dtype == np.float64
    x32 = Tensor(np.ones((2, 4), dtype=np.float32))
    w32 = Tensor(np.ones((4, 4), dtype=np.float32))
    assert ad.gelu(ad.linear(x32, w32)).dtype == np.float32


@pytest.mark.parametrize("op", CHECKED_OPS)
def test_gradients_match_finite_differences(op):
    assert check_op(op, draws=20, seed=0) <= TOLERANCE


def _small_store():
    store = ParameterStore()
    rng = np.random.default_rng(7)
    store.add("blk0.att.wq", Tensor(rng.standard_normal((4, 4)).astype(np.float32)), GROUP_ATT)
    store.add("blk0.mlp.w1", Tensor(rng.standard_normal((4, 8)).astype(np.float32)), GROUP_MLP)
    store.add("blk0.norm1.g", Tensor(np.ones(4, dtype=np.float32)), GROUP_OTHER)
    store.add("head.w", Tensor(rng.standard_normal((4, 2)).astype(np.float32)), GROUP_HEAD)
    return store


def test_snapshot_restore_roundtrip_bit_exact():
    store = _small_store()
    snap = store.snapshot()
    for name in store.names():
        store[name].data += 0.25
    store.restore(snap)
    for name, arr in snap.items():
        assert store[name].data.tobytes() == arr.tobytes()


def test_snapshot_empty_store():
    store = ParameterStore()
    snap = store.snapshot()
    assert snap == {}
    store.restore(snap)  # no-op


def test_subset_restore_matches_full_copy_oracle():
    store = _small_store()
    snap = store.snapshot()
    # Oracle: an independent full copy of the expected end state.
    expected = {n: store[n].data.copy() for n in store.names()}
    for name in store.names():
        store[name].data += 1.0
        if store.group_of(name) != GROUP_ATT:
            expected[name] = store[name].data.copy()
    store.restore(snap, GROUP_ATT)
    for name in store.names():
        assert store[name].data.tobytes() == expected[name].tobytes(), name


def test_restore_name_set_mismatch():
    store = _small_store()
    snap = store.snapshot()
    del snap["head.w"]
    with pytest.raises(KeyError, match="mismatch"):
        store.restore(snap)


def test_store_counts_and_groups():
    store = _small_store()
    assert store.count() == 16 + 32 + 4 + 8
    assert store.count(GROUP_ATT) == 16
    assert store.count(GROUP_ATT, GROUP_MLP) == 48
    assert store.names_in(GROUP_HEAD) == ["head.w"]
    with pytest.raises(ValueError, match="duplicate"):
        store.add("head.w", Tensor(np.zeros(1)), GROUP_HEAD)
    with pytest.raises(ValueError, match="group"):
        store.add("x", Tensor(np.zeros(1)), "nope")
