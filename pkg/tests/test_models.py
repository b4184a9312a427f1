import numpy as np
import pytest

from fedvirt import checkpoint
from fedvirt import tensor as T
from fedvirt.errors import ContractViolation
from fedvirt.losses import cross_entropy
from fedvirt.models import (apply_head, convnet_init, extract_features, group_count, init_model, mlp_init,
                            predict_labels, predict_logits)


def _same(a, b):
    return a.arch_tag == b.arch_tag and a.names() == b.names() and all(
        a.arrays()[k].tobytes() == b.arrays()[k].tobytes() for k in a.names())


def test_convnet_feature_dim_matches_reference_fc_input():
    assert convnet_init(3, 10, 128, 24, seed=0).feature_dim == 1152


def test_convnet_tiny_feature_dim():
    p = convnet_init(1, 2, 8, 8, seed=0)
    assert p.feature_dim == 8
    f = extract_features(p, T.Tensor(np.zeros((3, 1, 8, 8))))
    assert f.shape == (3, 8)


def test_mlp_feature_dim():
    assert mlp_init(4, 3, 16, seed=0).feature_dim == 16


@pytest.mark.parametrize("make", [lambda s: convnet_init(3, 4, 8, 16, seed=s), lambda s: mlp_init(12, 3, 16, seed=s)])
def test_init_deterministic(make):
    assert _same(make(7), make(7))
    assert not _same(make(7), make(8))


def test_indivisible_side_rejected():
    with pytest.raises(ContractViolation, match="divisible"):
        convnet_init(3, 4, 8, 12, seed=0)


def test_batch_shape_mismatch_rejected():
    p = convnet_init(3, 4, 8, 8, seed=0)
    with pytest.raises(ContractViolation):
        extract_features(p, T.Tensor(np.zeros((2, 1, 8, 8))))


def test_group_count():
    assert [group_count(w) for w in (1, 4, 7, 8, 12, 32, 128)] == [1, 1, 1, 8, 4, 8, 8]


def test_zero_input_gives_finite_features():
    p = convnet_init(3, 4, 8, 16, seed=0)
    f = extract_features(p, T.Tensor(np.zeros((2, 3, 16, 16)))).data
    assert np.isfinite(f).all()


ARCHS = [("convnet", (3, 16, 16)), ("mlp", (3, 4, 4))]


@pytest.mark.parametrize("arch,shape", ARCHS)
def test_per_sample_purity(arch, shape, rng):
    p = init_model(arch, shape, 4, 8, seed=1)
    x = rng.standard_normal((4,) + shape)
    x[2] = x[0]
    base = extract_features(p, T.Tensor(x)).data
    np.testing.assert_array_equal(base[0], base[2])
    y = x.copy()
    y[1] += rng.standard_normal(shape)
    moved = extract_features(p, T.Tensor(y)).data
    changed = [not np.array_equal(base[i], moved[i]) for i in range(4)]
    assert changed == [False, True, False, False]


@pytest.mark.parametrize("arch,shape", ARCHS)
def test_logits_are_head_of_features(arch, shape, rng):
    p = init_model(arch, shape, 4, 8, seed=2)
    x = T.Tensor(rng.standard_normal((3,) + shape))
    a = predict_logits(p, x).data
    b = apply_head(p, extract_features(p, x)).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() == predict_logits(p, x).data.tobytes()


@pytest.mark.parametrize("arch,shape", ARCHS)
def test_empty_batch(arch, shape):
    p = init_model(arch, shape, 5, 8, seed=0)
    assert predict_logits(p, T.Tensor(np.zeros((0,) + shape))).shape == (0, 5)


@pytest.mark.parametrize("arch,shape", ARCHS)
def test_gradient_reaches_every_parameter(arch, shape, rng):
    p = init_model(arch, shape, 4, 8, seed=3)
    leaves = p.tensors(requires_grad=True)
    loss = cross_entropy(predict_logits(p, T.Tensor(rng.standard_normal((8,) + shape)), leaves),
                         np.arange(8) % 4).value
    grads = T.backward(loss, list(leaves.values()))
    assert all(np.any(g.data != 0) for g in grads)
    assert set(leaves) == set(p.extractor) | set(p.head)
    assert not set(p.extractor) & set(p.head)


def test_mlp_disconnected_input_gradient_zero(rng):
    p = mlp_init(6, 3, 8, seed=0)
    x, other = T.leaf(rng.standard_normal((2, 6))), T.leaf(rng.standard_normal((2, 6)))
    _, g = T.backward(T.sum_all(predict_logits(p, x)), [x, other])
    assert not g.data.any()


def test_predict_labels_chunking(rng):
    p = convnet_init(3, 4, 8, 8, seed=0)
    x = rng.standard_normal((10, 3, 8, 8))
    full = predict_labels(p, x, batch_size=256)
    assert full.tolist() == predict_labels(p, x, batch_size=3).tolist()
    assert full.tolist() == predict_logits(p, T.Tensor(x)).data.argmax(1).tolist()


def test_replace_validates_shapes():
    p = mlp_init(4, 2, 3, seed=0)
    arrays = p.arrays()
    arrays["fc1.weight"] = np.zeros((3, 3))
    with pytest.raises(ContractViolation):
        p.replace(arrays)


def test_model_checkpoint_round_trip(tmp_path):
    p = convnet_init(3, 4, 8, 16, seed=5)
    path = tmp_path / "m.fvck"
    checkpoint.save_model(path, p)
    q = checkpoint.load_model(path)
    assert _same(p, q) and q.feature_dim == p.feature_dim and q.spec == p.spec
    assert list(q.extractor) == list(p.extractor)
