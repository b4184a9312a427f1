import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedvirt import tensor as T
from fedvirt.errors import ContractViolation, NumericOverflowError
from fedvirt.gradcheck import grad_check
from fedvirt.losses import cross_entropy
from fedvirt.models import convnet_init, predict_logits

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


# forward values -------------------------------------------------------------

def test_relu_example():
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_conv2d_ones_center_and_corners():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))), stride=1, pad=1).data
    assert out.shape == (1, 1, 3, 3)
    assert out[0, 0, 1, 1] == 9.0
    for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out[0, 0, i, j] == 4.0
    assert out[0, 0, 0, 1] == 6.0


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (5 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for b in range(2):
        for f in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[b, f, i, j] = np.sum(xp[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[f])
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_group_norm_constant_input_is_zero(groups):
    out = T.group_norm(T.Tensor(np.full((2, 4, 3, 3), 7.5)), groups).data
    assert np.all(out == 0.0)


def test_group_norm_matches_definition(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    out = T.group_norm(T.Tensor(x), 2).data
    g = x.reshape(2, 2, -1)
    ref = (g - g.mean(-1, keepdims=True)) / np.sqrt(g.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ref.reshape(x.shape), atol=1e-12)


def test_l2_normalize_rows_unit_norm(rng):
    out = T.l2_normalize(T.Tensor(rng.standard_normal((5, 3)))).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_log_softmax_rows_normalised(rng):
    out = T.log_softmax(T.Tensor(rng.standard_normal((4, 6)) * 30)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)


def test_avg_pool_and_concat_and_gather():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert T.avg_pool2d(T.Tensor(x), 2).data.reshape(-1).tolist() == [2.5, 4.5, 10.5, 12.5]
    c = T.concat([T.Tensor(np.ones((1, 2))), T.Tensor(np.zeros((2, 2)))]).data
    assert c.shape == (3, 2) and c[0].tolist() == [1, 1]
    assert T.gather(T.Tensor([5.0, 6.0, 7.0]), np.array([2, 0, 2])).data.tolist() == [7, 5, 7]


# errors ----------------------------------------------------------------------

def test_shape_mismatch_names_primitive():
    with pytest.raises(ContractViolation, match="add"):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))


def test_no_broadcasting_beyond_scalar():
    with pytest.raises(ContractViolation):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((1, 3))))
    # scalar tensors do broadcast
    assert T.mul(T.Tensor(np.ones((2, 3))), T.Tensor(2.0)).data.sum() == 12.0


def test_overflow_is_an_error():
    with pytest.raises(NumericOverflowError):
        T.exp(T.Tensor([1000.0]))


def test_backward_rejects_non_scalar():
    x = T.leaf(np.ones(3))
    with pytest.raises(ContractViolation):
        T.backward(T.mul(x, x), [x])


# backward --------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = T.leaf([1.0, 2.0, 3.0])
    (g,) = T.backward(T.sum_all(T.mul(x, x)), [x])
    assert g.data.tolist() == [2.0, 4.0, 6.0]


@pytest.mark.parametrize("k,target", [(3, 0), (5, 4)])
def test_cross_entropy_uniform_logits_gradient(k, target):
    z = T.leaf(np.zeros((1, k)))
    (g,) = T.backward(cross_entropy(z, [target]).value, [z])
    expect = np.full(k, 1.0 / k)
    expect[target] -= 1.0
    np.testing.assert_allclose(g.data[0], expect, atol=1e-15)


def test_disconnected_leaf_gets_zeros():
    x, y = T.leaf(np.ones(3)), T.leaf(np.ones((2, 2)))
    gx, gy = T.backward(T.sum_all(T.mul(x, x)), [x, y])
    assert gy.shape == (2, 2) and not gy.data.any()


def test_gradient_wrt_intermediate():
    x = T.leaf([1.0, -2.0])
    h = T.scale(x, 3.0)
    gx, gh = T.backward(T.sum_all(T.mul(h, h)), [x, h])
    np.testing.assert_allclose(gh.data, 2 * h.data)
    np.testing.assert_allclose(gx.data, 18 * x.data)


def test_second_order():
    x = T.leaf([0.5, -1.5])
    (g,) = T.backward(T.sum_all(T.mul(T.mul(x, x), x)), [x], create_graph=True)  # 3x^2
    (h,) = T.backward(T.sum_all(g), [x])  # 6x
    np.testing.assert_allclose(h.data, 6 * x.data)


def test_record_is_topological():
    x = T.leaf(np.ones(2))
    y = T.exp(T.add(T.mul(x, x), x))
    nodes = T.record_of(T.sum_all(y))
    ids = [t.node.id for t in nodes]
    assert ids == sorted(ids)
    pos = {id(t): i for i, t in enumerate(nodes)}
    for t in nodes:
        for inp in t.node.inputs:
            if id(inp) in pos:
                assert pos[id(inp)] < pos[id(t)]


def test_no_grad_records_nothing():
    x = T.leaf(np.ones(2))
    with T.no_grad():
        y = T.mul(x, x)
    assert y.node is None


@given(arrays(np.float64, 4, elements=finite), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(x0, a, b):
    x = T.leaf(x0)
    l1 = T.sum_all(T.mul(T.exp(T.scale(x, 0.3)), x))
    l2 = T.sum_all(T.relu(x))
    g1, = T.backward(l1, [x])
    g2, = T.backward(l2, [x])
    gc, = T.backward(T.add(T.scale(l1, a), T.scale(l2, b)), [x])
    np.testing.assert_allclose(gc.data, a * g1.data + b * g2.data, rtol=0, atol=1e-12)


def _small_net(x, w):
    h = T.relu(T.group_norm(T.conv2d(x, w, 1, 1), 2))
    return T.sum_all(T.mul(T.avg_pool2d(h, 2), T.avg_pool2d(h, 2)))


def test_replay_is_bit_identical(rng):
    x0, w0 = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    outs = []
    for _ in range(2):
        x, w = T.leaf(x0), T.leaf(w0)
        loss = _small_net(x, w)
        gx, gw = T.backward(loss, [x, w])
        outs.append((loss.data.tobytes(), gx.data.tobytes(), gw.data.tobytes()))
    assert outs[0] == outs[1]


# grad_check ------------------------------------------------------------------

@given(arrays(np.float64, 5, elements=finite))
def test_grad_check_sum_of_squares(p):
    rep = grad_check(lambda x: T.sum_all(T.mul(x, x)), p, h=1e-5)
    assert rep.passed and rep.max_rel_error < rep.tol


def test_grad_check_constant_function():
    rep = grad_check(lambda x: T.Tensor(3.0), np.ones(4))
    assert rep.max_rel_error == 0.0 and rep.passed


def test_grad_check_ce_convnet(rng):
    params = convnet_init(3, 4, width=8, image_side=8, seed=0)
    labels = np.array([0, 1, 2, 3])
    rep = grad_check(lambda x: cross_entropy(predict_logits(params, x), labels).value,
                     rng.standard_normal((4, 3, 8, 8)), max_coords=40)
    assert rep.max_rel_error < 1e-4


def test_group_norm_grad_matches_recorded_adjoint(rng):
    x0, g0, u0 = (rng.standard_normal((2, 4, 3, 3)) for _ in range(3))
    x, g = T.leaf(x0), T.leaf(g0)
    with T.no_grad():
        closed = T.group_norm_grad(T.Tensor(x0), T.Tensor(g0), 2).data
    v = T.group_norm_grad(x, g, 2)
    np.testing.assert_array_equal(v.data, closed)
    gx, gg = T.backward(T.sum_all(T.mul(v, T.Tensor(u0))), [x, g])
    gx2, gg2 = T.backward(T.sum_all(T.mul(T.group_norm_grad(x, g, 2), T.Tensor(u0))), [x, g],
                          create_graph=True)
    np.testing.assert_allclose(gx.data, gx2.data, atol=1e-10)
    np.testing.assert_allclose(gg.data, gg2.data, atol=1e-10)
    assert math.isfinite(float(gx.data.sum()))
