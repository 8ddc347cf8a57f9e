import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from couda import autodiff as ad
from couda.autodiff import ConfigError, ShapeError, Tensor
from couda.gradcheck import check_gradients


def param(shape, rng, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def test_softmax_uniform():
    out = ad.softmax(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_matmul_identity():
    a = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


@pytest.mark.parametrize(
    "op, a, b",
    [
        (ad.matmul, (2, 3), (2, 3)),
        (ad.add, (2, 3), (3, 2)),
        (ad.multiply, (2, 2), (2,)),
        (ad.subtract, (4,), (2, 2)),
    ],
)
def test_shape_mismatch_names_op_and_shapes(op, a, b):
    with pytest.raises(ShapeError) as exc:
        op(Tensor(np.ones(a)), Tensor(np.ones(b)))
    msg = str(exc.value)
    assert op.__name__ in msg and str(a) in msg and str(b) in msg


def test_scalar_broadcast_allowed():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    s = Tensor(2.0, requires_grad=True)
    with ad.new_tape():
        g = ad.backward(ad.sum(x * s + 1.0), [x, s])
    np.testing.assert_array_equal(g[x], np.full((2, 3), 2.0))
    assert g[s] == pytest.approx(6.0)


def test_grad_reverse_forward_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    with ad.new_tape():
        y = ad.grad_reverse(x, 1.0)
        np.testing.assert_array_equal(y.data, x.data)


def test_grad_reverse_hand_example():
    # f(x) = grl(x) * x at x = 3: the reversed branch contributes -3, the plain one +3
    x = Tensor(3.0, requires_grad=True)
    with ad.new_tape():
        g = ad.backward(ad.grad_reverse(x, 1.0) * x)
    assert g[x] == pytest.approx(0.0)
    # only the reversed path: d/dx [grl(x) * c] with c = x frozen at 3
    with ad.new_tape():
        g = ad.backward(ad.grad_reverse(x, 1.0) * 3.0)
    assert g[x] == -3.0
    with ad.new_tape():
        g = ad.backward(x * 3.0)
    assert g[x] == 3.0


def test_grad_reverse_scales_upstream():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    upstream = rng.normal(size=(5, 2))
    with ad.new_tape():
        g = ad.backward(ad.sum(ad.grad_reverse(x, 0.5) * upstream))
    np.testing.assert_array_equal(g[x], -0.5 * upstream)


@pytest.mark.parametrize("coeff", [0.0, -1.0])
def test_grad_reverse_rejects_nonpositive(coeff):
    with pytest.raises(ConfigError):
        ad.grad_reverse(Tensor(1.0), coeff)


def test_backward_sum_of_squares():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with ad.new_tape():
        g = ad.backward(ad.sum(w * w))
    np.testing.assert_array_equal(g[w], [2.0, 4.0])


def test_unreachable_parameter_gets_zero():
    w = Tensor([1.0, 2.0], requires_grad=True)
    u = Tensor([[5.0]], requires_grad=True)
    with ad.new_tape():
        g = ad.backward(ad.sum(w * w), [w, u])
    np.testing.assert_array_equal(g[u], [[0.0]])


def test_backward_rejects_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with ad.new_tape(), pytest.raises(ShapeError):
        ad.backward(w * 2.0)


def test_two_backward_passes_agree():
    rng = np.random.default_rng(5)
    w = param((3, 4), rng)
    x = Tensor(rng.normal(size=(6, 3)))
    with ad.new_tape():
        loss = ad.sum(ad.log(ad.softmax(x @ w)))
        first = {k: v.copy() for k, v in ad.backward(loss, [w]).items()}
        second = ad.backward(loss, [w])
    for k in first:
        np.testing.assert_array_equal(first[k], second[k])


def test_tape_clears_nodes_keeps_params():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.new_tape() as tape:
        ad.sum(w @ w)
        assert len(tape) == 2
    assert len(tape) == 0
    assert w.requires_grad and w.data.shape == (2, 2)


def test_no_grad_records_nothing():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.new_tape() as tape, ad.no_grad():
        y = w @ w
        assert len(tape) == 0 and not y.requires_grad


def test_log_clamps_tiny_probabilities():
    assert ad.log(Tensor(0.0)).item() == pytest.approx(np.log(1e-12))


def test_concat_splits_gradient():
    rng = np.random.default_rng(0)
    a, b = param((2, 3), rng), param((4, 3), rng)
    weights = rng.normal(size=(6, 3))
    with ad.new_tape():
        g = ad.backward(ad.sum(ad.concat([a, b], axis=0) * weights))
    np.testing.assert_array_equal(g[a], weights[:2])
    np.testing.assert_array_equal(g[b], weights[2:])


UNARY_CASES = {
    "relu": lambda x: ad.relu(x),
    "leaky_relu": lambda x: ad.leaky_relu(x, 0.2),
    "sigmoid": lambda x: ad.sigmoid(x),
    "softmax": lambda x: ad.softmax(x),
    "log": lambda x: ad.log(ad.sigmoid(x)),
    "power": lambda x: ad.power(ad.sigmoid(x), 2.5),
    "mean_axis": lambda x: ad.mean(x, axis=1),
    "transpose": lambda x: ad.transpose(x),
    "reshape": lambda x: ad.reshape(x, (3, 4)),
    "scale": lambda x: ad.scale(x, -1.7),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_unary_ops_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    # keep inputs away from relu kinks so central differences are valid
    x = Tensor(rng.uniform(0.1, 1.0, size=(4, 3)) * rng.choice([-1, 1], size=(4, 3)), requires_grad=True)
    upstream = Tensor(rng.normal(size=UNARY_CASES[name](Tensor(x.data)).shape))
    fn = UNARY_CASES[name]
    res = check_gradients(lambda: ad.sum(fn(x) * upstream), [x], n_coords=12, rng=rng)
    assert res.ok, res.failures


def test_binary_ops_match_finite_differences():
    rng = np.random.default_rng(11)
    a, b, w = param((3, 4), rng), param((3, 4), rng), param((4, 2), rng)
    s = param((), rng)

    def loss():
        h = (a * b - a + b * s) @ w
        return ad.sum(ad.concat([h, a @ w], axis=0) * 0.3)

    res = check_gradients(loss, [a, b, w, s], n_coords=20, rng=rng)
    assert res.ok, res.failures


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_positive(x):
    s = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(s > 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-1e3, 1e3)), st.floats(0.01, 10))
def test_grad_reverse_is_negated_scaled_identity(upstream, coeff):
    x = Tensor(np.ones((3, 3)), requires_grad=True)
    with ad.new_tape():
        plain = ad.backward(ad.sum(x * upstream))[x]
    with ad.new_tape():
        rev = ad.backward(ad.sum(ad.grad_reverse(x, coeff) * upstream))[x]
    np.testing.assert_array_equal(rev, -coeff * plain)
