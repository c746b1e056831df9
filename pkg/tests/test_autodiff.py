import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dproto import autodiff as ad
from dproto.autodiff import Tensor, gradient_check
from dproto.errors import NonFiniteError, ShapeMismatchError

RTOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def test_broadcast_add_and_mul_gradients(rng):
    b = rng.normal(size=(1, 4))
    c = rng.normal(size=(3, 4))
    x = rng.normal(size=(3, 1))
    err = gradient_check(lambda t: ad.reduce_sum(ad.mul(ad.add(t, b), c)), x)
    assert err < RTOL


def test_div_and_log_gradients(rng):
    x = rng.uniform(0.5, 2.0, size=(2, 3))
    err = gradient_check(lambda t: ad.reduce_sum(ad.log(ad.div(ad.add_scalar(t, 1.0), t))), x)
    assert err < RTOL


def test_matmul_gradient(rng):
    w = rng.normal(size=(4, 2))
    x = rng.normal(size=(3, 4))
    err = gradient_check(lambda t: ad.reduce_sum(ad.square(ad.matmul(t, w))), x)
    assert err < RTOL


def test_conv2d_gradient_wrt_input_and_weight(rng):
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    bias = rng.normal(size=3)

    def of_input(t):
        return ad.reduce_sum(ad.square(ad.conv2d(t, w, bias, stride=2, padding=1)))

    def of_weight(t):
        return ad.reduce_sum(ad.square(ad.conv2d(x, t, bias, stride=1, padding=1)))

    assert gradient_check(of_input, x) < RTOL
    assert gradient_check(of_weight, w) < RTOL


def test_relu_and_max_pool_gradients_away_from_kinks(rng):
    x = rng.normal(size=(1, 4, 4, 2))
    f = lambda t: ad.reduce_sum(ad.square(ad.max_pool2d(ad.relu(t), 2)))  # noqa: E731
    assert gradient_check(f, x, exclude_kinks=True) < RTOL


def test_upsample_and_masked_gap_gradients(rng):
    grid = rng.uniform(size=(3, 3))
    target = rng.uniform(size=(7, 7))
    assert gradient_check(
        lambda t: ad.reduce_sum(ad.square(ad.sub(ad.upsample_bilinear(t, (7, 7)), target))), grid
    ) < RTOL

    features = rng.uniform(size=(2, 3, 3, 4))
    masks = rng.uniform(size=(5, 3, 3, 4))
    assert gradient_check(lambda t: ad.reduce_sum(ad.square(ad.masked_gap(t, masks))), features) < RTOL
    assert gradient_check(lambda t: ad.reduce_sum(ad.square(ad.masked_gap(features, t))), masks) < RTOL


def test_sq_distance_and_softmax_cross_entropy(rng):
    p = rng.normal(size=(4,))
    z = rng.normal(size=(3, 4))
    assert gradient_check(lambda t: ad.reduce_sum(ad.sq_distance(z, t)), p) < RTOL

    logits = rng.normal(size=(3, 4))
    labels = np.array([0, 3, 1])
    loss = ad.softmax_cross_entropy(Tensor(logits), labels)
    probs = ad.softmax(logits)
    expected = -np.mean(np.log(probs[np.arange(3), labels]))
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    assert gradient_check(lambda t: ad.softmax_cross_entropy(t, labels), logits) < RTOL


def test_abs_and_sub_gradients(rng):
    x = rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    c = rng.normal(size=(3, 4))
    assert gradient_check(lambda t: ad.reduce_sum(ad.mul(ad.absolute(t), c)), x) < RTOL
    assert gradient_check(lambda t: ad.reduce_sum(ad.square(ad.sub(t, c))), x) < RTOL
    assert gradient_check(lambda t: ad.reduce_sum(ad.square(ad.sub(c, t))), x) < RTOL


def test_mean_max_and_gap_gradients(rng):
    x = rng.normal(size=(2, 3, 3, 4))
    assert gradient_check(lambda t: ad.reduce_sum(ad.square(ad.reduce_mean(t, axis=0))), x) < RTOL
    assert gradient_check(lambda t: ad.reduce_sum(ad.square(ad.reduce_max(t, axis=2))), x,
                          exclude_kinks=True) < RTOL
    assert gradient_check(lambda t: ad.reduce_sum(ad.square(ad.global_average_pool(t))), x) < RTOL


def test_conv_relu_gap_composite(rng):
    x = rng.normal(size=(1, 8, 8, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    bias = rng.normal(size=4)

    def of_input(t):
        return ad.reduce_sum(ad.square(ad.global_average_pool(ad.relu(ad.conv2d(t, w, bias, stride=1, padding=1)))))

    def of_weight(t):
        return ad.reduce_sum(ad.square(ad.global_average_pool(ad.relu(ad.conv2d(x, t, bias, stride=1, padding=1)))))

    assert gradient_check(of_input, x, exclude_kinks=True) < RTOL
    assert gradient_check(of_weight, w, exclude_kinks=True) < RTOL


def _grad(loss_fn, x):
    t = Tensor(x.copy(), requires_grad=True)
    ad.backward(loss_fn(t))
    return t.grad.copy()


def test_backward_is_linear_in_the_loss(rng):
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    c = rng.normal(size=(4, 2))
    first = lambda t: ad.reduce_sum(ad.square(ad.matmul(t, c)))  # noqa: E731
    second = lambda t: ad.reduce_sum(ad.log(ad.relu(t)))  # noqa: E731
    a, b = 2.5, -0.7
    combined = _grad(lambda t: ad.add(ad.mul_scalar(first(t), a), ad.mul_scalar(second(t), b)), x)
    np.testing.assert_allclose(combined, a * _grad(first, x) + b * _grad(second, x), rtol=0, atol=1e-12)


def test_forward_passes_are_bit_identical(rng):
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    labels = np.array([1, 3])

    def run():
        features = ad.max_pool2d(ad.relu(ad.conv2d(Tensor(x), Tensor(w), stride=1, padding=1)), 2)
        logits = ad.global_average_pool(features)
        return features.data.copy(), ad.softmax_cross_entropy(logits, labels).data.copy()

    (f1, l1), (f2, l2) = run(), run()
    np.testing.assert_array_equal(f1, f2)
    np.testing.assert_array_equal(l1, l2)


def test_softmax_cross_entropy_rejects_bad_labels():
    with pytest.raises(ShapeMismatchError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_leaf_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.reduce_sum(ad.mul_scalar(x, 2.0)))
    ad.backward(ad.reduce_sum(ad.mul_scalar(x, 2.0)))
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_shared_subexpression_sums_paths():
    x = Tensor([3.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), x)
    ad.backward(ad.reduce_sum(y))
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeMismatchError):
        ad.backward(ad.mul_scalar(x, 2.0))


def test_constant_inputs_build_no_graph():
    out = ad.add(Tensor([1.0]), Tensor([2.0]))
    assert out.is_leaf
    assert out.grad is None


def test_log_of_non_positive_raises():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([1.0, 0.0]))


def test_unknown_operation_raises_key_error():
    with pytest.raises(KeyError):
        ad.op_forward("softplus", Tensor([1.0]))
    assert ad.op_forward("add", Tensor([1.0]), Tensor([2.0])).item() == 3.0


def test_max_ties_route_gradient_to_lowest_index():
    x = Tensor([1.0, 3.0, 3.0], requires_grad=True)
    m = ad.reduce_max(x)
    assert int(m.argmax) == 1
    ad.backward(m)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_gradient_check_validates_step():
    with pytest.raises(ValueError):
        gradient_check(lambda t: ad.reduce_sum(t), np.ones(2), eps=0.0)


@settings(max_examples=50, deadline=None)
@given(n_in=st.integers(1, 20), n_out=st.integers(1, 40))
def test_bilinear_rows_sum_to_one(n_in, n_out):
    matrix = ad.bilinear_matrix(n_in, n_out)
    assert matrix.shape == (n_out, n_in)
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-12)
    assert matrix.min() >= 0.0


@given(n=st.integers(1, 15))
def test_bilinear_same_size_is_identity(n):
    np.testing.assert_allclose(ad.bilinear_matrix(n, n), np.eye(n), atol=1e-12)
