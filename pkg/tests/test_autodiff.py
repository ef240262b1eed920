import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from eqswarm import autodiff as ad
from eqswarm.autodiff import ShapeError, Tensor, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_forward_examples():
    assert ad.exp(Tensor(0.0)).item() == 1.0
    assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = ad.segment_sum(Tensor([1.0, 2.0, 3.0]), np.array([0, 0, 1]), 2)
    assert_array_equal(out.data, [3.0, 3.0])


def test_backward_examples():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)

    x = leaf([2.0, 0.0])
    ad.norm(x, axis=0).backward()
    assert_allclose(x.grad, [1.0, 0.0])


def test_non_scalar_backward_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_grad_check_linear_map():
    a = np.random.default_rng(0).normal(size=(4, 3))
    rep = grad_check(lambda x: ad.tsum(ad.matmul(x, a)), [np.ones((2, 4))])
    assert rep.n_checked == 8
    assert rep.max_rel_error < 1e-10


def test_grad_check_gaussian_overlap():
    # overlap of two isotropic Gaussians in 5 dimensions
    sigma = 0.7
    y = np.array([0.3, -0.1, 0.5, 2.0, 0.0])

    def overlap(x):
        d = x - y
        return ad.exp(ad.tsum(d * d) * (-1.0 / (4 * sigma**2)))

    rep = grad_check(overlap, [np.array([0.1, 0.2, -0.3, 1.5, 0.4])])
    assert rep.max_rel_error < 1e-6


def test_grad_check_norm_at_origin_excluded():
    rep = grad_check(lambda x: ad.norm(x, axis=0), [np.zeros(2)])
    assert rep.n_checked == 0
    assert len(rep.excluded) == 2


def test_grad_check_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        with np.errstate(divide="ignore"):
            grad_check(lambda x: ad.tsum(x) / 0.0, [np.ones(2)])


def test_norm_gradient_zero_below_guard():
    x = leaf(np.full((1, 3), 1e-14))
    ad.tsum(ad.norm(x, axis=1)).backward()
    assert_array_equal(x.grad, np.zeros((1, 3)))


def test_segment_sum_backward_broadcasts_to_members():
    x = leaf([1.0, 2.0, 3.0, 4.0])
    out = ad.segment_sum(x, np.array([0, 0, 1, 1]), 2)
    ad.tsum(out * Tensor([5.0, 7.0])).backward()
    assert_array_equal(x.grad, [5.0, 5.0, 7.0, 7.0])


def test_scatter_add_order_independent_of_input_order():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 3))
    ids = rng.integers(0, 6, size=50)
    a = ad.scatter_add(x, ids, 7)
    perm = np.argsort(ids, kind="stable")
    b = ad.scatter_add(x[perm], ids[perm], 7)
    assert_array_equal(a, b)
    assert_array_equal(a[6], 0.0)


UNARY = {
    "exp": lambda x: ad.exp(x * 0.3),
    "power": lambda x: ad.power(ad.absolute(x) + 0.5, 2.5),
    "sqrt": lambda x: ad.sqrt(x * x + 1.0),
    "sin": ad.sin,
    "cos": ad.cos,
    "abs": ad.absolute,
    "relu": ad.relu,
    "gelu": ad.gelu,
    "clamp_min": lambda x: ad.clamp_min(x, 0.1),
    "softmax": lambda x: ad.softmax(x, axis=1) * np.arange(1.0, 4.0),
    "norm": lambda x: ad.norm(x, axis=1),
    "amax": lambda x: ad.amax(x, axis=1),
    "amin": lambda x: ad.amin(x, axis=0),
    "mean": lambda x: ad.mean(x, axis=0) * np.array([1.0, -2.0, 0.5]),
    "transpose": lambda x: ad.transpose(x) * np.arange(6.0).reshape(3, 2),
    "getitem": lambda x: x[1:, ::2] * 3.0,
    "gather": lambda x: ad.gather(x, np.array([0, 1, 1])) * np.arange(9.0).reshape(3, 3),
    "segment_softmax": lambda x: ad.segment_softmax(x, np.array([0, 0]), 1) * np.arange(3.0),
    "concat": lambda x: ad.concat([x, x * x], axis=1) * np.arange(6.0),
    "reshape": lambda x: ad.reshape(x, (3, 2)) * np.arange(6.0).reshape(3, 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_unary_primitive_gradients(name, seed):
    x0 = np.random.default_rng(seed).normal(size=(2, 3))
    rep = grad_check(lambda x: ad.tsum(UNARY[name](x) * UNARY[name](x)), [x0])
    assert rep.max_rel_error < 1e-4


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "broadcast": lambda a, b: a * b[0:1],
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_binary_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    f = BINARY[name]
    rep = grad_check(lambda a, b: ad.tsum(f(a, b) * f(a, b)), [a0, b0])
    assert rep.max_rel_error < 1e-4


def test_reflected_numpy_operand_stays_a_tensor():
    x = leaf(np.ones(3))
    y = np.eye(3) + x
    assert isinstance(y, Tensor)
    ad.tsum(y).backward()
    assert_array_equal(x.grad, [3.0, 3.0, 3.0])
