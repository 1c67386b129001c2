import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from spdrdl import tensor as T
from spdrdl.errors import AxisError, DomainError, GraphError, ShapeError
from spdrdl.tensor import Tensor


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def direct_conv(x, k, stride=1, pad=(0, 0)):
    """Loop-level cross-correlation used as the oracle for conv2d."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, [(0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])])
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


# -- elementwise ---------------------------------------------------------

def test_add_values():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=4),
                  elements=st.floats(-1e6, 1e6)))
def test_mul_by_one_is_identity(x):
    np.testing.assert_array_equal((Tensor(x) * 1.0).data, x)


def test_exp_gradient_matches_central_difference():
    err = T.finite_diff_check(lambda t: t.exp().sum(), f64([0.3, -0.7]), eps=1e-6)
    assert err < 1e-4


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])


def test_no_silent_broadcast_of_rank_one_against_matrix():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) * Tensor(np.ones(3))


def test_scalar_operand_broadcasts():
    out = Tensor(np.ones((2, 2))) * Tensor(np.array(3.0))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(DomainError):
        Tensor([1.0, 0.0]).log()


def test_division_gradient():
    a, b = f64([1.0, -2.0]), f64([4.0, 0.5])
    (a / b).sum().backward()
    np.testing.assert_allclose(a.grad, [0.25, 2.0])
    np.testing.assert_allclose(b.grad, [-1 / 16, 8.0])


def test_max_min_route_gradient_to_winner():
    a, b = f64([1.0, 5.0]), f64([3.0, 2.0])
    (a.maximum(b) + a.minimum(b) * 10.0).sum().backward()
    np.testing.assert_array_equal(a.grad, [10.0, 1.0])
    np.testing.assert_array_equal(b.grad, [1.0, 10.0])


# -- matmul --------------------------------------------------------------

def test_matmul_identity_and_inner_product():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ m).data, m.data)
    np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    b = Tensor(rng.standard_normal((3, 2)))
    assert T.finite_diff_check(lambda a: (a @ b).sum(), f64(rng.standard_normal((4, 3)))) < 1e-4


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- conv2d --------------------------------------------------------------

def test_conv_unit_kernel_is_identity():
    x = np.random.default_rng(1).standard_normal((2, 1, 5, 6)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_valid():
    out = T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), padding="valid")
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_conv_gradients_small_case():
    rng = np.random.default_rng(2)
    x, k = rng.standard_normal((1, 1, 5, 5)), rng.standard_normal((2, 1, 3, 3))
    assert T.finite_diff_check(lambda t: T.conv2d(t, Tensor(k)).sum(), f64(x)) < 1e-4
    w = Tensor(rng.standard_normal((1, 2, 5, 5)))
    assert T.finite_diff_check(lambda t: (T.conv2d(Tensor(x), t) * w).sum(), f64(k)) < 1e-4


@pytest.mark.parametrize("shape,kshape,stride,padding", [
    ((2, 3, 7, 7), (4, 3, 3, 3), 1, "same"),
    ((1, 2, 9, 8), (3, 2, 3, 3), 2, "valid"),
    ((1, 2, 6, 6), (2, 2, 5, 5), 1, "same"),
    ((1, 8, 4, 4), (3, 8, 3, 3), 1, "same"),     # channel-heavy path
    ((1, 1, 20, 20), (2, 1, 3, 3), 1, "same"),   # spatially large path
])
def test_conv_matches_direct_loop(shape, kshape, stride, padding):
    rng = np.random.default_rng(3)
    x, k = rng.standard_normal(shape), rng.standard_normal(kshape)
    pad = (kshape[2] // 2, kshape[3] // 2) if padding == "same" else (0, 0)
    out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, direct_conv(x, k, stride, pad), atol=1e-10)


def test_conv_same_preserves_extent():
    out = T.conv2d(Tensor(np.zeros((1, 1, 7, 5))), Tensor(np.zeros((3, 1, 3, 3))))
    assert out.shape == (1, 3, 7, 5)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), padding="valid")


# -- reductions ----------------------------------------------------------

def test_mean_and_constant_stdev():
    assert Tensor([1.0, 2.0, 3.0, 4.0]).mean().item() == 2.5
    assert Tensor([7.25, 7.25, 7.25]).std().item() == 0.0


def test_stdev_is_population():
    assert Tensor([1.0, 3.0], dtype=np.float64).std().item() == 1.0


def test_mean_gradient():
    x = np.random.default_rng(4).standard_normal((3, 4))
    assert T.finite_diff_check(lambda t: t.mean(axis=1).sum(), f64(x)) < 1e-4


def test_reduce_keepdims_shape():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.sum(axis=1).shape == (2, 4)
    assert t.max(axis=(0, 2), keepdims=True).shape == (1, 3, 1)


def test_invalid_axis():
    with pytest.raises(AxisError):
        Tensor(np.zeros((2, 3))).sum(axis=2)


# -- backward ------------------------------------------------------------

def test_backward_of_sum_gives_ones():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_constant_writes_nothing():
    c = Tensor([1.0, 2.0])
    c.sum().backward()
    assert c.grad is None


def test_non_scalar_backward():
    with pytest.raises(GraphError):
        Tensor(np.ones(3), requires_grad=True).exp().backward()


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_shared_subexpression_visited_once():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    y = x * 2.0
    (y * y + y).sum().backward()   # d/dx (4x^2 + 2x) = 8x + 2
    np.testing.assert_array_equal(x.grad, [26.0])


def test_no_grad_builds_no_tape():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y.parents == () and not y.requires_grad


def test_tape_is_deterministic():
    rng = np.random.default_rng(5)
    x, k = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    runs = []
    for _ in range(2):
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        out = T.conv2d(xt, kt).relu().mean()
        out.backward()
        runs.append((out.data.tobytes(), xt.grad.tobytes(), kt.grad.tobytes()))
    assert runs[0] == runs[1]


def test_default_precision_is_float32():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.array([1.0])).dtype == np.float64


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_grad_shape_matches_data(values):
    x = Tensor(values, requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.shape == x.shape


# -- finite_diff_check ---------------------------------------------------

@settings(max_examples=25)
@given(hnp.arrays(np.float64, (3,), elements=st.floats(-5, 5)))
def test_fd_check_of_sum_is_exact(x):
    # wide step: for a linear f the only error left is rounding in x +- eps
    assert T.finite_diff_check(lambda t: t.sum(), f64(x), eps=1e-3) < 1e-10


def test_fd_check_of_sum_of_squares():
    x = f64([1.0, 2.0])
    np.testing.assert_allclose(T.analytic_gradient(lambda t: (t * t).sum(), x), [2.0, 4.0])
    assert T.finite_diff_check(lambda t: (t * t).sum(), x, eps=1e-4) < 1e-6


def test_fd_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.finite_diff_check(lambda t: t.sum(), f64([1.0]), eps=0.0)


def test_fd_check_on_ssim():
    from spdrdl.losses import ssim
    rng = np.random.default_rng(6)
    ref = rng.uniform(0.1, 0.9, (1, 1, 16, 16))
    x = np.clip(ref + 0.1 * rng.standard_normal(ref.shape), 0, 1)
    assert T.finite_diff_check(lambda t: ssim(t, Tensor(ref)), f64(x), eps=1e-4) < 1e-3


# -- structural ops ------------------------------------------------------

def test_pool_max_keeps_first_of_ties():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.pool_max(x, 2, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_pad_symmetric_adjoint():
    # <pad(x), y> == <x, pad^T(y)> for the backward rule
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 1, 4, 5))
    widths = [(0, 0), (0, 0), (2, 1), (1, 2)]
    y = rng.standard_normal(np.pad(x, widths).shape)
    for mode in ("zeros", "symmetric", "reflect", "edge"):
        xt = Tensor(x, requires_grad=True)
        out = T.pad(xt, widths, mode)
        (out * Tensor(y)).sum().backward()
        np.testing.assert_allclose(np.sum(out.data * y), np.sum(x * xt.grad), rtol=1e-12)


def test_getitem_fancy_index_accumulates():
    x = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])
