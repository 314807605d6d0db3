import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dreamda.ndgrad import NumericalError, Tensor, check_finite, grad, grad_check, no_grad, ops
from dreamda.ndgrad.nn import SGD, Adam, Conv, Linear, Norm, cosine_lr, make_optimizer
from dreamda.ndgrad.ops import GEMM_BLOCK, gemm

OP_TOL = 1e-4


def p64(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def away_from_zero(rng, *shape):
    x = rng.standard_normal(shape)
    return Tensor(np.sign(x) * (np.abs(x) + 0.3), requires_grad=True)


# every primitive wrapped into a scalar by a fixed random projection, so that
# the check covers the whole Jacobian rather than a plain sum
def _project(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.standard_normal(out.shape))
    return ops.sum(ops.mul(out, w))


def _cases(rng):
    a, b = p64(rng, 3, 4), p64(rng, 3, 4)
    row = p64(rng, 1, 4)
    d = away_from_zero(rng, 3, 4)
    m1, m2 = p64(rng, 3, 5), p64(rng, 5, 2)
    x = p64(rng, 2, 4, 4, 3)
    w = p64(rng, 3, 3, 3, 2, scale=0.3)
    bias = p64(rng, 2)
    scale, shift = p64(rng, 3), p64(rng, 3)
    table = p64(rng, 5, 3)
    logits = p64(rng, 4, 5)
    labels = np.array([0, 3, 1, 4])
    return {
        "add": (lambda: ops.add(a, b), [a, b]),
        "add_broadcast": (lambda: ops.add(a, row), [a, row]),
        "sub": (lambda: ops.sub(a, row), [a, row]),
        "mul": (lambda: ops.mul(a, b), [a, b]),
        "div": (lambda: ops.div(a, d), [a, d]),
        "neg": (lambda: ops.neg(a), [a]),
        "abs": (lambda: ops.abs(d), [d]),
        "silu": (lambda: ops.silu(a), [a]),
        "matmul": (lambda: ops.matmul(m1, m2), [m1, m2]),
        "transpose": (lambda: ops.transpose(m1), [m1]),
        "reshape": (lambda: ops.reshape(a, (4, 3)), [a]),
        "concat": (lambda: ops.concat([a, b], axis=0), [a, b]),
        "sum_axis": (lambda: ops.sum(a, axis=1), [a]),
        "mean_axis": (lambda: ops.mean(a, axis=0, keepdims=True), [a]),
        "softmax": (lambda: ops.softmax(a), [a]),
        "log_softmax": (lambda: ops.log_softmax(a), [a]),
        "cross_entropy": (lambda: ops.cross_entropy(logits, labels), [logits]),
        "cross_entropy_none": (lambda: ops.cross_entropy(logits, labels, reduction="none"), [logits]),
        "conv2d": (lambda: ops.conv2d(x, w, bias), [x, w, bias]),
        "avg_pool2": (lambda: ops.avg_pool2(x), [x]),
        "upsample2": (lambda: ops.upsample2(x), [x]),
        "affine_norm": (lambda: ops.affine_norm(x, scale, shift), [x, scale, shift]),
        "embedding": (lambda: ops.embedding(table, np.array([1, 1, 4])), [table]),
    }


@pytest.mark.parametrize("name", sorted(_cases(np.random.default_rng(0))))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    fn, params = _cases(rng)[name]
    proj_rng = np.random.default_rng(11)
    with no_grad():
        shape = fn().shape
    w = Tensor(proj_rng.standard_normal(shape))
    err = grad_check(lambda: ops.sum(ops.mul(fn(), w)), params, n_coords=12)
    assert err < OP_TOL, f"{name}: relative error {err:.2e}"


def test_mean_equals_sum_over_count(rng):
    a = p64(rng, 3, 4)
    assert np.isclose(ops.mean(a).item(), a.data.sum() / 12)


def test_scalar_example_from_product():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = Tensor(np.array(3.0), requires_grad=True)
    gx, gy = grad(x * y + x, [x, y])
    assert gx == 4.0 and gy == 2.0


def test_grad_requires_scalar(rng):
    a = p64(rng, 2, 2)
    with pytest.raises(ValueError, match="scalar"):
        grad(a * 2.0, [a])


def test_grad_rejects_untracked_tensor(rng):
    a = p64(rng, 2)
    c = Tensor(np.ones(2))
    with pytest.raises(ValueError, match="untracked"):
        grad(ops.sum(a), [c])


def test_unused_parameter_gets_zero_gradient(rng):
    a, b = p64(rng, 3), p64(rng, 3)
    ga, gb = grad(ops.sum(a * a), [a, b])
    assert np.allclose(ga, 2 * a.data) and np.all(gb == 0)


def test_reused_node_accumulates(rng):
    a = p64(rng, 4)
    h = ops.silu(a)
    (g,) = grad(ops.sum(h * h + h), [a])
    err = grad_check(lambda: ops.sum(ops.silu(a) * ops.silu(a) + ops.silu(a)), [a])
    assert err < OP_TOL and g.shape == a.shape


def test_no_grad_builds_no_graph(rng):
    a = p64(rng, 3)
    with no_grad():
        out = ops.sum(a * a)
    assert not out.requires_grad


def test_shape_errors_name_the_op():
    with pytest.raises(ValueError, match="matmul"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError, match="add"):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_grad_check_rejects_float32_and_bad_epsilon(rng):
    a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="real64"):
        grad_check(lambda: ops.sum(a), [a])
    b = p64(rng, 3)
    with pytest.raises(ValueError, match="epsilon"):
        grad_check(lambda: ops.sum(b), [b], epsilon=0.0)


def test_check_finite_raises_numerical_error():
    with pytest.raises(NumericalError):
        check_finite(Tensor(np.array([1.0, np.nan])), "x")
    assert isinstance(NumericalError("x"), FloatingPointError)


def test_abs_subgradient_at_zero_is_zero():
    a = Tensor(np.array([0.0, -2.0, 3.0]), requires_grad=True)
    (g,) = grad(ops.sum(ops.abs(a)), [a])
    assert list(g) == [0.0, -1.0, 1.0]


def test_silu_is_finite_for_extreme_inputs():
    x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]), requires_grad=True)
    (g,) = grad(ops.sum(ops.silu(x)), [x])
    assert np.all(np.isfinite(ops.silu(x).data)) and np.all(np.isfinite(g))


def test_cross_entropy_matches_closed_form():
    logits = Tensor(np.zeros((2, 4)))
    assert np.isclose(ops.cross_entropy(logits, np.array([0, 3])).item(), np.log(4))


def test_dropout_identity_without_rng_and_scaled_with_it(rng):
    x = Tensor(np.ones((200, 50)))
    assert ops.dropout(x, 0.5, None) is x
    y = ops.dropout(x, 0.5, rng).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_conv2d_matches_direct_correlation(rng):
    x = rng.standard_normal((1, 5, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    out = ops.conv2d(Tensor(x), Tensor(w)).data
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 5, 3))
    for i in range(5):
        for j in range(5):
            ref[0, i, j] = np.einsum("abc,abcd->d", padded[0, i:i + 3, j:j + 3], w)
    assert np.allclose(out, ref, atol=1e-12)


def test_affine_norm_normalizes_each_sample_and_channel(rng):
    x = Tensor(3.0 + 5.0 * rng.standard_normal((2, 4, 4, 3)))
    out = ops.affine_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.allclose(out.mean(axis=(1, 2)), 0, atol=1e-10)
    assert np.allclose(out.var(axis=(1, 2)), 1, atol=1e-3)


@given(n=st.integers(1, 3 * GEMM_BLOCK), seed=st.integers(0, 2**16))
def test_gemm_rows_do_not_depend_on_batch(n, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((n, 7)).astype(np.float32)
    b = r.standard_normal((7, 5)).astype(np.float32)
    full = gemm(a, b)
    k = int(r.integers(0, n))
    assert np.array_equal(full[k:k + 1], gemm(a[k:k + 1], b))
    assert np.allclose(full, a @ b, atol=1e-5)


@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
       arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_add_is_commutative_and_differentiable(x, y):
    a, b = Tensor(x, requires_grad=True), Tensor(y, requires_grad=True)
    assert np.array_equal(ops.add(a, b).data, ops.add(b, a).data)
    ga, gb = grad(ops.sum(a + b), [a, b])
    assert np.all(ga == 1) and np.all(gb == 1)


def test_layers_have_expected_shapes(rng):
    lin, conv, norm = Linear(4, 3, rng), Conv(2, 5, rng), Norm(5)
    assert lin(Tensor(np.ones((7, 4)))).shape == (7, 3)
    h = conv(Tensor(np.ones((2, 6, 6, 2))))
    assert h.shape == (2, 6, 6, 5)
    assert norm(h).shape == h.shape


def test_zero_init_layer_outputs_zero(rng):
    conv = Conv(2, 3, rng, zero=True)
    assert np.all(conv(Tensor(rng.standard_normal((1, 4, 4, 2)))).data == 0)


def test_cosine_lr_endpoints():
    assert cosine_lr(1.0, 0, 100) == 1.0
    assert cosine_lr(1.0, 100, 100) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5)


@pytest.mark.parametrize("name", ["sgd", "adam"])
def test_optimizers_minimize_a_quadratic(name):
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = make_optimizer(name, [x], 0.1)
    assert isinstance(opt, SGD if name == "sgd" else Adam)
    for _ in range(300):
        opt.step(grad(ops.sum(x * x), [x]))
    assert np.abs(x.data).max() < 1e-2


def test_unknown_optimizer_rejected():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [], 0.1)
