"""Graph engine checks: every op against central finite differences, plus
second-order behavior, graph lifetime rules, and broadcasting limits."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddist import autodiff as ad
from ddist.errors import ContractError, DomainError, ShapeError

RNG = np.random.default_rng(20240811)


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want)))


def gradcheck(build, arrays, rel=1e-6, eps=1e-5):
    """Compare gradient() against finite_diff_gradient for each input."""
    leaves = [ad.leaf(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    grads = ad.gradient(out, leaves)
    for i, base in enumerate(arrays):
        def f(x, _i=i):
            vals = [ad.leaf(a) for a in arrays]
            vals[_i] = ad.leaf(x)
            return float(build(*vals).data)

        fd = ad.finite_diff_gradient(f, base, eps)
        assert rel_err(grads[i], fd) <= rel, f"input {i}: {grads[i]} vs {fd}"


# ---------------------------------------------------------------------------
# frozen examples

def test_add_elementwise():
    out = ad.add(ad.constant([1.0, 2.0]), ad.constant([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_matmul_identity():
    a = RNG.normal(size=(3, 5))
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
    assert np.array_equal(out.data, a)


def test_softmax_symmetry():
    out = ad.softmax(ad.constant([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    rows = ad.softmax(ad.constant(RNG.normal(size=(4, 7))))
    assert np.allclose(rows.data.sum(axis=-1), 1.0, atol=1e-12)


def test_gradient_of_square_sum():
    x = ad.leaf(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = ad.sum_reduce(ad.mul(x, x))
    (g,) = ad.gradient(y, [x])
    assert np.array_equal(g, [2.0, 4.0, 6.0])


def test_gradient_of_constant_is_zero():
    x = ad.leaf(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.sum_reduce(ad.constant([5.0]))
    (g,) = ad.gradient(y, [x])
    assert np.array_equal(g, np.zeros(2))


def test_second_derivative_of_cube():
    x = ad.leaf(np.array(2.0), requires_grad=True)
    y = ad.power(x, 3.0)
    g1 = ad.gradient(y, [x], create_graph=True)[0]
    (g2,) = ad.gradient(ad.mul(g1, 1.0), [x])
    assert float(g2) == pytest.approx(12.0, abs=1e-12)


def test_finite_diff_on_square():
    fd = ad.finite_diff_gradient(lambda x: float(np.sum(x ** 2)), np.array([1.0, 2.0]))
    assert np.allclose(fd, [2.0, 4.0], atol=1e-8)


def test_finite_diff_of_constant():
    fd = ad.finite_diff_gradient(lambda x: 7.5, np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(fd, np.zeros(3))


# ---------------------------------------------------------------------------
# per-op finite-difference checks

def test_gradcheck_arithmetic():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(3, 4)) + 3.0  # away from zero for div
    gradcheck(lambda x, y: ad.sum_reduce(ad.mul(ad.add(x, y), ad.sub(x, y))), [a, b])
    gradcheck(lambda x, y: ad.sum_reduce(ad.div(x, y)), [a, b])
    gradcheck(lambda x: ad.sum_reduce(ad.neg(ad.scale(x, 2.5))), [a])


def test_gradcheck_broadcast_bias_and_scalar():
    m = RNG.normal(size=(4, 3))
    bias = RNG.normal(size=(3,))
    s = np.array(1.7)
    gradcheck(lambda x, b: ad.sum_reduce(ad.mul(ad.add(x, b), ad.add(x, b))), [m, bias])
    gradcheck(lambda x, c: ad.sum_reduce(ad.mul(x, c)), [m, s])


def test_gradcheck_unary():
    pos = RNG.uniform(0.5, 2.0, size=(2, 5))
    any_sign = RNG.normal(size=(2, 5)) + 0.1
    gradcheck(lambda x: ad.sum_reduce(ad.exp(x)), [any_sign])
    gradcheck(lambda x: ad.sum_reduce(ad.log(x)), [pos])
    gradcheck(lambda x: ad.sum_reduce(ad.tanh(x)), [any_sign])
    gradcheck(lambda x: ad.sum_reduce(ad.sqrt(x)), [pos])
    gradcheck(lambda x: ad.sum_reduce(ad.power(x, 3.0)), [any_sign])
    gradcheck(lambda x: ad.sum_reduce(ad.power(x, 0.5)), [pos])
    # relu: keep probes away from the kink
    off_kink = np.where(np.abs(any_sign) < 0.05, 0.5, any_sign)
    gradcheck(lambda x: ad.sum_reduce(ad.relu(x)), [off_kink])


def test_gradcheck_matmul():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    gradcheck(lambda x, y: ad.sum_reduce(ad.mul(ad.matmul(x, y), ad.matmul(x, y))), [a, b])


def test_gradcheck_reductions():
    x = RNG.normal(size=(3, 4, 2))
    gradcheck(lambda v: ad.sum_reduce(ad.mul(ad.sum_reduce(v, axis=1), ad.sum_reduce(v, axis=1))), [x])
    gradcheck(lambda v: ad.sum_reduce(ad.power(ad.mean_reduce(v, axis=(0, 2)), 2.0)), [x])
    gradcheck(lambda v: ad.sum_reduce(ad.mean_reduce(v, axis=2, keepdims=True)), [x])
    # max: perturbation must not flip the argmax
    spread = np.arange(24, dtype=np.float64).reshape(3, 4, 2) * 0.5
    gradcheck(lambda v: ad.sum_reduce(ad.power(ad.max_reduce(v, axis=1), 2.0)), [spread])


def test_gradcheck_shape_ops():
    x = RNG.normal(size=(3, 4))
    y = RNG.normal(size=(2, 4))
    gradcheck(lambda v: ad.sum_reduce(ad.power(ad.reshape(v, (2, 6)), 2.0)), [x])
    gradcheck(lambda v: ad.sum_reduce(ad.power(ad.transpose(v), 3.0)), [x])
    gradcheck(lambda v: ad.sum_reduce(ad.power(ad.broadcast_to(ad.reshape(v, (3, 1, 4)), (3, 5, 4)), 2.0)), [x])
    gradcheck(lambda u, v: ad.sum_reduce(ad.power(ad.concat([u, v], axis=0), 2.0)), [x, y])
    gradcheck(lambda v: ad.sum_reduce(ad.power(ad.narrow(v, 1, 1, 2), 2.0)), [x])
    gradcheck(lambda v: ad.sum_reduce(ad.power(ad.take_rows(v, [2, 0, 2]), 2.0)), [x])
    gradcheck(lambda v: ad.sum_reduce(ad.power(ad.gather_flat(v, [3, 1, 1, 0]), 2.0)), [x])


def test_gradcheck_softmax_family():
    x = RNG.normal(size=(4, 3))
    w = RNG.uniform(0.1, 1.0, size=(4, 3))
    gradcheck(lambda v: ad.sum_reduce(ad.mul(ad.softmax(v), ad.constant(w))), [x])
    gradcheck(lambda v: ad.neg(ad.sum_reduce(ad.mul(ad.log_softmax(v), ad.constant(w)))), [x])
    gradcheck(lambda v: ad.sum_reduce(ad.logsumexp(v)), [x])
    # tie point: softmax gradient must stay exact when all logits are equal
    gradcheck(lambda v: ad.sum_reduce(ad.mul(ad.log_softmax(v), ad.constant(w[:1]))),
              [np.zeros((1, 3))])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_gradcheck_elementwise_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.3, 2.0, size=(rows, cols))
    b = rng.uniform(0.3, 2.0, size=(rows, cols))
    gradcheck(lambda x, y: ad.sum_reduce(ad.div(ad.mul(ad.exp(ad.neg(x)), y), ad.add(x, y))),
              [a, b])


def test_take_rows_unsampled_rows_get_exact_zero():
    x = ad.leaf(RNG.normal(size=(5, 3)), requires_grad=True)
    y = ad.sum_reduce(ad.power(ad.take_rows(x, [1, 3]), 2.0))
    (g,) = ad.gradient(y, [x])
    assert np.array_equal(g[0], np.zeros(3))
    assert np.array_equal(g[2], np.zeros(3))
    assert np.array_equal(g[4], np.zeros(3))
    assert np.any(g[1] != 0) and np.any(g[3] != 0)


# ---------------------------------------------------------------------------
# second order

def test_second_order_quadratic_hvp():
    n = 5
    a = RNG.normal(size=(n, n))
    a = (a + a.T) / 2
    v = RNG.normal(size=(n,))
    x = ad.leaf(RNG.normal(size=(n,)), requires_grad=True)
    row = ad.reshape(x, (1, n))
    y = ad.sum_reduce(ad.mul(ad.matmul(row, ad.constant(a)), row))
    gx = ad.gradient(y, [x], create_graph=True)[0]
    (hv,) = ad.gradient(ad.sum_reduce(ad.mul(gx, ad.constant(v))), [x])
    assert np.max(np.abs(hv - 2.0 * a @ v)) <= 1e-10


def test_gradient_through_two_gd_steps_matches_fd():
    # one linear layer, mse loss, two inner GD steps on two "distilled" points;
    # the outer loss gradient w.r.t. those points must match finite differences
    theta0 = RNG.normal(size=(2, 1))
    u0 = RNG.normal(size=(2, 2))
    targets_u = RNG.normal(size=(2, 1))
    d_x = RNG.normal(size=(6, 2))
    d_y = RNG.normal(size=(6, 1))
    alpha = 0.1

    def outer_loss(u_leaf):
        theta = ad.leaf(theta0, requires_grad=True)
        for _ in range(2):
            residual = ad.sub(ad.matmul(u_leaf, theta), ad.constant(targets_u))
            inner = ad.mean_reduce(ad.power(residual, 2.0))
            (g,) = ad.gradient(inner, [theta], create_graph=True)
            theta = ad.sub(theta, ad.scale(g, alpha))
        res = ad.sub(ad.matmul(ad.constant(d_x), theta), ad.constant(d_y))
        return ad.mean_reduce(ad.power(res, 2.0))

    u = ad.leaf(u0, requires_grad=True)
    # theta0 constant: mark trainable through a leaf so the inner grad flows
    theta_leaf = ad.leaf(theta0, requires_grad=True)

    def outer_with_tracked_theta(u_leaf):
        theta = theta_leaf
        for _ in range(2):
            residual = ad.sub(ad.matmul(u_leaf, theta), ad.constant(targets_u))
            inner = ad.mean_reduce(ad.power(residual, 2.0))
            (g,) = ad.gradient(inner, [theta], create_graph=True)
            theta = ad.sub(theta, ad.scale(g, alpha))
        res = ad.sub(ad.matmul(ad.constant(d_x), theta), ad.constant(d_y))
        return ad.mean_reduce(ad.power(res, 2.0))

    loss = outer_with_tracked_theta(u)
    (g_u,) = ad.gradient(loss, [u])

    def f(u_arr):
        return float(outer_loss(ad.leaf(u_arr, requires_grad=True)).data)

    fd = ad.finite_diff_gradient(f, u0)
    assert rel_err(g_u, fd) <= 1e-4


# ---------------------------------------------------------------------------
# graph lifetime, detach, modes

def test_backward_never_mutates_forward_values():
    x = ad.leaf(RNG.normal(size=(3,)), requires_grad=True)
    h = ad.tanh(x)
    y = ad.sum_reduce(ad.mul(h, h))
    snap = h.data.copy()
    ad.gradient(y, [x])
    assert np.array_equal(h.data, snap)


def test_backward_twice_without_create_graph_raises():
    x = ad.leaf(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.sum_reduce(ad.mul(x, x))
    ad.gradient(y, [x])
    with pytest.raises(ContractError):
        ad.gradient(y, [x])


def test_create_graph_allows_repeated_backward():
    x = ad.leaf(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.sum_reduce(ad.mul(x, x))
    g1 = ad.gradient(y, [x], create_graph=True)[0]
    g2 = ad.gradient(y, [x], create_graph=True)[0]
    assert np.array_equal(g1.data, g2.data)


def test_non_scalar_output_is_contract_error():
    x = ad.leaf(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(ContractError):
        ad.gradient(ad.mul(x, x), [x])


def test_detach_values_and_gradient_cut():
    x = ad.leaf(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    h = ad.mul(x, x)
    d = ad.detach(h)
    assert np.array_equal(d.data, h.data)
    assert not d.requires_grad
    y = ad.sum_reduce(ad.mul(d, ad.constant([1.0, 1.0, 1.0])))
    (g,) = ad.gradient(y, [x])
    assert np.array_equal(g, np.zeros(3))
    d2 = ad.detach(d)
    assert np.array_equal(d2.data, d.data)


def test_no_grad_suppresses_tracking():
    x = ad.leaf(np.array([1.0, 2.0]), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y.parents == ()


def test_requires_grad_false_never_accumulates():
    x = ad.leaf(np.array([1.0, 2.0]))  # requires_grad False
    y = ad.sum_reduce(ad.mul(x, x))
    (g,) = ad.gradient(y, [x])
    assert np.array_equal(g, np.zeros(2))


def test_count_nodes():
    x = ad.leaf(np.array([1.0]), requires_grad=True)
    y = ad.mul(ad.add(x, 1.0), x)
    # nodes: x, const 1, add, mul
    assert ad.count_nodes(y) == 4


# ---------------------------------------------------------------------------
# errors

def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))
    assert "add" in str(exc.value)
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_fancy_broadcasting_rejected():
    # dim-1 stretching inside elementwise ops is out of contract
    with pytest.raises(ShapeError):
        ad.mul(ad.constant(np.zeros((4, 3))), ad.constant(np.zeros((4, 1))))
    with pytest.raises(ShapeError):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


def test_debug_validation_domain_errors():
    ad.set_debug_validation(True)
    try:
        with pytest.raises(DomainError):
            ad.log(ad.constant([-1.0]))
        with pytest.raises(DomainError):
            ad.div(ad.constant([1.0]), ad.constant([0.0]))
        with pytest.raises(DomainError):
            ad.sqrt(ad.constant([-0.5]))
    finally:
        ad.set_debug_validation(False)
    # outside debug mode the same calls do not raise
    assert np.isnan(ad.log(ad.constant([-1.0])).data[0])
