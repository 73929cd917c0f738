import numpy as np
import pytest
from scipy import sparse

from whitneyrom import autodiff as ad
from whitneyrom.autodiff import (
    AutodiffError,
    Tape,
    add,
    concat,
    dropout,
    gelu,
    grad_check,
    layer_norm_lastdim,
    matmul,
    mul,
    reduce_sum,
    rspmm,
    scale,
    slice_,
    softmax_lastdim,
    softplus,
    spmm,
    sub,
    tanh,
    transpose,
)

RNG = np.random.default_rng(42)


def _weighted_scalar(y, w):
    return reduce_sum(mul(y, y.tape.constant(w)))


# ------------------------------------------------------------- simple values


def test_softmax_equal_logits():
    t = Tape()
    y = softmax_lastdim(t.tensor(np.array([0.0, 0.0])))
    assert np.allclose(y.data, [0.5, 0.5])


def test_layer_norm_constant_row_is_zero_before_affine():
    t = Tape()
    x = t.tensor(np.full((3, 8), 2.5))
    y = layer_norm_lastdim(x, t.tensor(np.ones(8)), t.tensor(np.zeros(8)))
    assert np.abs(y.data).max() <= 1e-12


def test_gelu_tanh_softplus_at_zero():
    t = Tape()
    assert gelu(t.tensor(np.array([0.0]))).data[0] == 0.0
    assert tanh(t.tensor(np.array([0.0]))).data[0] == 0.0
    assert abs(softplus(t.tensor(np.array([0.0]))).data[0] - np.log(2.0)) < 1e-15


def test_softplus_no_overflow():
    t = Tape()
    y = softplus(t.tensor(np.array([-800.0, 800.0])))
    assert np.isfinite(y.data).all()
    assert abs(y.data[1] - 800.0) < 1e-9


def test_square_derivative():
    t = Tape()
    x = t.tensor(np.array([3.0]), requires_grad=True)
    y = reduce_sum(mul(x, x))
    g = t.backward(y)[x.tid]
    assert np.allclose(g, [6.0])


def test_matmul_gradient_identity():
    t = Tape()
    a = t.tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    b = t.tensor(RNG.normal(size=(3, 5)), requires_grad=True)
    y = matmul(a, b)
    seed = RNG.normal(size=(4, 5))
    grads = t.backward(y, seed)
    assert np.allclose(grads[a.tid], seed @ b.data.T, atol=1e-13)
    assert np.allclose(grads[b.tid], a.data.T @ seed, atol=1e-13)


def test_dropout_mask_applied():
    t = Tape()
    x = t.tensor(np.ones((2, 4)), requires_grad=True)
    mask = np.array([[0.0, 2.0, 0.0, 2.0], [2.0, 0.0, 2.0, 0.0]])
    y = dropout(x, mask)
    assert np.allclose(y.data, mask)
    g = t.backward(reduce_sum(y))[x.tid]
    assert np.allclose(g, mask)


def test_concat_slice_transpose_round_trip():
    t = Tape()
    x = t.tensor(RNG.normal(size=(3, 6)), requires_grad=True)
    top = slice_(x, (slice(0, 2), slice(None)))
    bot = slice_(x, (slice(2, 3), slice(None)))
    y = concat([top, bot], axis=0)
    assert np.allclose(y.data, x.data)
    z = transpose(transpose(y))
    g = t.backward(reduce_sum(z))[x.tid]
    assert np.allclose(g, np.ones((3, 6)))


# ------------------------------------------------------- per-primitive FD


def _check(f, x0, tol=1e-6, h=1e-5, samples=25, seed=1):
    rep = grad_check(f, x0, h=h, samples=samples, seed=seed)
    assert rep.max_rel_err <= tol, f"rel err {rep.max_rel_err:.2e} at {rep.worst_index}"


def test_fd_elementwise_primitives():
    shapes = [(7,), (3, 5), (2, 3, 4)]
    for shape in shapes:
        x0 = RNG.normal(size=shape)
        w = RNG.normal(size=shape)
        for op in (gelu, tanh, softplus, softmax_lastdim):
            _check(lambda x, op=op, w=w: _weighted_scalar(op(x), w), x0)


def test_fd_add_sub_mul_broadcast():
    a0 = RNG.normal(size=(4, 5))
    b = RNG.normal(size=(1, 5))
    w = RNG.normal(size=(4, 5))
    for op in (add, sub, mul):
        _check(lambda x, op=op: _weighted_scalar(op(x, x.tape.constant(b)), w), a0)
        _check(lambda x, op=op: _weighted_scalar(op(x.tape.constant(w), slice_(x, (slice(0, 1), slice(None)))), w), a0)


def test_fd_matmul_scale_reduce():
    a0 = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(3, 6))
    w = RNG.normal(size=(4, 6))
    _check(lambda x: _weighted_scalar(matmul(x, x.tape.constant(b)), w), a0)
    _check(lambda x: reduce_sum(scale(x, 1.7)), a0)
    _check(lambda x: reduce_sum(reduce_sum(x, axis=1)), a0)
    _check(lambda x: reduce_sum(reduce_sum(x, axis=0, keepdims=True)), a0)


def test_fd_layer_norm():
    x0 = RNG.normal(size=(5, 8))
    w = RNG.normal(size=(5, 8))
    gamma = RNG.normal(size=8)
    beta = RNG.normal(size=8)
    _check(
        lambda x: _weighted_scalar(
            layer_norm_lastdim(x, x.tape.constant(gamma), x.tape.constant(beta)), w
        ),
        x0,
    )
    # also through gamma/beta
    x_const = RNG.normal(size=(5, 8))
    _check(
        lambda gb: _weighted_scalar(
            layer_norm_lastdim(
                gb.tape.constant(x_const),
                slice_(gb, (slice(0, 8),)),
                slice_(gb, (slice(8, 16),)),
            ),
            w,
        ),
        np.concatenate([gamma, beta]),
    )


def test_fd_softmax_composed_loss():
    x0 = RNG.normal(size=(6, 4))
    tgt = RNG.normal(size=(6, 4))

    def f(x):
        p = softmax_lastdim(x)
        d = sub(p, p.tape.constant(tgt))
        return reduce_sum(mul(d, d))

    _check(f, x0, tol=1e-6)


def test_fd_sparse_matmul():
    a = sparse.random(7, 5, density=0.4, random_state=3, format="csr")
    x0 = RNG.normal(size=(5, 4))
    w1 = RNG.normal(size=(7, 4))
    _check(lambda x: _weighted_scalar(spmm(a, x), w1), x0)
    x1 = RNG.normal(size=(3, 7))
    w2 = RNG.normal(size=(3, 5))
    _check(lambda x: _weighted_scalar(rspmm(x, a), w2), x1)


def test_fd_dropout_and_concat():
    x0 = RNG.normal(size=(4, 6))
    mask = (RNG.uniform(size=(4, 6)) > 0.3).astype(float) / 0.7
    w = RNG.normal(size=(8, 6))
    _check(lambda x: _weighted_scalar(concat([dropout(x, mask), x], axis=0), w), x0)


def test_quadratic_form_tight():
    a = RNG.normal(size=(6, 6))
    a = a + a.T

    def f(x):
        col = transpose(x)
        return reduce_sum(mul(x, transpose(matmul(x.tape.constant(a), col))))

    rep = grad_check(f, RNG.normal(size=(1, 6)), h=1e-5, samples=6, seed=2)
    assert rep.max_rel_err <= 1e-9


# ------------------------------------------------------------ infrastructure


def test_jacobian_extraction_matches_fd():
    n, m = 7, 5
    a = RNG.normal(size=(m, n))
    b = RNG.normal(size=(m, 1))

    def forward(xv):
        t = Tape()
        x = t.tensor(xv.reshape(n, 1), requires_grad=True)
        y = tanh(add(matmul(t.constant(a), x), t.constant(b)))
        return t, x, y

    x0 = RNG.normal(size=n)
    t, x, y = forward(x0)
    jac = np.empty((m, n))
    for i in range(m):
        seed = np.zeros((m, 1))
        seed[i] = 1.0
        jac[i] = t.backward(y, seed)[x.tid].ravel()
    h = 1e-6
    fd = np.empty((m, n))
    for j in range(n):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        fd[:, j] = (forward(xp)[2].data - forward(xm)[2].data).ravel() / (2 * h)
    rel = np.abs(jac - fd) / np.maximum(np.abs(fd).max(), 1e-12)
    assert rel.max() <= 1e-6


def test_backward_deterministic_bits():
    def run():
        t = Tape()
        x = t.tensor(np.linspace(-1, 1, 24).reshape(4, 6), requires_grad=True)
        y = reduce_sum(mul(softmax_lastdim(gelu(x)), t.constant(np.arange(24.0).reshape(4, 6))))
        g = t.backward(y)[x.tid]
        return y.data.tobytes(), g.tobytes()

    assert run() == run()


def test_broken_gradient_is_flagged():
    w = RNG.normal(size=6)

    def f(x):
        if x.requires_grad:
            # detached path: analytic gradient will be exactly zero
            return reduce_sum(mul(x.tape.constant(x.data), x.tape.constant(w)))
        return reduce_sum(mul(x, x.tape.constant(w)))

    rep = grad_check(f, RNG.normal(size=6), samples=6, seed=0)
    assert rep.max_rel_err > 0.99


def test_seed_errors():
    t = Tape()
    x = t.tensor(np.ones(3), requires_grad=True)
    y = scale(x, 2.0)
    with pytest.raises(AutodiffError):
        t.backward(x)  # leaf, not produced by a record
    with pytest.raises(AutodiffError):
        t.backward(y, np.ones(4))  # wrong seed shape
    with pytest.raises(AutodiffError):
        t.backward(y)  # non-scalar default seed


def test_nan_raises_immediately():
    t = Tape()
    x = t.tensor(np.array([np.inf, 0.0]))
    with np.errstate(all="ignore"), pytest.raises(AutodiffError, match="softmax"):
        softmax_lastdim(x)


def test_shape_mismatch_names_primitive():
    t = Tape()
    a = t.tensor(np.ones((2, 3)))
    b = t.tensor(np.ones((2, 3)))
    with pytest.raises(AutodiffError, match="matmul"):
        matmul(a, b)


def test_cross_tape_mixing_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.tensor(np.ones(3))
    b = t2.tensor(np.ones(3))
    with pytest.raises(AutodiffError):
        add(a, b)


def test_repeated_backward_independent():
    t = Tape()
    x = t.tensor(np.array([2.0]), requires_grad=True)
    y = mul(x, x)
    g1 = t.backward(y, np.ones(1))[x.tid]
    g2 = t.backward(y, np.ones(1))[x.tid]
    assert np.allclose(g1, g2)
    assert np.allclose(g1, [4.0])


def test_grad_check_h_bounds():
    with pytest.raises(ValueError):
        grad_check(lambda x: reduce_sum(x), np.ones(3), h=1e-2)
