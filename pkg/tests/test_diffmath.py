import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import grad_check
from deepnrsfm.diffmath import (Tape, Tensor, add, checked_mode, concat, kron_apply_t,
                                kron_expand, masked_frobenius, matmul, mean, mul, neg, relu,
                                reshape, row_select, scale, softplus, sub, sum_all, tensor,
                                transpose)
from deepnrsfm.errors import NonFiniteError, ShapeError


def u(rng, *shape):
    return rng.uniform(-2, 2, shape)


def test_matmul_identity_and_annihilator(rng):
    A = u(rng, 3, 4)
    assert np.array_equal(matmul(np.eye(3), A).data, A)
    assert np.array_equal(matmul(A, np.zeros((4, 2))).data, np.zeros((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_quadratic_gradient(rng):
    A, x = u(rng, 5, 3), u(rng, 3, 1)
    err = grad_check(lambda a, xx: sum_all(mul(matmul(a, xx), matmul(a, xx))), [A, x])
    assert err < 1e-6
    # closed form for d|Ax|^2/dx = 2 A^T A x
    xt = tensor(x, requires_grad=True)
    with Tape() as tape:
        y = matmul(A, xt)
        out = sum_all(mul(y, y))
    g, = tape.gradient(out, [xt])
    assert np.allclose(g, 2 * A.T @ A @ x, rtol=1e-12)


def test_batched_matmul_gradient_broadcasts(rng):
    A, B = u(rng, 4, 3, 2), u(rng, 2, 5)
    assert grad_check(lambda a, b: sum_all(mul(matmul(a, b), matmul(a, b))), [A, B]) < 1e-6


def test_relu_values():
    assert relu(np.array([[-1.0, 2.0]])).data.tolist() == [[0.0, 2.0]]


def test_masked_frobenius_zero_mask(rng):
    r = u(rng, 6, 2)
    assert float(masked_frobenius(r, np.zeros((6, 1))).data) == 0.0


def test_masked_frobenius_gradient(rng):
    r = u(rng, 3, 6, 2)
    m = (rng.random((3, 6, 1)) > 0.4).astype(float)
    m[:, 0] = 1
    assert grad_check(lambda x: sum_all(masked_frobenius(x, m)), [r]) < 1e-6


def test_masked_frobenius_zero_residual_has_zero_gradient():
    x = tensor(np.zeros((4, 2)), requires_grad=True)
    with Tape() as tape:
        out = masked_frobenius(x, np.ones((4, 1)))
    assert np.array_equal(tape.gradient(out, [x])[0], np.zeros((4, 2)))


def test_kron_expand_examples(rng):
    assert np.array_equal(kron_expand(np.array([[2.0]])).data, np.diag([2.0, 2.0, 2.0]))
    assert np.array_equal(kron_expand(np.eye(4)).data, np.eye(12))
    d = u(rng, 2, 3)
    explicit = np.zeros((6, 9))
    for i in range(2):
        for j in range(3):
            explicit[3 * i:3 * i + 3, 3 * j:3 * j + 3] = d[i, j] * np.eye(3)
    assert np.array_equal(kron_expand(d).data, explicit)


def test_kron_apply_t_matches_explicit(rng):
    d, psi = u(rng, 5, 3), u(rng, 7, 15, 2)
    explicit = np.kron(d, np.eye(3)).T @ psi
    assert np.allclose(kron_apply_t(d, psi).data, explicit, atol=1e-13)


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", lambda a, b: sum_all(mul(add(a, b), add(a, b))), [(3, 4), (1, 4)]),
    ("sub", lambda a, b: sum_all(mul(sub(a, b), a)), [(3, 4), (3, 4)]),
    ("neg", lambda a: sum_all(mul(neg(a), a)), [(2, 3)]),
    ("scale", lambda a: sum_all(mul(scale(a, 2.5), a)), [(2, 3)]),
    ("mul", lambda a, b: sum_all(mul(a, b)), [(2, 3), (2, 3)]),
    ("relu", lambda a: sum_all(mul(relu(a), a)), [(4, 5)]),
    ("softplus", lambda a: sum_all(mul(softplus(a), a)), [(4,)]),
    ("reshape", lambda a: sum_all(mul(reshape(a, (6, 2)), reshape(a, (6, 2)))), [(3, 4)]),
    ("transpose", lambda a, b: sum_all(matmul(transpose(a), b)), [(3, 4), (3, 2)]),
    ("row_select", lambda a: sum_all(mul(row_select(a, [0, 2, 2]), row_select(a, [1, 0, 2]))),
     [(3, 2)]),
    ("concat", lambda a, b: sum_all(mul(concat([a, b], -1), concat([b, a], -1))), [(3, 2), (3, 2)]),
    ("mean", lambda a: mul(mean(a), mean(a)), [(5,)]),
    ("kron_expand", lambda d, x: sum_all(mul(matmul(kron_expand(d), x), matmul(kron_expand(d), x))),
     [(2, 3), (9, 2)]),
    ("kron_apply_t", lambda d, x: sum_all(mul(kron_apply_t(d, x), kron_apply_t(d, x))),
     [(4, 2), (2, 12, 3)]),
])
def test_op_gradients(rng, name, fn, shapes):
    arrs = [u(rng, *s) for s in shapes]
    if name == "relu":          # keep entries away from the kink
        arrs = [np.where(np.abs(a) < 0.1, 0.5, a) for a in arrs]
    assert grad_check(fn, arrs) < 1e-4


def test_linearity_of_accumulation(rng):
    A = u(rng, 3, 3)

    def f1(a):
        return sum_all(mul(a, a))

    def f2(a):
        return sum_all(relu(a))

    ts = tensor(A, requires_grad=True)
    with Tape() as tape:
        out = add(f1(ts), f2(ts))
    g_sum, = tape.gradient(out, [ts])
    parts = []
    for f in (f1, f2):
        t = tensor(A, requires_grad=True)
        with Tape() as tp:
            o = f(t)
        parts.append(tp.gradient(o, [t])[0])
    assert np.allclose(g_sum, parts[0] + parts[1], rtol=1e-14)


def test_reverse_order_and_determinism(rng):
    A = tensor(u(rng, 4, 4), requires_grad=True)
    with Tape() as tape:
        out = sum_all(relu(matmul(A, transpose(A))))
    assert [n.name for n in tape.nodes] == ["transpose", "matmul", "relu", "sum"]
    visited = []
    for node in tape.nodes:
        inner = node.backward
        node.backward = lambda g, inner=inner, name=node.name: (visited.append(name), inner(g))[1]
    g1 = tape.gradient(out, [A])[0]
    assert visited == ["sum", "relu", "matmul", "transpose"]
    g2 = tape.gradient(out, [A])[0]
    assert np.array_equal(g1, g2)


def test_unused_source_gets_zero(rng):
    a = tensor(u(rng, 2, 2), requires_grad=True)
    b = tensor(u(rng, 3), requires_grad=True)
    with Tape() as tape:
        out = sum_all(a)
    ga, gb = tape.gradient(out, [a, b])
    assert np.array_equal(ga, np.ones((2, 2)))
    assert np.array_equal(gb, np.zeros(3))


def test_tensor_is_immutable_and_checked(rng):
    raw = u(rng, 2, 2)
    t = Tensor(raw)
    with pytest.raises(ValueError):
        t.data[0, 0] = 1.0
    raw[0, 0] = 7.0                  # the caller's array stays writable
    with checked_mode():
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)),
       arrays(np.float64, (4, 2), elements=st.floats(-2, 2)))
def test_matmul_gradient_property(a, b):
    err = grad_check(lambda x, y: sum_all(mul(matmul(x, y), matmul(x, y))), [a, b])
    scale_ = np.abs(a).max() * np.abs(b).max()
    assert err < 1e-4 or scale_ < 1e-3
