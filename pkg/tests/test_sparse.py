import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import grad_check
from deepnrsfm.diffmath import Tape, mul, sum_all, tensor
from deepnrsfm.sparse import (block_norms, bst, ista_step, objective, solve_block_sparse)


def golden_prox(block, lam, iters=200):
    """argmin_z 0.5|b - z|^2 + lam |z| along z = c b, c in [0, 1], by golden section."""
    n = np.linalg.norm(block)

    def f(c):
        return 0.5 * (1 - c) ** 2 * n * n + lam * c * n

    lo, hi = 0.0, 1.0
    phi = (np.sqrt(5) - 1) / 2
    a, b = hi - phi * (hi - lo), lo + phi * (hi - lo)
    for _ in range(iters):
        if f(a) < f(b):
            hi, b = b, a
            a = hi - phi * (hi - lo)
        else:
            lo, a = a, b
            b = lo + phi * (hi - lo)
    c = 0.5 * (lo + hi)
    return c * block


def test_bst_examples():
    assert np.array_equal(bst(np.zeros((6, 2)), [1.0, 2.0]), np.zeros((6, 2)))
    block = np.zeros((3, 2))
    block[0] = [3, 4]
    assert np.allclose(bst(block, [1.0]), 0.8 * block, rtol=1e-15)


@pytest.mark.parametrize("a", [2, 3])
def test_bst_matches_golden_section(rng, a, backend):
    for _ in range(200):
        blk = rng.standard_normal((3, a)) * rng.uniform(0.1, 3)
        lam = rng.uniform(0, 2 * np.linalg.norm(blk))
        assert np.allclose(bst(blk, [lam]), golden_prox(blk, lam), atol=1e-8)


def test_bst_gradients(rng, backend):
    x = rng.standard_normal((4, 9, 2)) * 2
    lam = np.array([0.1, 0.2, 0.05])
    assert grad_check(lambda xx, ll: sum_all(mul(bst(xx, ll), bst(xx, ll))), [x, lam]) < 1e-4


def test_bst_inactive_block_has_zero_gradient():
    x = tensor(np.full((3, 2), 0.1), requires_grad=True)
    lam = tensor(np.array([5.0]), requires_grad=True)
    with Tape() as tape:
        out = sum_all(bst(x, lam))
    gx, gl = tape.gradient(out, [x, lam])
    assert not gx.any() and not gl.any()
    assert not tape.find("bst")[0].meta["active"].any()


def test_bst_strongly_active_is_near_identity_and_lambda_grad(rng):
    blk = rng.standard_normal((3, 3)) * 100
    x = tensor(blk, requires_grad=True)
    lam = tensor(np.array([1e-3]), requires_grad=True)
    g_up = rng.standard_normal((3, 3))
    with Tape() as tape:
        out = sum_all(mul(bst(x, lam), g_up))
    gx, gl = tape.gradient(out, [x, lam])
    assert np.allclose(gx, g_up, rtol=1e-4)
    assert np.isclose(gl[0], -np.sum(g_up * blk) / np.linalg.norm(blk), rtol=1e-12)


def test_bst_boundary_is_inactive():
    blk = np.zeros((3, 2))
    blk[0, 0] = 2.0
    x = tensor(blk, requires_grad=True)
    with Tape() as tape:
        out = sum_all(bst(x, [2.0]))
    assert not tape.gradient(out, [x])[0].any()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (9, 2), elements=st.floats(-3, 3)),
       arrays(np.float64, (9, 2), elements=st.floats(-3, 3)),
       arrays(np.float64, (3,), elements=st.floats(0, 2)))
def test_bst_nonexpansive(x, y, lam):
    assert np.linalg.norm(bst(x, lam) - bst(y, lam)) <= np.linalg.norm(x - y) + 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-3, 3)))
def test_bst_zero_threshold_is_identity(x):
    assert np.array_equal(bst(x, [0.0, 0.0]), x)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (9, 2), elements=st.floats(-3, 3)),
       arrays(np.float64, (3,), elements=st.floats(0, 2)),
       st.integers(0, 2), st.floats(0, 2))
def test_bst_monotone_in_threshold(x, lam, k, extra):
    bigger = lam.copy()
    bigger[k] += extra
    assert block_norms(bst(x, bigger))[k] <= block_norms(bst(x, lam))[k] + 1e-12


def test_ista_step_from_zero_is_bst(rng):
    D = rng.standard_normal((8, 9))
    X = rng.standard_normal((8, 2))
    lam = np.array([0.3, 0.1, 0.2])
    assert np.allclose(ista_step(np.zeros((9, 2)), X, D, lam), bst(D.T @ X, lam), atol=1e-14)


def test_ista_orthonormal_solves_in_one_step(rng):
    D, _ = np.linalg.qr(rng.standard_normal((9, 9)))
    psi = rng.standard_normal((9, 3))
    out = ista_step(rng.standard_normal((9, 3)), D @ psi, D, np.zeros(3))
    assert np.allclose(out, psi, atol=1e-12)


def test_ista_objective_non_increasing(rng):
    for _ in range(10):
        D = rng.standard_normal((10, 12))
        X = rng.standard_normal((10, 2))
        lam = rng.uniform(0, 1, 4)
        alpha = 1 / np.linalg.norm(D.T @ D, 2)
        psi = np.zeros((12, 2))
        f = objective(psi, X, D, lam)
        for _ in range(100):
            psi = ista_step(psi, X, D, lam, alpha)
            f_new = objective(psi, X, D, lam)
            assert f_new <= f + 1e-12
            f = f_new


def enumerate_single_support(X, D, lam, K, a):
    """Best objective over codes supported on one block (exact per-support solve)."""
    best = objective(np.zeros((3 * K, a)), X, D, lam)
    for k in range(K):
        Dk = D[:, 3 * k:3 * k + 3]
        # minimise 0.5|X - Dk Z|^2 + lam_k |Z|_F: prox-gradient on the 3x a subproblem
        res = solve_block_sparse(X, Dk, lam[k:k + 1], max_iter=20000, tol=1e-15)
        psi = np.zeros((3 * K, a))
        psi[3 * k:3 * k + 3] = res.psi
        best = min(best, objective(psi, X, D, lam))
    return best


@pytest.mark.parametrize("a", [2, 3])
def test_solver_matches_support_enumeration(rng, a):
    K = 6
    for _ in range(5):
        D = rng.standard_normal((30, 3 * K)) / np.sqrt(30)
        truth = np.zeros((3 * K, a))
        k = rng.integers(K)
        truth[3 * k:3 * k + 3] = rng.standard_normal((3, a)) * 2
        X = D @ truth
        lam = np.full(K, 0.05)
        res = solve_block_sparse(X, D, lam, max_iter=20000, tol=1e-15)
        assert set(np.flatnonzero(block_norms(res.psi) > 1e-8)) == {k}
        assert abs(res.objective - enumerate_single_support(X, D, lam, K, a)) < 1e-6


def test_solver_edge_cases(rng):
    D = rng.standard_normal((6, 6))
    assert not solve_block_sparse(np.zeros((6, 2)), D, [0.1, 0.1]).psi.any()
    X = rng.standard_normal((6, 2))
    assert not solve_block_sparse(X, D, [1e6, 1e6]).psi.any()
    short = solve_block_sparse(X, D, [0.01, 0.01], max_iter=2, tol=0.0)
    assert not short.converged and short.iterations == 2


def test_scalar_blocks_reduce_to_soft_thresholding(rng):
    D = np.eye(5)
    X = rng.standard_normal((5, 1))
    lam = np.full(5, 0.4)
    res = solve_block_sparse(X, D, lam, block_rows=1, tol=1e-15)
    soft = np.sign(X) * np.maximum(np.abs(X) - 0.4, 0)
    assert np.allclose(res.psi, soft, atol=1e-12)
    D = rng.standard_normal((8, 5))
    res = solve_block_sparse(X := rng.standard_normal((8, 1)), D, lam, block_rows=1,
                             max_iter=50000, tol=1e-16)
    # optimality: |D^T r| <= lam where psi = 0, and = lam sign(psi) on the support
    grad = D.T @ (X - D @ res.psi)
    on = np.abs(res.psi[:, 0]) > 1e-9
    assert np.allclose(grad[on, 0], 0.4 * np.sign(res.psi[on, 0]), atol=1e-6)
    assert np.all(np.abs(grad[~on, 0]) <= 0.4 + 1e-6)
