import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment, linprog

from ot_adapt import _sinkhorn_py, ot_core
from ot_adapt.ot_core import (CostMatrix, exact_ot_oracle, exact_plan, plan_entropy, sinkhorn,
                              transport_cost)

try:
    from ot_adapt import _sinkhorn_ext
except ImportError:
    _sinkhorn_ext = None

KERNELS = [pytest.param(_sinkhorn_py, id="python")]
if _sinkhorn_ext is not None:
    KERNELS.append(pytest.param(_sinkhorn_ext, id="compiled"))

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


@pytest.fixture(params=KERNELS)
def kernel(request, monkeypatch):
    monkeypatch.setattr(ot_core, "_kernel", request.param)
    return request.param


def brute_force_lp(C, u1, u2):
    # independent of the package: plain LP over the transport polytope
    n, m = C.shape
    A = np.vstack([np.kron(np.eye(n), np.ones((1, m))), np.kron(np.ones((1, n)), np.eye(m))])
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([u1, u2]), bounds=(0, None), method="highs")
    return res.fun


# -- closed-form examples ----------------------------------------------------------------

def test_two_point_small_lambda_is_diagonal(kernel):
    plan = sinkhorn(CostMatrix(SWAP), lam=0.01)
    assert np.allclose(plan.coupling, [[0.5, 0.0], [0.0, 0.5]], atol=1e-6)
    assert transport_cost(plan, SWAP) <= 1e-3


def test_two_point_large_lambda_is_near_product(kernel):
    plan = sinkhorn(CostMatrix(SWAP), lam=100.0)
    # exact fixed point: P00 = 0.5 * e^(1/100) / (1 + e^(1/100))
    p00 = 0.5 * math.exp(0.01) / (1 + math.exp(0.01))
    assert plan.coupling[0, 0] == pytest.approx(p00, abs=1e-9)
    assert np.abs(plan.coupling - 0.25).max() < 2e-3


@pytest.mark.parametrize("seed", range(5))
def test_random_5x5_close_to_enumeration(kernel, seed):
    C = np.random.default_rng(seed).random((5, 5))
    best = min(np.mean([C[i, p[i]] for i in range(5)]) for p in itertools.permutations(range(5)))
    plan = sinkhorn(C, lam=0.01)
    # <C, P_lam> - OPT <= lam * (H(P_lam) - H(P_opt)) <= lam * log n for uniform marginals
    assert best - 1e-9 <= transport_cost(plan, C) <= best + 0.01 * math.log(5) + 1e-6


def test_oracle_two_point_examples():
    value, perm = exact_ot_oracle(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert value == 0.0 and list(perm) == [0, 1]
    value, perm = exact_ot_oracle(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert value == 0.0 and list(perm) == [1, 0]
    value, perm = exact_ot_oracle(np.array([[0.0, 2.0], [3.0, 0.0]]))
    assert value == 0.0 and list(perm) == [0, 1]


@pytest.mark.parametrize("seed", range(10))
def test_oracle_matches_hungarian(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    C = rng.random((n, n))
    r, c = linear_sum_assignment(C)
    value, perm = exact_ot_oracle(C)
    assert value == pytest.approx(C[r, c].mean(), abs=1e-12)
    assert sorted(perm) == list(range(n))


def test_oracle_rejects_bad_input():
    with pytest.raises(ValueError):
        exact_ot_oracle(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        exact_ot_oracle(np.zeros((9, 9)))


def test_transport_cost_examples():
    assert transport_cost(np.full((2, 2), 0.25), np.zeros((2, 2))) == 0.0
    assert transport_cost(np.diag([0.5, 0.5]), SWAP) == 0.0
    assert transport_cost(np.full((2, 2), 0.25), SWAP) == 0.5
    with pytest.raises(ValueError):
        transport_cost(np.full((2, 3), 1 / 6), SWAP)


def test_plan_entropy_examples():
    assert plan_entropy(np.full((2, 2), 0.25)) == pytest.approx(-1.3863, abs=1e-4)
    assert plan_entropy(np.diag([0.5, 0.5])) == pytest.approx(-0.6931, abs=1e-4)
    assert plan_entropy(np.array([[1.0, 0.0], [0.0, 0.0]])) == 0.0
    with pytest.raises(ValueError):
        plan_entropy(np.array([[np.nan]]))


# -- validation ---------------------------------------------------------------------------

@pytest.mark.parametrize("values", [[[0.0, np.inf]], [[0.0, np.nan]], [[-1.0, 0.0]], [1.0, 2.0]])
def test_cost_matrix_rejects_bad_values(values):
    with pytest.raises(ValueError):
        CostMatrix(np.array(values))


def test_sinkhorn_argument_errors():
    C = np.random.default_rng(0).random((3, 4))
    with pytest.raises(ValueError):
        sinkhorn(C, lam=0.0)
    with pytest.raises(ValueError):
        sinkhorn(C, tol=0.0)
    with pytest.raises(ValueError):
        sinkhorn(C, u1=np.full(4, 0.25))
    with pytest.raises(ValueError):
        sinkhorn(C, u2=np.array([0.5, 0.5, 0.5, -0.5]))
    with pytest.raises(ValueError):
        sinkhorn(np.array([[0.0, np.inf]]))


def test_non_convergence_is_reported_not_raised(kernel):
    C = np.random.default_rng(1).random((6, 6))
    plan = sinkhorn(C, lam=0.001, max_iter=1, eps_scaling=False)
    assert plan.iterations_used == 1
    assert plan.marginal_violation > 1e-6


# -- properties ---------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 7), m=st.integers(1, 7), seed=st.integers(0, 2**31 - 1),
       lam=st.sampled_from([0.01, 0.05, 0.3, 2.0]))
def test_feasibility_within_tol(n, m, seed, lam):
    rng = np.random.default_rng(seed)
    C = rng.random((n, m)) * rng.choice([0.1, 1.0, 5.0])
    u1 = rng.random(n) + 0.05
    u2 = rng.random(m) + 0.05
    u1, u2 = u1 / u1.sum(), u2 / u2.sum()
    plan = sinkhorn(C, u1, u2, lam=lam)
    assert plan.marginal_violation <= 1e-6
    assert np.abs(plan.coupling.sum(1) - u1).max() <= 1e-6 + 1e-12
    assert np.abs(plan.coupling.sum(0) - u2).max() <= 1e-6 + 1e-12
    assert np.all(plan.coupling >= 0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 6), seed=st.integers(0, 2**31 - 1))
def test_matches_lp_optimum_as_lambda_shrinks(n, seed):
    rng = np.random.default_rng(seed)
    C = rng.random((n, n + 1))
    u1, u2 = np.full(n, 1 / n), np.full(n + 1, 1 / (n + 1))
    opt = brute_force_lp(C, u1, u2)
    plan = sinkhorn(C, u1, u2, lam=0.001)
    # entropic gap is at most lam * log(n * m)
    assert opt - 1e-6 <= transport_cost(plan, C) <= opt + 0.001 * math.log(n * (n + 1)) + 1e-6


def test_entropy_monotone_in_lambda(kernel):
    C = np.random.default_rng(7).random((6, 6))
    shannon = [-plan_entropy(sinkhorn(C, lam=lam)) for lam in (0.01, 0.1, 1.0, 10.0, 100.0)]
    assert all(b >= a - 1e-9 for a, b in zip(shannon, shannon[1:]))


def test_row_permutation_equivariance_is_bit_exact(kernel):
    rng = np.random.default_rng(11)
    C = rng.random((9, 7))
    u1 = rng.random(9) + 0.1
    u1 /= u1.sum()
    perm = rng.permutation(9)
    a = sinkhorn(C, u1, lam=0.05).coupling
    b = sinkhorn(C[perm], u1[perm], lam=0.05).coupling
    assert np.array_equal(a[perm], b)


def test_column_permutation_equivariance(kernel):
    rng = np.random.default_rng(12)
    C = rng.random((5, 8))
    perm = rng.permutation(8)
    a = sinkhorn(C, lam=0.05).coupling
    b = sinkhorn(C[:, perm], lam=0.05).coupling
    assert np.allclose(a[:, perm], b, atol=1e-15, rtol=1e-12)


def test_determinism_bit_exact(kernel):
    C = np.random.default_rng(3).random((16, 12))
    a, b = sinkhorn(C, lam=0.02), sinkhorn(C.copy(), lam=0.02)
    assert np.array_equal(a.coupling, b.coupling)
    assert a.iterations_used == b.iterations_used


@pytest.mark.skipif(_sinkhorn_ext is None, reason="compiled extension not built")
@pytest.mark.parametrize("shape", [(1, 1), (3, 5), (16, 16), (40, 23)])
def test_backends_agree(shape):
    rng = np.random.default_rng(sum(shape))
    C = rng.random(shape)
    la = np.log(np.full(shape[0], 1 / shape[0]))
    lb = np.log(np.full(shape[1], 1 / shape[1]))
    fp, gp, ip, rp = _sinkhorn_py.sinkhorn_log(C, la, lb, 0.05, 1e-9, 5000)
    fc, gc, ic, rc = _sinkhorn_ext.sinkhorn_log(C, la, lb, 0.05, 1e-9, 5000)
    assert ip == ic
    assert np.allclose(fp, fc, atol=1e-12) and np.allclose(gp, gc, atol=1e-12)


def test_backend_flag_is_reported():
    assert ot_core.BACKEND in ("compiled", "python")
    assert sinkhorn(SWAP).solver == f"sinkhorn-{ot_core.BACKEND}"


# -- exact plans --------------------------------------------------------------------------

def test_exact_plan_square_small_and_large():
    rng = np.random.default_rng(4)
    for n, solver in ((5, "exact-enumeration"), (12, "exact-assignment")):
        C = rng.random((n, n))
        plan = exact_plan(C)
        r, c = linear_sum_assignment(C)
        assert plan.solver == solver
        assert transport_cost(plan, C) == pytest.approx(C[r, c].mean(), abs=1e-12)
        assert np.allclose(plan.coupling.sum(0), 1 / n) and np.allclose(plan.coupling.sum(1), 1 / n)


def test_exact_plan_rectangular_uses_lp():
    rng = np.random.default_rng(6)
    C = rng.random((4, 7))
    plan = exact_plan(C)
    assert plan.solver == "exact-lp"
    assert plan.marginal_violation <= 1e-9
    assert transport_cost(plan, C) == pytest.approx(brute_force_lp(C, np.full(4, 0.25), np.full(7, 1 / 7)),
                                                    abs=1e-9)
