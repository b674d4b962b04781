import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdsp_moe.conflict import LaggedGradStore, conflict_matrix, conflict_score, intersect, topology_penalty
from cdsp_moe.linalg import Rng
from cdsp_moe.model import ConsistencyError, ExpertGrad, cross_entropy
from cdsp_moe.trainer import run_synthetic_pruning

from helpers import tiny_case


def _rec(subspace, u_cols, v_rows=None):
    """Expert record with one-row U block and one-column V block."""
    u = np.atleast_2d(np.asarray(u_cols, dtype=float))
    v = np.zeros((u.shape[1], 1)) if v_rows is None else np.asarray(v_rows, dtype=float).reshape(-1, 1)
    return ExpertGrad(np.asarray(subspace), u, v)


def test_intersect_examples():
    assert list(intersect([0, 1, 2], [2, 3])) == [2]
    assert intersect([0, 1], [4, 5]).size == 0
    assert list(intersect([5, 1, 3], [1, 3, 5])) == [1, 3, 5]


def test_score_examples():
    store = LaggedGradStore.capture(0, {0: _rec([3, 4], [1, 1]), 1: _rec([3, 4], [-1, 0]),
                                        2: _rec([3, 4], [-1, -1]), 3: _rec([3, 4], [2, 2])})
    assert conflict_score(store, 0, 1) == pytest.approx(0.7071067761865476, rel=1e-12)
    assert conflict_score(store, 0, 2) == pytest.approx(1.0, abs=1e-8)
    assert conflict_score(store, 0, 3) == 0.0
    assert conflict_score(store, 0, 7) == 0.0


def test_score_uses_only_shared_columns_in_matching_order():
    a = _rec([0, 2, 5], [9.0, 1.0, 3.0], [0.0, 2.0, 0.0])
    b = _rec([2, 5, 8], [-1.0, 0.0, 9.0], [-2.0, 0.0, 7.0])
    store = LaggedGradStore.capture(0, {0: a, 1: b})
    # shared columns 2 and 5: [u2, u5, v2, v5] = [1, 3, 2, 0] vs [-1, 0, -2, 0]
    x, y = np.array([1.0, 3.0, 2.0, 0.0]), np.array([-1.0, 0.0, -2.0, 0.0])
    expected = -(x @ y) / (np.linalg.norm(x) * np.linalg.norm(y) + 1e-8)
    assert conflict_score(store, 0, 1) == pytest.approx(expected, rel=1e-14)


def test_disjoint_subspaces_short_circuit():
    store = LaggedGradStore.capture(0, {0: _rec([0, 1], [1e6, 1e6]), 1: _rec([2, 3], [-1e6, -1e6])})
    assert conflict_score(store, 0, 1) == 0.0


def test_single_expert_store_gives_zero_matrix():
    assert not conflict_matrix(LaggedGradStore.capture(0, {1: _rec([0], [1.0])}), 4).any()
    assert not conflict_matrix(LaggedGradStore(), 4).any()


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_matrix_symmetric_bounded(seed):
    r = Rng(seed)
    recs = {}
    for i in range(4):
        s = np.sort(r.permutation(8)[:4])
        recs[i] = ExpertGrad(s, r.normal(size=(3, 4)), r.normal(size=(4, 3)))
    c = conflict_matrix(LaggedGradStore.capture(1, recs), 5)
    assert np.array_equal(c, c.T)
    assert np.all(np.diag(c) == 0) and np.all((c >= 0) & (c <= 1))


def test_lagged_store_is_immune_to_later_updates():
    model, x, tasks, labels = tiny_case(3)
    out, tr = model.forward(x, tasks)
    grads = model.capture_expert_grads(tr, cross_entropy(out, labels)[1])
    store = LaggedGradStore.capture(0, grads)
    before = conflict_matrix(store, 4)
    for g in grads.values():
        g.dU[...] = Rng(0).normal(size=g.dU.shape)
    for p in model.params.values():
        p += 1.0
    model.params["A"] *= -1
    assert np.array_equal(conflict_matrix(store, 4), before)
    rec = next(iter(store.records.values()))
    with pytest.raises(ValueError):
        rec.dU[0, 0] = 1.0


def test_synthetic_fixture_conflict_appears_within_five_steps():
    run = run_synthetic_pruning(steps=6, seed=0)
    assert run["conflict"][0] == 0.0
    assert run["conflict"][1:6].max() > 0.9


def test_penalty_examples():
    z = np.zeros((3, 3))
    loss, grad = topology_penalty(Rng(0).normal(size=(3, 3)), z, 10.0, 0.0)
    assert loss == 0.0 and not grad.any()
    A = np.array([[4.0, -0.3], [0.0, 2.0]])
    C = np.array([[0.0, 0.5], [0.25, 0.0]])
    loss, grad = topology_penalty(A, C, 10.0, 1e-4)
    assert grad[0, 1] == 5.0 + 1e-4 * -1.0
    assert grad[1, 0] == 2.5
    assert grad[0, 0] == 1e-4 and grad[1, 1] == 1e-4
    assert loss == pytest.approx(10.0 * (-0.3 * 0.5) + 1e-4 * 6.3, rel=1e-15)


@given(st.floats(-50, 50))
def test_off_diagonal_gradient_is_independent_of_logit(a):
    A = np.full((2, 2), a)
    C = np.array([[0.0, 0.3], [0.3, 0.0]])
    assert topology_penalty(A, C, 10.0, 0.0)[1][0, 1] == 10.0 * 0.3


def test_penalty_matches_finite_differences():
    r = Rng(4)
    A = r.normal(size=(4, 4))
    C = np.abs(r.normal(size=(4, 4)))
    C = np.minimum((C + C.T) / 4, 1.0)
    np.fill_diagonal(C, 0.0)
    _, grad = topology_penalty(A, C, 10.0, 1e-4)
    # the penalty is piecewise linear, so a wide step is exact while no entry changes sign
    h = 1e-3
    assert np.abs(A).min() > h
    for idx in np.ndindex(A.shape):
        ap, am = A.copy(), A.copy()
        ap[idx] += h
        am[idx] -= h
        num = (topology_penalty(ap, C, 10.0, 1e-4)[0] - topology_penalty(am, C, 10.0, 1e-4)[0]) / (2 * h)
        assert abs(num - grad[idx]) < 1e-10


def test_penalty_shape_mismatch():
    with pytest.raises(ConsistencyError):
        topology_penalty(np.zeros((3, 3)), np.zeros((2, 2)), 1.0, 0.0)
