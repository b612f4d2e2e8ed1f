import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incr_gcf.errors import StaleForwardError, ValidationError
from incr_gcf.graph import build_graph
from incr_gcf.model import FinalEmbeddings, forward, init_model
from incr_gcf.objective import (
    KdBatch,
    TripletBatch,
    backward,
    bpr_loss,
    kd_loss,
    l2_term,
    softplus,
    total_loss,
)

from .oracles import finite_difference_grads, random_instance, reachable_rows, relative_error


def _final(users, items):
    users, items = np.asarray(users, float), np.asarray(items, float)
    return FinalEmbeddings(users, items, [users], [items])


def _diff_final(deltas):
    """One user with unit vector; item 2k scores delta_k, item 2k+1 scores 0."""
    items = []
    for d in deltas:
        items += [[d], [0.0]]
    return _final([[1.0]], items)


def test_bpr_equal_scores_is_ln2():
    f = _final([[1.0, 2.0]], [[0.5, 0.5], [0.5, 0.5]])
    assert bpr_loss(TripletBatch([0], [0], [1]), f) == pytest.approx(math.log(2), abs=1e-12)


def test_bpr_saturates():
    f = _diff_final([30.0])
    assert bpr_loss(TripletBatch([0], [0], [1]), f) < 1e-12


def test_bpr_two_triplets():
    f = _diff_final([1.0, -1.0])
    loss = bpr_loss(TripletBatch([0, 0], [0, 2], [1, 3]), f)
    # mean(softplus(-1), softplus(1)) = mean(0.31326..., 1.31326...)
    assert loss == pytest.approx(0.8132616875182228, abs=1e-12)


def test_softplus_stable_to_500():
    xs = np.array([-500.0, -30.0, 0.0, 30.0, 500.0])
    np.testing.assert_allclose(softplus(xs), np.logaddexp(0.0, xs), rtol=1e-15, atol=0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 5))
def test_bpr_positive_and_monotone(d, step):
    lo = bpr_loss(TripletBatch([0], [0], [1]), _diff_final([d]))
    hi = bpr_loss(TripletBatch([0], [0], [1]), _diff_final([d + step]))
    assert lo > 0
    assert hi <= lo


def test_kd_examples():
    f = _final([[1.0, 0.0]], [[2.0, 0.0], [0.0, 1.0]])
    assert kd_loss(KdBatch([0, 0], [0, 1], [2.0, 0.0]), f) == 0.0
    assert kd_loss(KdBatch([0], [1], [1.0]), f) == 1.0
    assert kd_loss(KdBatch([0, 0], [0, 1], [2.5, -0.5]), f) == 0.25


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5))
def test_kd_nonnegative_zero_iff_equal(teacher):
    f = _final([[1.0]], [[t] for t in teacher])
    idx = list(range(len(teacher)))
    assert kd_loss(KdBatch([0] * len(idx), idx, teacher), f) == 0.0
    shifted = [t + 0.5 for t in teacher]
    assert kd_loss(KdBatch([0] * len(idx), idx, shifted), f) > 0.0


def test_l2_examples():
    m = init_model(2, 3, dim=2, dtype=np.float64)
    m.user_emb0[:] = 0
    m.item_emb0[:] = 0
    assert l2_term(TripletBatch([0], [0], [1]), m) == 0.0
    m.user_emb0[0] = [1.0, 0.0]
    m.item_emb0[0] = [0.0, 1.0]
    m.item_emb0[1] = [1.0, 0.0]
    assert l2_term(TripletBatch([0], [0], [1]), m) == 1.5


def test_l2_matches_loop():
    m = init_model(4, 5, dim=2, seed=2, dtype=np.float64)
    b = TripletBatch([0, 3, 3], [1, 4, 0], [2, 2, 1])
    want = sum(
        sum(x * x for x in m.user_emb0[u]) + sum(x * x for x in m.item_emb0[i]) + sum(x * x for x in m.item_emb0[j])
        for u, i, j in zip(b.users, b.pos_items, b.neg_items)
    ) / 2 / 3
    assert l2_term(b, m) == pytest.approx(want, rel=1e-13)


def test_empty_batches_rejected():
    f = _final([[1.0]], [[1.0], [2.0]])
    m = init_model(1, 2, dim=1)
    with pytest.raises(ValidationError):
        bpr_loss(TripletBatch([], [], []), f)
    with pytest.raises(ValidationError):
        kd_loss(KdBatch([], [], []), f)
    with pytest.raises(ValidationError):
        l2_term(TripletBatch([], [], []), m)


def test_triplet_rejects_identical_items():
    with pytest.raises(ValidationError):
        TripletBatch([0], [1], [1])


def test_total_loss():
    assert total_loss(0.7, 0.2, 10.0, 0.0, 0.0) == 0.7
    assert total_loss(0.7, 0.2, 10.0, 0.01, 1e-3) == pytest.approx(0.712, abs=1e-15)
    # lambda1=1, lambda2=1e-3
    assert total_loss(0.5, 0.25, 3.0, 1.0, 1e-3) == pytest.approx(0.5 + 0.25 + 3e-3, abs=1e-12)
    with pytest.raises(ValidationError):
        total_loss(1, 1, 1, -1, 0)


def test_saturated_gradient_vanishes():
    m = init_model(1, 2, dim=1, n_layers=0, dtype=np.float64)
    m.user_emb0[:] = [[1.0]]
    m.item_emb0[:] = [[40.0], [-40.0]]
    g = build_graph([(0, 0)], 1, 2)
    grads = backward(m, g, forward(m, g), TripletBatch([0], [0], [1]))
    assert np.sqrt((grads.user_grad**2).sum() + (grads.item_grad**2).sum()) < 1e-8


def test_k0_matches_matrix_factorization_gradient():
    m = init_model(2, 3, dim=3, n_layers=0, seed=4, dtype=np.float64)
    g = build_graph([(0, 0), (1, 2)], 2, 3)
    u, i, j = 1, 2, 0
    grads = backward(m, g, forward(m, g), TripletBatch([u], [i], [j]))
    eu, ei, ej = m.user_emb0[u], m.item_emb0[i], m.item_emb0[j]
    s = 1.0 / (1.0 + math.exp(eu @ ei - eu @ ej))  # sigma(-delta)
    np.testing.assert_allclose(grads.user_grad[u], -s * (ei - ej), rtol=1e-13)
    np.testing.assert_allclose(grads.item_grad[i], -s * eu, rtol=1e-13)
    np.testing.assert_allclose(grads.item_grad[j], s * eu, rtol=1e-13)
    assert not grads.user_grad[0].any() and not grads.item_grad[1].any()


def test_k0_gradient_symbolic():
    sympy = pytest.importorskip("sympy")
    eu = sympy.symbols("u0:2")
    ei = sympy.symbols("i0:2")
    ej = sympy.symbols("j0:2")
    delta = sum(a * b for a, b in zip(eu, ei)) - sum(a * b for a, b in zip(eu, ej))
    loss = sympy.log(1 + sympy.exp(-delta))

    m = init_model(1, 2, dim=2, n_layers=0, seed=3, dtype=np.float64)
    g = build_graph([(0, 0)], 1, 2)
    grads = backward(m, g, forward(m, g), TripletBatch([0], [0], [1]))
    subs = dict(zip(eu, m.user_emb0[0]))
    subs.update(zip(ei, m.item_emb0[0]))
    subs.update(zip(ej, m.item_emb0[1]))
    for sym_vec, got in ((eu, grads.user_grad[0]), (ei, grads.item_grad[0]), (ej, grads.item_grad[1])):
        want = [float(sympy.diff(loss, s).subs(subs)) for s in sym_vec]
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_backward_matches_finite_differences_small():
    rng = np.random.default_rng(101)
    for _ in range(10):
        pairs, nu, ni, m, trip, kd = random_instance(rng)
        lam1, lam2 = float(rng.choice([0.0, 1.0])), float(rng.choice([0.0, 1e-3]))
        g = build_graph(pairs, nu, ni)
        grads = backward(m, g, forward(m, g), trip, kd, lam1, lam2)
        nu_g, ni_g = finite_difference_grads(pairs, nu, ni, m, m.n_layers, trip, kd, lam1, lam2)
        assert relative_error(grads.user_grad, nu_g).max() < 1e-4
        assert relative_error(grads.item_grad, ni_g).max() < 1e-4


def test_unreachable_rows_exactly_zero():
    rng = np.random.default_rng(5)
    for _ in range(30):
        pairs, nu, ni, m, trip, kd = random_instance(rng)
        g = build_graph(pairs, nu, ni)
        grads = backward(m, g, forward(m, g), trip, kd, 1.0, 1e-3)
        ru, ri = reachable_rows(
            pairs,
            nu,
            ni,
            np.concatenate([trip.users, kd.users]),
            np.concatenate([trip.pos_items, trip.neg_items, kd.items]),
            m.n_layers,
        )
        for u in set(range(nu)) - ru:
            assert not grads.user_grad[u].any()
        for i in set(range(ni)) - ri:
            assert not grads.item_grad[i].any()


def test_lambda1_zero_skips_distillation_bitwise():
    rng = np.random.default_rng(8)
    for _ in range(10):
        pairs, nu, ni, m, trip, kd = random_instance(rng)
        g = build_graph(pairs, nu, ni)
        f = forward(m, g)
        a = backward(m, g, f, trip, kd, 0.0, 1e-3)
        b = backward(m, g, f, trip, None, 0.0, 1e-3)
        assert a.user_grad.tobytes() == b.user_grad.tobytes()
        assert a.item_grad.tobytes() == b.item_grad.tobytes()


def test_teacher_scores_are_constants():
    rng = np.random.default_rng(9)
    pairs, nu, ni, m, trip, kd = random_instance(rng)
    g = build_graph(pairs, nu, ni)
    f = forward(m, g)
    before = kd.teacher_scores.copy()
    grads = backward(m, g, f, trip, kd, 1.0, 0.0)
    np.testing.assert_array_equal(kd.teacher_scores, before)
    assert grads.user_grad.shape == m.user_emb0.shape
    assert grads.item_grad.shape == m.item_emb0.shape


def test_stale_forward_detected():
    m = init_model(2, 2, dim=2, n_layers=1)
    g = build_graph([(0, 0), (1, 1)], 2, 2)
    f = forward(m, g)
    m.touch()
    with pytest.raises(StaleForwardError):
        backward(m, g, f, TripletBatch([0], [0], [1]))


def test_accumulator_merge_and_rows():
    m = init_model(3, 3, dim=2, n_layers=0, dtype=np.float64)
    g = build_graph([(0, 0)], 3, 3)
    f = forward(m, g)
    a = backward(m, g, f, TripletBatch([0], [0], [1]))
    b = backward(m, g, f, TripletBatch([2], [2], [1]))
    both = backward(m, g, f, TripletBatch([0, 2], [0, 2], [1, 1]))
    merged = a + b
    # batch means: each single-triplet gradient is twice its share of the pair's
    np.testing.assert_allclose(merged.user_grad / 2, both.user_grad, atol=1e-15)
    assert a.user_rows().tolist() == [0]
    assert sorted(a.item_rows().tolist()) == [0, 1]
    np.testing.assert_allclose((a + b).item_grad, (b + a).item_grad, atol=0)
