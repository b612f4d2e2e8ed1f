import math

import numpy as np
import pytest

from incr_gcf.errors import ValidationError
from incr_gcf.model import init_model
from incr_gcf.objective import GradientAccumulator
from incr_gcf.optim import AdamState, adam_step


def _scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar recurrence; returns the parameter deltas."""
    m = v = 0.0
    theta = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def _model():
    return init_model(3, 2, dim=2, seed=0, dtype=np.float64)


def _grads(m, user_rows=None, item_rows=None, value=1.0):
    gu, gi = np.zeros_like(m.user_emb0), np.zeros_like(m.item_emb0)
    for r in user_rows or []:
        gu[r] = value
    for r in item_rows or []:
        gi[r] = value
    return GradientAccumulator(gu, gi)


def test_zero_gradient_row_untouched():
    m = _model()
    before = m.user_emb0.copy()
    state = AdamState.for_model(m)
    adam_step(m, _grads(m, user_rows=[1]), state, lr=0.1)
    np.testing.assert_array_equal(m.user_emb0[[0, 2]], before[[0, 2]])
    assert state.user.steps.tolist() == [0, 1, 0]
    assert state.item.steps.tolist() == [0, 0]
    assert not state.user.m[0].any()


def test_first_step_is_minus_lr():
    m = _model()
    before = m.user_emb0.copy()
    adam_step(m, _grads(m, user_rows=[0]), AdamState.for_model(m), lr=1e-3)
    delta = m.user_emb0[0] - before[0]
    # m_hat = 1, v_hat = 1 -> -lr / (1 + eps)
    np.testing.assert_allclose(delta, -1e-3 / (1 + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(delta, _scalar_adam([1.0], 1e-3), rtol=1e-12)


def test_two_steps_match_recurrence():
    m = _model()
    before = m.item_emb0[1].copy()
    state = AdamState.for_model(m)
    for _ in range(2):
        adam_step(m, _grads(m, item_rows=[1], value=0.3), state, lr=0.05)
    np.testing.assert_allclose(m.item_emb0[1] - before, _scalar_adam([0.3, 0.3], 0.05), rtol=1e-12)
    assert state.item.steps[1] == 2


def test_per_row_step_counters():
    m = _model()
    state = AdamState.for_model(m)
    before = m.user_emb0.copy()
    adam_step(m, _grads(m, user_rows=[0]), state, lr=0.01)
    adam_step(m, _grads(m, user_rows=[0, 2], value=0.5), state, lr=0.01)
    assert state.user.steps.tolist() == [2, 0, 1]
    # row 2 got its first step, so bias correction is fresh there
    np.testing.assert_allclose(m.user_emb0[2] - before[2], _scalar_adam([0.5], 0.01), rtol=1e-12)
    np.testing.assert_allclose(m.user_emb0[0] - before[0], _scalar_adam([1.0, 0.5], 0.01), rtol=1e-12)


def test_nan_gradient_names_row():
    m = _model()
    g = _grads(m)
    g.item_grad[1, 0] = np.nan
    with pytest.raises(FloatingPointError, match="item row 1"):
        adam_step(m, g, AdamState.for_model(m), lr=0.1)


def test_step_bumps_generation_and_checks_shapes():
    m = _model()
    gen = m.generation
    adam_step(m, _grads(m, user_rows=[0]), AdamState.for_model(m), lr=0.1)
    assert m.generation == gen + 1
    with pytest.raises(ValidationError):
        adam_step(m, _grads(m), AdamState.for_model(init_model(4, 2, dim=2)), lr=0.1)
    with pytest.raises(ValidationError):
        adam_step(m, _grads(m), AdamState.for_model(m), lr=0.0)


def test_float32_tables_stay_float32():
    m = init_model(2, 2, dim=2)
    adam_step(m, _grads(m, user_rows=[0]), AdamState.for_model(m), lr=0.1)
    assert m.user_emb0.dtype == np.float32
