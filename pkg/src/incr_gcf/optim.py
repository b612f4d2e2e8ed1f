"""Row-sparse Adam for embedding tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import EmbeddingModel
from .objective import GradientAccumulator


@dataclass(eq=False)
class RowAdamState:
    """First/second moments plus a step counter per table row."""

    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray

    @classmethod
    def zeros_like(cls, table: np.ndarray) -> "RowAdamState":
        return cls(np.zeros_like(table), np.zeros_like(table), np.zeros(table.shape[0], dtype=np.int64))


@dataclass(eq=False)
class AdamState:
    user: RowAdamState
    item: RowAdamState

    @classmethod
    def for_model(cls, model: EmbeddingModel) -> "AdamState":
        return cls(RowAdamState.zeros_like(model.user_emb0), RowAdamState.zeros_like(model.item_emb0))


def _update_table(table, grad, state: RowAdamState, lr, beta1, beta2, eps, name):
    rows = np.flatnonzero(np.any(grad != 0, axis=1))
    if len(rows) == 0:
        return
    g = grad[rows]
    bad = ~np.isfinite(g).all(axis=1)
    if bad.any():
        raise FloatingPointError(f"non-finite gradient in {name} row {int(rows[np.argmax(bad)])}")
    dt = table.dtype.type
    state.steps[rows] += 1
    t = state.steps[rows][:, None].astype(np.float64)
    m = state.m[rows] * dt(beta1) + dt(1 - beta1) * g
    v = state.v[rows] * dt(beta2) + dt(1 - beta2) * g * g
    state.m[rows] = m
    state.v[rows] = v
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    table[rows] -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(table.dtype)


def adam_step(
    model: EmbeddingModel,
    grads: GradientAccumulator,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam on rows with a nonzero gradient; others untouched.

    Each row keeps its own step count, so a row's bias correction advances
    only when it actually receives a gradient.
    """
    if state.user.m.shape != model.user_emb0.shape or state.item.m.shape != model.item_emb0.shape:
        raise ValidationError("optimizer state does not match model tables")
    if lr <= 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    _update_table(model.user_emb0, grads.user_grad, state.user, lr, beta1, beta2, eps, "user")
    _update_table(model.item_emb0, grads.item_grad, state.item, lr, beta1, beta2, eps, "item")
    model.touch()
