"""BPR, preference-distillation and L2 terms with analytic gradients.

The total objective is ``bpr + lambda1 * kd + lambda2 * l2``. Gradients are
taken with respect to the initial embedding tables: the loss gradients on
the final (layer-averaged) embeddings are pulled back through the linear
propagation by running the same propagation on the gradient buffers, which
works because the normalized adjacency is symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import StaleForwardError, ValidationError
from .graph import BipartiteGraph, propagate_once
from .model import EmbeddingModel, FinalEmbeddings


@dataclass(eq=False)
class TripletBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.pos_items = np.asarray(self.pos_items, dtype=np.int64)
        self.neg_items = np.asarray(self.neg_items, dtype=np.int64)
        if not (len(self.users) == len(self.pos_items) == len(self.neg_items)):
            raise ValidationError("triplet arrays differ in length")
        if np.any(self.pos_items == self.neg_items):
            raise ValidationError("triplet has identical positive and negative item")

    def __len__(self) -> int:
        return len(self.users)


@dataclass(eq=False)
class KdBatch:
    users: np.ndarray
    items: np.ndarray
    teacher_scores: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.teacher_scores = np.asarray(self.teacher_scores)
        if not (len(self.users) == len(self.items) == len(self.teacher_scores)):
            raise ValidationError("kd arrays differ in length")
        if not np.all(np.isfinite(self.teacher_scores)):
            raise ValidationError("teacher scores must be finite")

    def __len__(self) -> int:
        return len(self.users)


@dataclass(eq=False)
class GradientAccumulator:
    """Gradient w.r.t. the initial tables; untouched rows stay exactly zero."""

    user_grad: np.ndarray
    item_grad: np.ndarray

    def user_rows(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.user_grad != 0, axis=1))

    def item_rows(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.item_grad != 0, axis=1))

    def __add__(self, other: "GradientAccumulator") -> "GradientAccumulator":
        return GradientAccumulator(self.user_grad + other.user_grad, self.item_grad + other.item_grad)


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _nonempty(batch, name):
    if batch is None or len(batch) == 0:
        raise ValidationError(f"empty {name} batch")


def score_differences(batch: TripletBatch, final: FinalEmbeddings) -> np.ndarray:
    eu = final.user_final[batch.users]
    return np.einsum("nd,nd->n", eu, final.item_final[batch.pos_items] - final.item_final[batch.neg_items])


def bpr_loss(batch: TripletBatch, final: FinalEmbeddings) -> float:
    _nonempty(batch, "triplet")
    return float(np.mean(softplus(-score_differences(batch, final))))


def kd_loss(batch: KdBatch, final: FinalEmbeddings) -> float:
    _nonempty(batch, "kd")
    student = np.einsum("nd,nd->n", final.user_final[batch.users], final.item_final[batch.items])
    return float(np.mean((batch.teacher_scores - student) ** 2))


def l2_term(batch: TripletBatch, model: EmbeddingModel) -> float:
    _nonempty(batch, "triplet")
    sq = (
        np.sum(model.user_emb0[batch.users] ** 2)
        + np.sum(model.item_emb0[batch.pos_items] ** 2)
        + np.sum(model.item_emb0[batch.neg_items] ** 2)
    )
    return float(0.5 * sq / len(batch))


def total_loss(bpr: float, kd: float, l2: float, lambda1: float, lambda2: float) -> float:
    if lambda1 < 0 or lambda2 < 0:
        raise ValidationError(f"loss weights must be non-negative, got {lambda1}, {lambda2}")
    return bpr + lambda1 * kd + lambda2 * l2


def pull_back(graph: BipartiteGraph, n_layers: int, grad_user: np.ndarray, grad_item: np.ndarray):
    """Map gradients on final embeddings to gradients on the initial tables."""
    acc_u, acc_i = grad_user.copy(), grad_item.copy()
    cur_u, cur_i = grad_user, grad_item
    for _ in range(n_layers):
        cur_u, cur_i = propagate_once(graph, cur_u, cur_i)
        acc_u += cur_u
        acc_i += cur_i
    scale = acc_u.dtype.type(1.0 / (n_layers + 1))
    return acc_u * scale, acc_i * scale


def backward(
    model: EmbeddingModel,
    graph: BipartiteGraph,
    final: FinalEmbeddings,
    triplets: TripletBatch,
    kd_batch: KdBatch | None = None,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
) -> GradientAccumulator:
    """Exact gradient of the total loss w.r.t. ``model``'s initial tables.

    The distillation branch is skipped entirely when ``lambda1 == 0`` or
    ``kd_batch`` is None, so that setting reproduces the plain BPR gradient
    bit for bit. Teacher scores enter only as constants.
    """
    if final.generation != model.generation:
        raise StaleForwardError(
            f"final embeddings are from generation {final.generation}, model is at {model.generation}"
        )
    _nonempty(triplets, "triplet")
    if lambda1 < 0 or lambda2 < 0:
        raise ValidationError(f"loss weights must be non-negative, got {lambda1}, {lambda2}")

    dt = final.user_final.dtype
    uf, itf = final.user_final, final.item_final
    g_user = np.zeros_like(uf)
    g_item = np.zeros_like(itf)

    u, i, j = triplets.users, triplets.pos_items, triplets.neg_items
    eu = uf[u]
    ei, ej = itf[i], itf[j]
    diff = np.einsum("nd,nd->n", eu, ei - ej)
    # d/d(diff) of mean softplus(-diff)
    coef = (-expit(-diff) / len(triplets)).astype(dt)[:, None]
    np.add.at(g_user, u, coef * (ei - ej))
    np.add.at(g_item, i, coef * eu)
    np.add.at(g_item, j, -coef * eu)

    if kd_batch is not None and lambda1 != 0:
        _nonempty(kd_batch, "kd")
        ku, ki = kd_batch.users, kd_batch.items
        eku, eki = uf[ku], itf[ki]
        resid = kd_batch.teacher_scores - np.einsum("nd,nd->n", eku, eki)
        kcoef = (-2.0 * lambda1 * resid / len(kd_batch)).astype(dt)[:, None]
        np.add.at(g_user, ku, kcoef * eki)
        np.add.at(g_item, ki, kcoef * eku)

    g_user, g_item = pull_back(graph, model.n_layers, g_user, g_item)

    if lambda2 != 0:
        c = dt.type(lambda2 / len(triplets))
        np.add.at(g_user, u, c * model.user_emb0[u])
        np.add.at(g_item, i, c * model.item_emb0[i])
        np.add.at(g_item, j, c * model.item_emb0[j])

    return GradientAccumulator(g_user, g_item)
