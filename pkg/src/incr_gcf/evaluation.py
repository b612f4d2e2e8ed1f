"""Full-catalog Recall@K and time-to-best accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import EmptyResultError, ValidationError
from .model import FinalEmbeddings


@dataclass(eq=False)
class EvalSet:
    """Held-out positives per user, plus the items to mask when ranking.

    Rows of ``heldout`` and ``exclude`` are aligned with ``users``.
    """

    users: np.ndarray
    heldout: sp.csr_matrix
    exclude: sp.csr_matrix
    n_items: int
    skipped_users: int = 0  # eval users unknown to the model
    dropped_items: int = 0  # held-out interactions on items unknown to the model

    def __len__(self) -> int:
        return len(self.users)


def build_eval_set(heldout, train, n_users: int, n_items: int) -> EvalSet:
    """Assemble an :class:`EvalSet` from held-out and training interactions.

    Both arguments expose ``users``/``items`` arrays (an ``Interval`` works).
    Users outside the model's ``n_users`` are skipped and items outside
    ``n_items`` dropped; both are counted. Held-out pairs that also occur
    in ``train`` are removed so the two sets stay disjoint.
    """
    hu = np.asarray(heldout.users, dtype=np.int64)
    hi = np.asarray(heldout.items, dtype=np.int64)
    known_user = hu < n_users
    skipped_users = len(np.unique(hu[~known_user]))
    hu, hi = hu[known_user], hi[known_user]
    known_item = hi < n_items
    dropped = int((~known_item).sum())
    hu, hi = hu[known_item], hi[known_item]

    tu = np.asarray(train.users, dtype=np.int64)
    ti = np.asarray(train.items, dtype=np.int64)
    ok = (tu < n_users) & (ti < n_items)
    excl_full = sp.csr_matrix(
        (np.ones(ok.sum(), dtype=np.int8), (tu[ok], ti[ok])), shape=(n_users, n_items)
    )
    held_full = sp.csr_matrix((np.ones(len(hu), dtype=np.int8), (hu, hi)), shape=(n_users, n_items))
    held_full.data[:] = 1
    excl_full.data[:] = 1
    held_full = (held_full - held_full.multiply(excl_full)).tocsr()
    held_full.eliminate_zeros()

    users = np.flatnonzero(np.diff(held_full.indptr) > 0)
    return EvalSet(
        users=users,
        heldout=held_full[users].astype(bool).tocsr(),
        exclude=excl_full[users].astype(bool).tocsr(),
        n_items=n_items,
        skipped_users=skipped_users,
        dropped_items=dropped,
    )


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of each row's top-``k`` entries.

    Equal scores are ordered by ascending column index; ``-inf`` entries
    are never selected, so rows with fewer than ``k`` finite scores get a
    shorter list.
    """
    n, m = scores.shape
    k = min(k, m)
    kth = np.partition(scores, m - k, axis=1)[:, m - k][:, None]
    above = scores > kth
    tie = scores == kth
    need = k - above.sum(axis=1, keepdims=True)
    take_tie = tie & (np.cumsum(tie, axis=1) <= need)
    return (above | take_tie) & np.isfinite(scores)


def recall_per_user(scores: np.ndarray, eval_set: EvalSet, k: int = 20) -> np.ndarray:
    """Per-user recall from a precomputed (len(eval_set), n_items) score matrix."""
    scores = np.array(scores, dtype=np.float64, copy=True)
    excl = eval_set.exclude.tocoo()
    scores[excl.row, excl.col] = -np.inf
    top = top_k_mask(scores, k)
    held = eval_set.heldout
    hits = np.asarray(held.multiply(sp.csr_matrix(top)).sum(axis=1)).ravel()
    return hits / np.diff(held.indptr)


def recall_at_k(
    final: FinalEmbeddings, eval_set: EvalSet, k: int = 20, chunk: int = 1024, per_user: bool = False
):
    """Mean Recall@k over users with at least one held-out item.

    Ranks the whole catalog with training positives masked out. Per-user
    values are averaged in user-index order regardless of chunking.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(eval_set) == 0:
        raise EmptyResultError("evaluation set has no users with held-out items")
    if final.n_items != eval_set.n_items:
        raise ValidationError(
            f"model has {final.n_items} items, evaluation set expects {eval_set.n_items}"
        )
    parts = []
    for lo in range(0, len(eval_set), chunk):
        hi = min(lo + chunk, len(eval_set))
        sub = EvalSet(
            eval_set.users[lo:hi], eval_set.heldout[lo:hi], eval_set.exclude[lo:hi], eval_set.n_items
        )
        scores = final.user_final[sub.users] @ final.item_final.T
        parts.append(recall_per_user(scores, sub, k))
    recalls = np.concatenate(parts)
    mean = float(np.mean(recalls))
    return (mean, recalls) if per_user else mean


def time_to_best(trace) -> tuple[float, float]:
    """(best recall, cumulative seconds at its first attainment)."""
    trace = list(trace)
    if not trace:
        raise ValidationError("empty trace")
    best_r, best_s = trace[0]
    for r, s in trace[1:]:
        if r > best_r:
            best_r, best_s = r, s
    return best_r, best_s
