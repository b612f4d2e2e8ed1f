"""Uniform negative sampling with rejection of observed items."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .objective import TripletBatch

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class EpochTriplets:
    triplets: TripletBatch
    skipped: int  # positives dropped because their user has seen every item

    def batches(self, batch_size: int):
        t = self.triplets
        for lo in range(0, len(t), batch_size):
            hi = lo + batch_size
            yield TripletBatch(t.users[lo:hi], t.pos_items[lo:hi], t.neg_items[lo:hi])


def _pair_keys(users, items, n_items):
    return np.asarray(users, dtype=np.int64) * n_items + np.asarray(items, dtype=np.int64)


def sample_negatives(
    pos_users,
    pos_items,
    n_items: int,
    seed: int,
    epoch: int = 0,
    negatives_per_positive: int = 1,
    observed=None,
) -> EpochTriplets:
    """One shuffled epoch of (u, i, i') triplets.

    ``i'`` is uniform over items not observed for ``u``, where the observed
    set is ``observed`` (a ``(users, items)`` pair, typically the training
    scope) plus the positives themselves. The result is a function of
    ``(seed, epoch)`` alone.
    """
    if n_items <= 1:
        raise ValidationError(f"need at least 2 items to sample negatives, got {n_items}")
    if negatives_per_positive < 1:
        raise ValidationError("negatives_per_positive must be >= 1")
    pos_users = np.asarray(pos_users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)

    keys = _pair_keys(pos_users, pos_items, n_items)
    if observed is not None:
        keys = np.concatenate([keys, _pair_keys(observed[0], observed[1], n_items)])
    seen = np.unique(keys)
    seen_users = seen // n_items
    per_user = np.bincount(seen_users, minlength=int(pos_users.max(initial=-1)) + 1)

    full = per_user[pos_users] >= n_items
    skipped = int(full.sum()) * negatives_per_positive
    if skipped:
        logger.warning("%d positive(s) skipped: user has interacted with every item", skipped)
    users = np.repeat(pos_users[~full], negatives_per_positive)
    items = np.repeat(pos_items[~full], negatives_per_positive)

    rng = np.random.default_rng([seed, epoch])
    negs = rng.integers(0, n_items, size=len(users))
    pending = np.arange(len(users))
    while len(pending):
        k = _pair_keys(users[pending], negs[pending], n_items)
        pos = np.searchsorted(seen, k)
        hit = (pos < len(seen)) & (seen[np.minimum(pos, len(seen) - 1)] == k)
        pending = pending[hit]
        negs[pending] = rng.integers(0, n_items, size=len(pending))

    order = rng.permutation(len(users))
    return EpochTriplets(TripletBatch(users[order], items[order], negs[order]), skipped)
