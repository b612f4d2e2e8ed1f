"""Synthetic interaction logs with planted block preferences and drift."""
from __future__ import annotations

import numpy as np

from .data import Interaction


def drift_interactions(
    n_users: int = 200,
    n_items: int = 100,
    n_groups: int = 5,
    per_period: tuple[int, ...] = (24, 16),
    drift: float = 1.0,
    noise: float = 0.1,
    seed: int = 0,
    period_length: int = 1_000_000,
) -> list[Interaction]:
    """Interactions over consecutive periods of shifting group affinity.

    Users and items are split into ``n_groups`` blocks. In period ``p`` a
    user of group ``g`` favours item block ``g`` if it has not drifted and
    block ``g + p`` otherwise; a ``drift`` fraction of users drift. Each
    draw falls outside the favoured block with probability ``noise``. A
    user never repeats an item. Timestamps increase with the period, and
    are uniform within it.
    """
    rng = np.random.default_rng(seed)
    user_group = np.arange(n_users) % n_groups
    item_group = np.arange(n_items) % n_groups
    drifting = rng.random(n_users) < drift
    out = []
    for u in range(n_users):
        used: set[int] = set()
        for p, count in enumerate(per_period):
            g = (user_group[u] + (p if drifting[u] else 0)) % n_groups
            fav = np.flatnonzero(item_group == g)
            other = np.flatnonzero(item_group != g)
            picks = []
            while len(picks) < count:
                pool = other if rng.random() < noise else fav
                cand = [i for i in pool.tolist() if i not in used]
                if not cand:
                    cand = [i for i in range(n_items) if i not in used]
                    if not cand:
                        break
                i = cand[rng.integers(len(cand))]
                used.add(i)
                picks.append(i)
            ts = np.sort(rng.integers(p * period_length, (p + 1) * period_length, size=len(picks)))
            out.extend(Interaction(f"u{u}", f"i{i}", int(t)) for i, t in zip(picks, ts))
    out.sort(key=lambda r: r.timestamp)
    return out


def write_interactions(interactions, path, sep: str = "\t") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# user\titem\ttimestamp\n")
        for r in interactions:
            fh.write(f"{r.user_id}{sep}{r.item_id}{sep}{r.timestamp}\n")
