"""Interaction ingestion, k-core filtering and chronological interval splits."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    EmptyAfterFilterError,
    EmptyDatasetError,
    SplitTooSmallError,
    ValidationError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class ParseResult:
    interactions: list[Interaction]
    malformed: list[int] = field(default_factory=list)  # 1-based line numbers

    @property
    def n_malformed(self) -> int:
        return len(self.malformed)


def _parse_line(line: str) -> Interaction | None:
    sep = "\t" if "\t" in line else ","
    fields = [f.strip() for f in line.split(sep)]
    if len(fields) < 3 or not fields[0] or not fields[1]:
        return None
    try:
        ts = int(fields[2])
    except ValueError:
        return None
    if ts < 0:
        return None
    return Interaction(fields[0], fields[1], ts)


def parse_interactions(source) -> ParseResult:
    """Parse ``user, item, timestamp`` lines from a path or a text stream.

    Tab is used as the separator when a line contains one, comma otherwise;
    fields past the third are ignored and ``#`` lines are comments.
    Malformed lines are skipped but their line numbers are kept on the
    result.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return parse_interactions(fh)

    out: list[Interaction] = []
    bad: list[int] = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rec = _parse_line(line)
        if rec is None:
            bad.append(lineno)
        else:
            out.append(rec)
    if bad:
        logger.warning("skipped %d malformed line(s), first at line %d", len(bad), bad[0])
    if not out:
        raise EmptyDatasetError("no valid interaction lines in input")
    return ParseResult(out, bad)


def parse_text(text: str) -> ParseResult:
    return parse_interactions(io.StringIO(text))


def time_window(
    interactions: Iterable[Interaction], start: int | None = None, end: int | None = None
) -> list[Interaction]:
    """Keep interactions with ``start <= timestamp < end``.

    Applied before :func:`filter_dataset` when a dataset is restricted to a
    period, so the k-core threshold is computed on the windowed data.
    """
    return [
        r
        for r in interactions
        if (start is None or r.timestamp >= start) and (end is None or r.timestamp < end)
    ]


@dataclass(eq=False)
class Dataset:
    """Chronologically ordered interactions with dense integer ids.

    Ids are assigned by first appearance in timestamp order, so the entities
    of any chronological prefix occupy a prefix of the index space.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: list[str]
    item_ids: list[str]

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, ts in zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()):
            yield Interaction(self.user_ids[u], self.item_ids[i], ts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def fingerprint(self) -> bytes:
        return id_map_fingerprint(self.user_ids, self.item_ids)


def id_map_fingerprint(user_ids: Sequence[str], item_ids: Sequence[str]) -> bytes:
    payload = json.dumps({"users": list(user_ids), "items": list(item_ids)}, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).digest()


def _encode(interactions: Iterable[Interaction]):
    umap: dict[str, int] = {}
    imap: dict[str, int] = {}
    us, its, ts = [], [], []
    for r in interactions:
        us.append(umap.setdefault(r.user_id, len(umap)))
        its.append(imap.setdefault(r.item_id, len(imap)))
        ts.append(r.timestamp)
    return (
        np.asarray(us, dtype=np.int64),
        np.asarray(its, dtype=np.int64),
        np.asarray(ts, dtype=np.int64),
        list(umap),
        list(imap),
    )


def _dense_reindex(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Relabel codes by order of first appearance. Returns (new_codes, old_code_per_new)."""
    uniq, first = np.unique(codes, return_index=True)
    order = np.argsort(first, kind="stable")
    old_by_new = uniq[order]
    remap = np.empty(uniq.max() + 1 if len(uniq) else 0, dtype=np.int64)
    remap[old_by_new] = np.arange(len(old_by_new))
    return remap[codes], old_by_new


def _build_dataset(users, items, ts, user_names, item_names) -> Dataset:
    order = np.argsort(ts, kind="stable")
    users, items, ts = users[order], items[order], ts[order]
    users, u_old = _dense_reindex(users)
    items, i_old = _dense_reindex(items)
    return Dataset(
        users=users,
        items=items,
        timestamps=ts,
        user_ids=[user_names[k] for k in u_old.tolist()],
        item_ids=[item_names[k] for k in i_old.tolist()],
    )


def index_interactions(interactions: Iterable[Interaction]) -> Dataset:
    """Sort by time (stable) and assign dense ids; no filtering."""
    users, items, ts, unames, inames = _encode(interactions)
    if len(users) == 0:
        raise EmptyDatasetError("no interactions to index")
    return _build_dataset(users, items, ts, unames, inames)


def filter_dataset(interactions: Iterable[Interaction], min_count: int = 10) -> Dataset:
    """Deduplicate (user, item) pairs, then prune to a ``min_count`` core.

    Duplicates collapse onto their earliest occurrence (ties by input order).
    Users and then items with fewer than ``min_count`` interactions are
    dropped, repeating until nothing changes.
    """
    if min_count < 1:
        raise ValidationError(f"min_count must be >= 1, got {min_count}")
    users, items, ts, unames, inames = _encode(interactions)
    if len(users) == 0:
        raise EmptyDatasetError("no interactions to filter")

    order = np.argsort(ts, kind="stable")
    users, items, ts = users[order], items[order], ts[order]
    key = users * len(inames) + items
    _, first = np.unique(key, return_index=True)
    keep = np.sort(first)
    users, items, ts = users[keep], items[keep], ts[keep]

    while True:
        before = len(users)
        alive = np.bincount(users, minlength=len(unames))[users] >= min_count
        users, items, ts = users[alive], items[alive], ts[alive]
        alive = np.bincount(items, minlength=len(inames))[items] >= min_count
        users, items, ts = users[alive], items[alive], ts[alive]
        if len(users) == 0:
            raise EmptyAfterFilterError(min_count)
        if len(users) == before:
            break

    return _build_dataset(users, items, ts, unames, inames)


@dataclass(eq=False)
class Interval:
    """One chronological slice of dense-id interactions."""

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def empty(cls) -> "Interval":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy())

    @classmethod
    def concat(cls, parts: Sequence["Interval"]) -> "Interval":
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.timestamps for p in parts]),
        )

    def subset(self, mask: np.ndarray) -> "Interval":
        return Interval(self.users[mask], self.items[mask], self.timestamps[mask])

    @property
    def n_users(self) -> int:
        return int(self.users.max()) + 1 if len(self) else 0

    @property
    def n_items(self) -> int:
        return int(self.items.max()) + 1 if len(self) else 0


@dataclass(eq=False)
class IntervalSplit:
    intervals: list[Interval]
    n_users_cumulative: list[int]
    n_items_cumulative: list[int]
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.intervals)

    @property
    def n_incremental(self) -> int:
        return len(self.intervals) - 1

    def sizes(self) -> list[int]:
        return [len(iv) for iv in self.intervals]

    def scope(self, t: int, cumulative: bool = True) -> Interval:
        """Interactions visible when training at interval ``t``."""
        if cumulative:
            return Interval.concat(self.intervals[: t + 1])
        return self.intervals[t]

    def fingerprint(self) -> bytes:
        return id_map_fingerprint(self.user_ids, self.item_ids)


def split_boundaries(n: int, base_fraction: float, n_incremental: int) -> list[int]:
    """Cumulative cut points, rounded half-up from exact fractional targets."""
    step = (1.0 - base_fraction) / n_incremental
    cuts = [math.floor(n * (base_fraction + k * step) + 0.5) for k in range(n_incremental)]
    return [0] + cuts + [n]


def chronological_split(
    interactions, base_fraction: float = 0.6, n_incremental: int = 4
) -> IntervalSplit:
    if not 0.0 < base_fraction < 1.0:
        raise ValidationError(f"base_fraction must be in (0, 1), got {base_fraction}")
    if n_incremental < 1:
        raise ValidationError(f"n_incremental must be >= 1, got {n_incremental}")
    ds = interactions if isinstance(interactions, Dataset) else index_interactions(interactions)
    n = len(ds)
    if n < n_incremental + 1:
        raise SplitTooSmallError(
            f"{n} interactions cannot fill {n_incremental + 1} intervals"
        )
    # Dataset arrays are already stably time-sorted.
    cuts = split_boundaries(n, base_fraction, n_incremental)
    intervals = [
        Interval(ds.users[a:b], ds.items[a:b], ds.timestamps[a:b])
        for a, b in zip(cuts[:-1], cuts[1:])
    ]
    n_users_cum, n_items_cum = [], []
    for b in cuts[1:]:
        n_users_cum.append(int(ds.users[:b].max()) + 1 if b else 0)
        n_items_cum.append(int(ds.items[:b].max()) + 1 if b else 0)
    return IntervalSplit(intervals, n_users_cum, n_items_cum, list(ds.user_ids), list(ds.item_ids))


def density(n_interactions: int, n_users: int, n_items: int) -> float:
    return n_interactions / (n_users * n_items)


@dataclass
class IntervalStats:
    index: int
    n_interactions: int
    n_users: int
    n_items: int
    new_user_pct: float | None  # None for the base interval
    new_item_pct: float | None
    density: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StatsReport:
    rows: list[IntervalStats]

    def as_dicts(self) -> list[dict]:
        return [r.as_dict() for r in self.rows]

    def render(self) -> str:
        header = f"{'interval':<10}{'#inter':>9}{'#users':>8}{'#items':>8}{'new users%':>12}{'new items%':>12}{'density%':>10}"
        lines = [header]
        for r in self.rows:
            name = "base" if r.index == 0 else f"I{r.index}"
            nu = "\u2014" if r.new_user_pct is None else f"{r.new_user_pct:.1f}"
            ni = "\u2014" if r.new_item_pct is None else f"{r.new_item_pct:.1f}"
            lines.append(
                f"{name:<10}{r.n_interactions:>9}{r.n_users:>8}{r.n_items:>8}{nu:>12}{ni:>12}{100 * r.density:>10.4f}"
            )
        return "\n".join(lines)


def interval_stats(split: IntervalSplit) -> StatsReport:
    rows = []
    seen_users: set[int] = set()
    seen_items: set[int] = set()
    for t, iv in enumerate(split.intervals):
        users = set(np.unique(iv.users).tolist())
        items = set(np.unique(iv.items).tolist())
        if t == 0:
            nu = ni = None
        else:
            nu = 100.0 * len(users - seen_users) / len(users) if users else 0.0
            ni = 100.0 * len(items - seen_items) / len(items) if items else 0.0
        dens = density(len(iv), len(users), len(items)) if len(iv) else 0.0
        rows.append(IntervalStats(t, len(iv), len(users), len(items), nu, ni, dens))
        seen_users |= users
        seen_items |= items
    return StatsReport(rows)
