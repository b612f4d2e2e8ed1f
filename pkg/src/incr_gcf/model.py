"""LightGCN embedding model: initial tables, layer-averaged propagation, scoring."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundsError,
    ShapeError,
    SnapshotError,
    SnapshotFingerprintError,
    SnapshotTruncatedError,
    SnapshotVersionError,
    ValidationError,
)
from .graph import BipartiteGraph, propagate_once

INIT_STD = 0.1
SEED_BLOCK = 256
_USER, _ITEM = 0, 1

NO_FINGERPRINT = bytes(32)


def seeded_rows(seed: int, kind: int, start: int, stop: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Initial rows ``start..stop`` of one table.

    Rows come in blocks of ``SEED_BLOCK``, each block drawn from a generator
    keyed by (seed, table kind, block index). Row ``r`` therefore depends
    only on (seed, kind, r, dim), which is what lets table expansion
    reproduce exactly the rows a larger fresh init would have produced.
    """
    out = np.empty((max(stop - start, 0), dim), dtype=np.float64)
    pos = start
    while pos < stop:
        b = pos // SEED_BLOCK
        lo = b * SEED_BLOCK
        hi = min(lo + SEED_BLOCK, stop)
        block = np.random.default_rng([seed, kind, b]).normal(0.0, INIT_STD, size=(SEED_BLOCK, dim))
        out[pos - start : hi - start] = block[pos - lo : hi - lo]
        pos = hi
    return out.astype(dtype)


@dataclass(eq=False)
class EmbeddingModel:
    dim: int
    n_layers: int
    user_emb0: np.ndarray
    item_emb0: np.ndarray
    rng_seed: int = 0
    fingerprint: bytes = NO_FINGERPRINT
    generation: int = field(default=0, repr=False)

    @property
    def n_users(self) -> int:
        return self.user_emb0.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb0.shape[0]

    @property
    def dtype(self):
        return self.user_emb0.dtype

    def touch(self) -> None:
        """Record an in-place parameter change; invalidates earlier forwards."""
        self.generation += 1

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.dim,
            self.n_layers,
            self.user_emb0.copy(),
            self.item_emb0.copy(),
            self.rng_seed,
            self.fingerprint,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingModel):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.n_layers == other.n_layers
            and self.fingerprint == other.fingerprint
            and self.user_emb0.dtype == other.user_emb0.dtype
            and self.user_emb0.shape == other.user_emb0.shape
            and self.item_emb0.shape == other.item_emb0.shape
            and self.user_emb0.tobytes() == other.user_emb0.tobytes()
            and self.item_emb0.tobytes() == other.item_emb0.tobytes()
        )

    __hash__ = None


def init_model(
    n_users: int,
    n_items: int,
    dim: int = 64,
    n_layers: int = 3,
    seed: int = 0,
    dtype=np.float32,
    fingerprint: bytes = NO_FINGERPRINT,
) -> EmbeddingModel:
    """Fresh model with N(0, 0.1^2) initial embeddings."""
    if dim < 1 or n_layers < 0:
        raise ValidationError(f"need dim >= 1 and n_layers >= 0, got {dim}, {n_layers}")
    if n_users <= 0 or n_items <= 0:
        raise ValidationError(f"cannot build a model with {n_users} users and {n_items} items")
    return EmbeddingModel(
        dim,
        n_layers,
        seeded_rows(seed, _USER, 0, n_users, dim, dtype),
        seeded_rows(seed, _ITEM, 0, n_items, dim, dtype),
        seed,
        fingerprint,
    )


def expand_for_interval(
    model: EmbeddingModel, n_users: int, n_items: int, seed: int | None = None
) -> EmbeddingModel:
    """Grow the tables to cover cold entities; existing rows are copied verbatim."""
    if n_users < model.n_users or n_items < model.n_items:
        raise ValidationError(
            f"cannot shrink model from ({model.n_users}, {model.n_items}) to ({n_users}, {n_items})"
        )
    seed = model.rng_seed if seed is None else seed
    dt = model.dtype
    users = np.concatenate(
        [model.user_emb0, seeded_rows(seed, _USER, model.n_users, n_users, model.dim, dt)]
    )
    items = np.concatenate(
        [model.item_emb0, seeded_rows(seed, _ITEM, model.n_items, n_items, model.dim, dt)]
    )
    return EmbeddingModel(model.dim, model.n_layers, users, items, model.rng_seed, model.fingerprint)


@dataclass(eq=False)
class FinalEmbeddings:
    user_final: np.ndarray
    item_final: np.ndarray
    user_layers: list[np.ndarray]
    item_layers: list[np.ndarray]
    generation: int = -1

    @property
    def n_users(self) -> int:
        return self.user_final.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_final.shape[0]


def forward(model: EmbeddingModel, graph: BipartiteGraph) -> FinalEmbeddings:
    if graph.n_users != model.n_users or graph.n_items != model.n_items:
        raise ShapeError(
            f"graph is ({graph.n_users}, {graph.n_items}) but model is ({model.n_users}, {model.n_items})"
        )
    u, i = model.user_emb0, model.item_emb0
    ulayers, ilayers = [u], [i]
    for _ in range(model.n_layers):
        u, i = propagate_once(graph, u, i)
        ulayers.append(u)
        ilayers.append(i)
    scale = model.dtype.type(1.0 / (model.n_layers + 1))
    user_final = np.sum(ulayers, axis=0) * scale
    item_final = np.sum(ilayers, axis=0) * scale
    return FinalEmbeddings(user_final, item_final, ulayers, ilayers, model.generation)


def _check_index(idx, bound, name):
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise BoundsError(f"{name} index out of range [0, {bound})")


def score(final: FinalEmbeddings, u, i):
    """Preference score emb_u . emb_i; vectorizes over index arrays."""
    _check_index(u, final.n_users, "user")
    _check_index(i, final.n_items, "item")
    if np.ndim(u) == 0 and np.ndim(i) == 0:
        return float(final.user_final[u] @ final.item_final[i])
    return np.einsum("nd,nd->n", final.user_final[u], final.item_final[i])


def score_all_items(final: FinalEmbeddings, u: int) -> np.ndarray:
    _check_index(u, final.n_users, "user")
    return final.item_final @ final.user_final[u]


# Snapshot file: little-endian header then row-major float32 user and item tables.
SNAPSHOT_MAGIC = b"IGCFSNAP"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sIIIQQ32s")


@dataclass
class ModelSnapshot:
    version: int
    dim: int
    n_layers: int
    n_users: int
    n_items: int
    fingerprint: bytes
    user_emb0: np.ndarray
    item_emb0: np.ndarray


def save_snapshot(model: EmbeddingModel, path) -> None:
    """Write ``model`` to ``path``; tables are stored as 4-byte floats.

    Round trips are bit-exact for float32 models. Wide-precision models are
    narrowed on write.
    """
    if len(model.fingerprint) != 32:
        raise ValidationError(f"fingerprint must be 32 bytes, got {len(model.fingerprint)}")
    header = _HEADER.pack(
        SNAPSHOT_MAGIC,
        SNAPSHOT_VERSION,
        model.dim,
        model.n_layers,
        model.n_users,
        model.n_items,
        model.fingerprint,
    )
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(model.user_emb0, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.item_emb0, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_snapshot(path) -> ModelSnapshot:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise SnapshotTruncatedError(f"{path}: {len(raw)} bytes is shorter than the header")
    magic, version, dim, k, nu, ni, fp = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"{path}: not a model snapshot")
    if version != SNAPSHOT_VERSION:
        raise SnapshotVersionError(f"{path}: format version {version}, expected {SNAPSHOT_VERSION}")
    want = _HEADER.size + 4 * dim * (nu + ni)
    if len(raw) < want:
        raise SnapshotTruncatedError(f"{path}: {len(raw)} bytes, expected {want}")
    if len(raw) > want:
        raise SnapshotError(f"{path}: {len(raw) - want} trailing bytes")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    users = body[: nu * dim].reshape(nu, dim).astype(np.float32)
    items = body[nu * dim :].reshape(ni, dim).astype(np.float32)
    return ModelSnapshot(version, dim, k, nu, ni, fp, users, items)


def load_snapshot(path, expected_fingerprint: bytes | None = None, seed: int = 0) -> EmbeddingModel:
    snap = read_snapshot(path)
    if expected_fingerprint is not None and snap.fingerprint != expected_fingerprint:
        raise SnapshotFingerprintError(
            f"{path}: id-map fingerprint {snap.fingerprint.hex()[:12]}... does not match "
            f"{expected_fingerprint.hex()[:12]}..."
        )
    return EmbeddingModel(
        snap.dim, snap.n_layers, snap.user_emb0, snap.item_emb0, seed, snap.fingerprint
    )
