"""Workdir layout: canonical interactions, persisted splits, JSON manifests."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .data import Dataset, Interval, IntervalSplit, ParseResult, interval_stats
from .errors import IncrGCFError, ValidationError

INTERACTIONS_FILE = "interactions.tsv"
ID_MAPS_FILE = "id_maps.json"
INGEST_MANIFEST = "ingest_manifest.json"
SPLIT_DIR = "split"
SPLIT_MANIFEST = "split_manifest.json"
MODEL_DIR = "models"


class StorageError(IncrGCFError):
    """Workdir file missing or unreadable."""

    exit_code = 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def content_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_json(path, obj) -> None:
    tmp = Path(f"{path}.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_json(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _write_triples(path, users, items, timestamps) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# user_idx\titem_idx\ttimestamp\n")
        for u, i, t in zip(users.tolist(), items.tolist(), timestamps.tolist()):
            fh.write(f"{u}\t{i}\t{t}\n")


def _read_triples(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", comments="#", ndmin=2)
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if arr.size == 0:
        arr = np.zeros((0, 3), dtype=np.int64)
    return arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy()


def save_dataset(
    dataset: Dataset, workdir, parsed: ParseResult, source: str, min_count: int, window=(None, None)
) -> dict:
    """Write the dense-id interaction file, id maps and ingest manifest."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    _write_triples(workdir / INTERACTIONS_FILE, dataset.users, dataset.items, dataset.timestamps)
    write_json(workdir / ID_MAPS_FILE, {"users": dataset.user_ids, "items": dataset.item_ids})
    manifest = {
        "source": os.path.basename(str(source)),
        "min_count": min_count,
        "time_window": list(window),
        "lines_accepted": len(parsed.interactions),
        "lines_malformed": parsed.n_malformed,
        "malformed_line_numbers": parsed.malformed,
        "n_interactions": len(dataset),
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "interactions_sha256": file_sha256(workdir / INTERACTIONS_FILE),
        "id_maps_sha256": file_sha256(workdir / ID_MAPS_FILE),
    }
    manifest["manifest_hash"] = content_hash(manifest)
    write_json(workdir / INGEST_MANIFEST, manifest)
    return manifest


def load_dataset(workdir) -> Dataset:
    workdir = Path(workdir)
    if not (workdir / INTERACTIONS_FILE).exists():
        raise ValidationError(f"no ingested data in {workdir}; run `ingest` first")
    users, items, ts = _read_triples(workdir / INTERACTIONS_FILE)
    maps = read_json(workdir / ID_MAPS_FILE)
    return Dataset(users, items, ts, list(maps["users"]), list(maps["items"]))


def save_split(split: IntervalSplit, workdir, base_fraction: float, source_hash: str = "") -> dict:
    """One file per interval plus a manifest with sizes, id maps and stats."""
    out = Path(workdir) / SPLIT_DIR
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("interval_*.tsv"):
        old.unlink()
    files = []
    for t, iv in enumerate(split.intervals):
        name = f"interval_{t}.tsv"
        _write_triples(out / name, iv.users, iv.items, iv.timestamps)
        files.append({"name": name, "sha256": file_sha256(out / name)})
    manifest = {
        "base_fraction": base_fraction,
        "n_incremental": split.n_incremental,
        "sizes": split.sizes(),
        "n_users_cumulative": list(split.n_users_cumulative),
        "n_items_cumulative": list(split.n_items_cumulative),
        "id_maps": {"users": split.user_ids, "items": split.item_ids},
        "stats": interval_stats(split).as_dicts(),
        "files": files,
        "fingerprint": split.fingerprint().hex(),
        "source_manifest_hash": source_hash,
    }
    manifest["manifest_hash"] = content_hash(manifest)
    write_json(out / SPLIT_MANIFEST, manifest)
    return manifest


def load_split(workdir) -> tuple[IntervalSplit, dict]:
    out = Path(workdir) / SPLIT_DIR
    if not (out / SPLIT_MANIFEST).exists():
        raise ValidationError(f"no split in {workdir}; run `split` first")
    manifest = read_json(out / SPLIT_MANIFEST)
    intervals = []
    for entry in manifest["files"]:
        users, items, ts = _read_triples(out / entry["name"])
        intervals.append(Interval(users, items, ts))
    split = IntervalSplit(
        intervals,
        list(manifest["n_users_cumulative"]),
        list(manifest["n_items_cumulative"]),
        list(manifest["id_maps"]["users"]),
        list(manifest["id_maps"]["items"]),
    )
    if split.sizes() != manifest["sizes"]:
        raise ValidationError(f"split files in {out} do not match the manifest sizes")
    return split, manifest


def model_path(workdir, t: int) -> Path:
    return Path(workdir) / MODEL_DIR / f"mod_t{t}.snap"
