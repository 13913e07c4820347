"""Planted-cluster fixtures for offline end-to-end runs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from mllmrec.corpus import RawInteractions


def planted_clusters(n_users: int = 200, n_items: int = 100, n_clusters: int = 2,
                     min_items: int = 49, seed: int = 0) -> tuple[RawInteractions, list[dict]]:
    """Users in cluster c interact with ``min_items``..all items of cluster c only.

    Returns the interactions (with timestamps) and item metadata records.
    """
    rng = np.random.default_rng(seed)
    item_cluster = np.arange(n_items) * n_clusters // n_items
    user_cluster = np.arange(n_users) * n_clusters // n_users
    records = []
    for u in range(n_users):
        own = np.flatnonzero(item_cluster == user_cluster[u])
        size = int(rng.integers(min(min_items, own.size), own.size + 1))
        chosen = rng.choice(own, size=size, replace=False)
        times = np.sort(rng.integers(1_000_000, 2_000_000, size=size))
        for i, t in zip(chosen, times):
            records.append((f"u{u:04d}", f"i{int(i):04d}", int(t)))
    meta = [{"item_key": f"i{i:04d}",
             "text_meta": f"product {i} from line {int(item_cluster[i])}",
             "image_ref": f"synthetic://image/{i}"} for i in range(n_items)]
    return RawInteractions.from_pairs(records), meta


def planted_embeddings(n_per_cluster: int, dim: int, spread: float = 0.1,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two tight clusters around orthogonal centers; returns (rows, cluster labels)."""
    rng = np.random.default_rng(seed)
    centers = np.zeros((2, dim))
    centers[0, 0] = 1.0
    centers[1, 1] = 1.0
    labels = np.repeat([0, 1], n_per_cluster)
    rows = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    return rows, labels


def write_fixture(out_dir: str | Path, **kwargs) -> tuple[Path, Path]:
    """Write ``interactions.tsv`` and ``items.jsonl``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw, meta = planted_clusters(**kwargs)
    inter = out / "interactions.tsv"
    with open(inter, "w", encoding="utf-8") as fh:
        for r in raw.records:
            fh.write(f"{r.user}\t{r.item}\t{r.timestamp}\n")
    items = out / "items.jsonl"
    with open(items, "w", encoding="utf-8") as fh:
        for m in meta:
            fh.write(json.dumps(m) + "\n")
    return inter, items
