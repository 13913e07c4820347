"""Full-ranking Top-N evaluation with Recall@k and NDCG@k."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mllmrec.corpus import DatasetSplit, InteractionMatrix
from mllmrec.errors import ShapeMismatch
from mllmrec.model import ModelParams, mlp_forward


def rank_scores(scores: np.ndarray, masked: Sequence[np.ndarray], top_n: int) -> list[np.ndarray]:
    """Top-``top_n`` column indices per row by descending score, skipping masked items.

    Ties are broken by the lower item index.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    if scores.ndim != 2 or len(masked) != scores.shape[0]:
        raise ShapeMismatch("need one mask entry per score row")
    mask = np.zeros(scores.shape, dtype=bool)
    for r, items in enumerate(masked):
        mask[r, np.asarray(items, dtype=np.int64)] = True
    scores[mask] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")[:, :top_n]
    out = []
    for r in range(scores.shape[0]):
        row = order[r]
        out.append(row[~mask[r, row]])
    return out


def project(params: ModelParams, user_embeds: np.ndarray, item_embeds: np.ndarray,
            slope: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    return (mlp_forward(params.user, user_embeds, slope),
            mlp_forward(params.item, item_embeds, slope))


def rank_all(params: ModelParams, user_embeds: np.ndarray, item_embeds: np.ndarray,
             train: InteractionMatrix, users: Sequence[int] | None = None, top_n: int = 20,
             slope: float = 0.01, chunk: int = 2048) -> list[np.ndarray]:
    """Rank every non-train item for each user in ``users`` (default: all)."""
    if item_embeds.shape[0] != train.n_items:
        raise ShapeMismatch(f"{item_embeds.shape[0]} item rows for {train.n_items} items")
    users = np.arange(train.n_users) if users is None else np.asarray(users, dtype=np.int64)
    h_items = mlp_forward(params.item, item_embeds, slope)
    out: list[np.ndarray] = []
    for start in range(0, users.size, chunk):
        batch = users[start:start + chunk]
        h_users = mlp_forward(params.user, user_embeds[batch], slope)
        out.extend(rank_scores(h_users @ h_items.T, [train.by_user[u] for u in batch], top_n))
    return out


def _user_terms(ranked, truth, k):
    for rank_list, t in zip(ranked, truth):
        t = set(np.asarray(t).tolist())
        if not t:
            continue
        yield [int(i) in t for i in np.asarray(rank_list)[:k]], len(t)


def recall_at_k(ranked: Sequence[Sequence[int]], truth: Sequence[Sequence[int]], k: int) -> float:
    """Mean of |top-k ∩ truth| / |truth| over users with nonempty truth."""
    vals = [sum(hits) / n for hits, n in _user_terms(ranked, truth, k)]
    return float(np.mean(vals)) if vals else 0.0


def ndcg_at_k(ranked: Sequence[Sequence[int]], truth: Sequence[Sequence[int]], k: int) -> float:
    vals = []
    for hits, n in _user_terms(ranked, truth, k):
        dcg = sum(1.0 / math.log2(p + 2) for p, h in enumerate(hits) if h)
        idcg = sum(1.0 / math.log2(p + 2) for p in range(min(k, n)))
        vals.append(dcg / idcg)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users_evaluated: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {**self.meta,
                "recall": {str(k): v for k, v in sorted(self.recall.items())},
                "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
                "n_users_evaluated": self.n_users_evaluated}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


def metrics_from_rankings(ranked, truth, ks=(10, 20)) -> MetricsReport:
    n = sum(1 for t in truth if len(t))
    return MetricsReport({k: recall_at_k(ranked, truth, k) for k in ks},
                         {k: ndcg_at_k(ranked, truth, k) for k in ks}, n)


def evaluate(params: ModelParams, split: DatasetSplit, user_embeds: np.ndarray,
             item_embeds: np.ndarray, ks=(10, 20), which: str = "test",
             slope: float = 0.01) -> MetricsReport:
    """Recall/NDCG against the valid or test split, with train items masked."""
    if which not in ("valid", "test"):
        raise ValueError("which must be 'valid' or 'test'")
    truth = split.valid if which == "valid" else split.test
    users = [u for u in range(split.n_users) if len(truth[u])]
    ranked = rank_all(params, user_embeds, item_embeds, split.train, users,
                      top_n=max(ks), slope=slope)
    return metrics_from_rankings(ranked, [truth[u] for u in users], ks)


def validation_recall(params: ModelParams, split: DatasetSplit, user_embeds: np.ndarray,
                      item_embeds: np.ndarray, k: int = 20, slope: float = 0.01) -> float:
    return evaluate(params, split, user_embeds, item_embeds, ks=(k,), which="valid",
                    slope=slope).recall[k]


def write_topn(ranked: Sequence[np.ndarray], users: Sequence[int], path: str | Path,
               user_keys=(), item_keys=()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in zip(users, ranked):
            uk = user_keys[u] if user_keys else str(u)
            names = [item_keys[i] if item_keys else str(i) for i in items]
            fh.write(uk + "\t" + ",".join(names) + "\n")
