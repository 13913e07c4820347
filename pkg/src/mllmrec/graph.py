"""Refined item-item graph construction and propagation.

Pipeline: thresholded cosine KNN (``semantic_graph``) + Jaccard audience KNN
(``cooccur_graph``) -> ``merge`` -> degree ``normalize`` -> ``propagate``.
Graphs stay directed as built; ``symmetrize`` is opt-in.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from mllmrec.corpus import InteractionMatrix
from mllmrec.errors import DimMismatch

STAGES = ("semantic", "cooccur", "merged", "normalized")
DISABLED_THRESHOLD = -1.0


class GraphError(ValueError):
    pass


class ZeroNormRow(GraphError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"embedding row {index} has zero norm")


class ParseError(GraphError):
    def __init__(self, line: int, reason: str):
        self.line = line
        super().__init__(f"line {line}: {reason}")


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Directed weighted item-item graph; edges sorted by (src, dst)."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    stage: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise GraphError(f"unknown stage {self.stage!r}")
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        w = np.asarray(self.weight, dtype=np.float64)
        if not (src.shape == dst.shape == w.shape) or src.ndim != 1:
            raise GraphError("src, dst and weight must be equal-length vectors")
        if src.size:
            if min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= self.n:
                raise GraphError("edge endpoint out of range")
            if np.any(src == dst):
                raise GraphError("self-loops are not allowed")
        order = np.lexsort((dst, src))
        src, dst, w = src[order], dst[order], w[order]
        if src.size > 1 and np.any((src[1:] == src[:-1]) & (dst[1:] == dst[:-1])):
            raise GraphError("duplicate edge")
        _check_stage_weights(self.stage, w)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weight", w)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def edges(self) -> dict[tuple[int, int], float]:
        return {(int(a), int(b)): float(w)
                for a, b, w in zip(self.src, self.dst, self.weight)}

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n)

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weight, (self.src, self.dst)), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.src, self.dst] = self.weight
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseGraph):
            return NotImplemented
        return (self.n == other.n and self.stage == other.stage
                and np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst)
                and np.array_equal(self.weight, other.weight))


def _check_stage_weights(stage: str, w: np.ndarray) -> None:
    if not w.size:
        return
    if not np.all(np.isfinite(w)):
        raise GraphError("non-finite edge weight")
    if stage == "semantic" and not np.all(w == 1.0):
        raise GraphError("semantic edges must have weight 1")
    if stage == "cooccur" and not (w.min() > 0 and w.max() <= 1):
        raise GraphError("co-occurrence weights must lie in (0, 1]")
    if stage == "merged" and not (w.min() > 0 and w.max() <= 2):
        raise GraphError("merged weights must lie in (0, 2]")
    if stage == "normalized" and w.min() < 0:
        raise GraphError("normalized weights must be non-negative")


def empty_graph(n: int, stage: str) -> SparseGraph:
    e = np.empty(0, dtype=np.int64)
    return SparseGraph(n, e, e, np.empty(0), stage)


def _topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row; ties go to the lower index."""
    k = min(k, scores.shape[1])
    # stable sort on the negated scores keeps equal scores in column order
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def semantic_knn(items: np.ndarray, k: int, alpha: float,
                 block_size: int = 1024) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(src, dst, cosine) of the thresholded KNN edges, computed in row blocks."""
    items = np.asarray(items, dtype=np.float64)
    n = items.shape[0]
    if n < 2:
        raise GraphError("semantic graph needs at least 2 items")
    if k < 1:
        raise GraphError("k must be >= 1")
    norms = np.linalg.norm(items, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormRow(int(zero[0]))
    unit = items / norms[:, None]
    src, dst, sim = [], [], []
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        block = unit[start:stop] @ unit.T
        rows = np.arange(stop - start)
        block[rows, rows + start] = -np.inf
        top = _topk_rows(block, k)
        vals = np.take_along_axis(block, top, axis=1)
        keep = np.isfinite(vals) & (vals >= alpha)
        r, c = np.nonzero(keep)
        src.append(r + start)
        dst.append(top[r, c])
        sim.append(vals[r, c])
    return np.concatenate(src), np.concatenate(dst), np.concatenate(sim)


def semantic_graph(items: np.ndarray, k: int, alpha: float,
                   block_size: int = 1024) -> SparseGraph:
    """Cosine KNN graph keeping only neighbors with similarity >= ``alpha``.

    Edge weights are binarized to 1. Pass ``alpha=-1`` for plain KNN.
    """
    src, dst, _ = semantic_knn(items, k, alpha, block_size)
    return SparseGraph(items.shape[0], src, dst, np.ones(src.size), "semantic")


def jaccard_rows(train: InteractionMatrix, start: int, stop: int,
                 item_users: sp.csr_matrix | None = None) -> sp.csr_matrix:
    """Jaccard coefficients between items ``start:stop`` and every item.

    Only pairs with a nonzero audience intersection are stored; the diagonal is
    dropped.
    """
    if item_users is None:
        item_users = train.csr().T.tocsr()
    deg = np.diff(item_users.indptr)
    inter = (item_users[start:stop] @ item_users.T).tocoo()
    rows, cols, counts = inter.row, inter.col, inter.data
    off_diag = rows + start != cols
    rows, cols, counts = rows[off_diag], cols[off_diag], counts[off_diag]
    union = deg[rows + start] + deg[cols] - counts
    vals = counts / union
    return sp.csr_matrix((vals, (rows, cols)), shape=(stop - start, train.n_items))


def cooccur_graph(train: InteractionMatrix, k: int, block_size: int = 1024) -> SparseGraph:
    """Top-``k`` audience-Jaccard neighbors of every item, weighted by Jaccard."""
    if train.n_interactions == 0:
        raise GraphError("empty training matrix")
    if k < 1:
        raise GraphError("k must be >= 1")
    n = train.n_items
    item_users = train.csr().T.tocsr()
    src, dst, wts = [], [], []
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        block = jaccard_rows(train, start, stop, item_users)
        block.sort_indices()
        for r in range(stop - start):
            lo, hi = block.indptr[r], block.indptr[r + 1]
            cols, vals = block.indices[lo:hi], block.data[lo:hi]
            order = np.lexsort((cols, -vals))[:k]
            src.append(np.full(order.size, start + r))
            dst.append(cols[order])
            wts.append(vals[order])
    if not src:
        return empty_graph(n, "cooccur")
    return SparseGraph(n, np.concatenate(src), np.concatenate(dst), np.concatenate(wts),
                       "cooccur")


def _from_csr(m: sp.spmatrix, stage: str) -> SparseGraph:
    m = sp.coo_matrix(m)
    return SparseGraph(m.shape[0], m.row, m.col, m.data, stage)


def merge(semantic: SparseGraph, cooccur: SparseGraph) -> SparseGraph:
    """Elementwise sum of the semantic and co-occurrence adjacencies."""
    if semantic.stage != "semantic" or cooccur.stage != "cooccur":
        raise GraphError(f"merge expects (semantic, cooccur), got ({semantic.stage}, {cooccur.stage})")
    if semantic.n != cooccur.n:
        raise DimMismatch(f"graphs over {semantic.n} and {cooccur.n} items")
    total = (semantic.to_csr() + cooccur.to_csr()).tocsr()
    total.eliminate_zeros()
    return _from_csr(total, "merged")


def symmetrize(merged: SparseGraph) -> SparseGraph:
    """max(S, S^T): an edge in either direction is kept in both."""
    m = merged.to_csr()
    return _from_csr(m.maximum(m.T), merged.stage)


def normalize(merged: SparseGraph) -> tuple[SparseGraph, np.ndarray]:
    """Scale each edge by the inverse square roots of both endpoints' row sums.

    Returns the normalized graph and the row-sum degree vector. Degree-0 items
    contribute a factor of 0.
    """
    if merged.stage != "merged":
        raise GraphError(f"normalize expects a merged graph, got {merged.stage}")
    deg = np.bincount(merged.src, weights=merged.weight, minlength=merged.n).astype(np.float64)
    root = np.sqrt(deg)
    denom = root[merged.src] * root[merged.dst]
    w = np.zeros_like(merged.weight)
    ok = denom > 0
    w[ok] = merged.weight[ok] / denom[ok]
    return SparseGraph(merged.n, merged.src, merged.dst, w, "normalized"), deg


def propagate(normalized: SparseGraph, e0: np.ndarray, layers: int) -> np.ndarray:
    """Sum of ``A^l @ e0`` for l = 0..layers."""
    if normalized.stage != "normalized":
        raise GraphError(f"propagate expects a normalized graph, got {normalized.stage}")
    e0 = np.asarray(e0, dtype=np.float64)
    if e0.shape[0] != normalized.n:
        raise DimMismatch(f"{e0.shape[0]} feature rows for a {normalized.n}-item graph")
    if layers < 0:
        raise GraphError("layers must be >= 0")
    adj = normalized.to_csr()
    out = e0.copy()
    cur = e0
    for _ in range(layers):
        cur = adj @ cur
        out += cur
    return out


def build_refined_graph(items: np.ndarray, train: InteractionMatrix, k_semantic: int,
                        alpha: float, k_cooccur: int, use_cooccur: bool = True,
                        symmetric: bool = False) -> dict[str, SparseGraph]:
    """All graph stages for one configuration, keyed by stage name."""
    sem = semantic_graph(items, k_semantic, alpha)
    co = cooccur_graph(train, k_cooccur) if use_cooccur else empty_graph(train.n_items, "cooccur")
    merged = merge(sem, co)
    if symmetric:
        merged = symmetrize(merged)
    norm, _ = normalize(merged)
    return {"semantic": sem, "cooccur": co, "merged": merged, "normalized": norm}


# diagnostics ----------------------------------------------------------------

@dataclass(frozen=True)
class SimilarityHistogram:
    counts: np.ndarray
    edges: np.ndarray
    similarities: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.counts.sum())

    def mass_below(self, cutoff: float) -> int:
        """Edges in bins lying entirely below ``cutoff`` (which must be a bin edge)."""
        hit = np.flatnonzero(np.isclose(self.edges, cutoff, rtol=0, atol=1e-12))
        if not hit.size:
            raise ValueError(f"{cutoff} is not a bin edge")
        return int(self.counts[:hit[0]].sum())


def edge_similarity_histogram(items: np.ndarray, k: int, bins=20,
                              value_range=(-1.0, 1.0)) -> SimilarityHistogram:
    """Histogram of cosine similarity over plain (unthresholded) KNN edges."""
    _, _, sims = semantic_knn(items, k, DISABLED_THRESHOLD)
    # cosines of identical vectors can exceed 1 by an ulp
    clipped = np.clip(sims, value_range[0], value_range[1])
    counts, edges = np.histogram(clipped, bins=bins, range=value_range)
    return SimilarityHistogram(counts, edges, sims)


# plug-and-play file format ------------------------------------------------------

def export_graph(g: SparseGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n={g.n} stage={g.stage}\n")
        for a, b, w in zip(g.src.tolist(), g.dst.tolist(), g.weight.tolist()):
            fh.write(f"{a}\t{b}\t{w:.17g}\n")


def import_graph(path: str | Path) -> SparseGraph:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(1, "missing header")
    header = dict(tok.split("=", 1) for tok in lines[0].split() if "=" in tok)
    try:
        n = int(header["n"])
        stage = header["stage"]
    except (KeyError, ValueError):
        raise ParseError(1, "header must read 'n=<count> stage=<tag>'") from None
    if stage not in STAGES:
        raise ParseError(1, f"unknown stage {stage!r}")
    src, dst, wts = [], [], []
    seen = set()
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(line_no, "expected src<TAB>dst<TAB>weight")
        try:
            a, b, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError(line_no, "non-numeric field") from None
        if not (0 <= a < n and 0 <= b < n):
            raise ParseError(line_no, f"index out of range for n={n}")
        if a == b:
            raise ParseError(line_no, "self-loop")
        if (a, b) in seen:
            raise ParseError(line_no, "duplicate edge")
        seen.add((a, b))
        src.append(a)
        dst.append(b)
        wts.append(w)
    try:
        return SparseGraph(n, np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                           np.array(wts, dtype=np.float64), stage)
    except GraphError as exc:
        raise ParseError(1, str(exc)) from None
