"""Cosine-similarity histogram over plain KNN edges (no threshold).

Reads an EMB1 item store, or uses planted two-cluster embeddings when no
store is given, and prints bin counts plus the mass below a cutoff.

    python scripts/similarity_histogram.py --store work/encode/items.emb --k 10
"""

import argparse

from mllmrec.embedder import store_read
from mllmrec.graph import edge_similarity_histogram
from mllmrec.synthetic import planted_embeddings


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--store", help="EMB1 item feature store")
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--bins", type=int, default=20)
    ap.add_argument("--cutoff", type=float, default=0.5, help="must be a bin edge")
    args = ap.parse_args()

    rows = store_read(args.store) if args.store else planted_embeddings(50, 16)[0]
    hist = edge_similarity_histogram(rows, args.k, args.bins)
    width = max(1, int(hist.counts.max()))
    for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
        print(f"[{lo:+.2f}, {hi:+.2f}) {c:7d} " + "#" * int(50 * c / width))
    below = hist.mass_below(args.cutoff)
    print(f"edges: {hist.n_edges}; below {args.cutoff}: {below} ({below / hist.n_edges:.1%})")


if __name__ == "__main__":
    main()
