"""Encode described items and users with a sentence-transformers model into a
keyed store usable with ``encoder: file``.

Requires ``pip install sentence-transformers`` (not a package dependency).

    python scripts/precompute_embeddings.py work/describe sentence.emb \\
        --model sentence-transformers/all-MiniLM-L6-v2
"""

import argparse
from pathlib import Path

import numpy as np

from mllmrec.descriptor import read_items, read_users
from mllmrec.embedder import write_keyed_store


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("describe_dir", type=Path, help="directory holding items.jsonl and users.jsonl")
    ap.add_argument("out", type=Path)
    ap.add_argument("--model", default="sentence-transformers/all-MiniLM-L6-v2")
    ap.add_argument("--batch-size", type=int, default=64)
    args = ap.parse_args()

    from sentence_transformers import SentenceTransformer

    texts = [r.multimodal_desc for r in read_items(args.describe_dir / "items.jsonl")]
    texts += [r.preference_text for r in read_users(args.describe_dir / "users.jsonl")]
    texts = sorted({t for t in texts if t})
    vectors = SentenceTransformer(args.model).encode(texts, batch_size=args.batch_size,
                                                     show_progress_bar=True)
    write_keyed_store(texts, np.asarray(vectors), args.out)
    print(f"wrote {len(texts)} x {vectors.shape[1]} to {args.out}")


if __name__ == "__main__":
    main()
