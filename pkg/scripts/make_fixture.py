"""Write the planted two-cluster fixture as interactions.tsv + items.jsonl.

    python scripts/make_fixture.py data/fixture
"""

import argparse

from mllmrec.synthetic import write_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--users", type=int, default=200)
    ap.add_argument("--items", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    inter, items = write_fixture(args.out_dir, n_users=args.users, n_items=args.items,
                                 seed=args.seed)
    print(f"wrote {inter} and {items}")


if __name__ == "__main__":
    main()
