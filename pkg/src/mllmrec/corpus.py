"""Interaction ingestion: parsing, k-core filtering, indexing and the per-user split."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class CorpusError(ValueError):
    pass


class MalformedLine(CorpusError):
    def __init__(self, line_no: int, reason: str = "expected 2 or 3 tab-separated fields"):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


class EmptyAfterFilter(CorpusError):
    pass


class BadRatios(CorpusError):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int | None = None


@dataclass(frozen=True)
class RawInteractions:
    records: tuple[Interaction, ...]

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_pairs(cls, pairs) -> "RawInteractions":
        """Build from ``(user, item)`` or ``(user, item, ts)`` tuples, deduplicating."""
        seen: dict[tuple[str, str], Interaction] = {}
        for p in pairs:
            user, item = str(p[0]), str(p[1])
            ts = int(p[2]) if len(p) > 2 and p[2] is not None else None
            if not user or not item:
                raise CorpusError("empty user or item key")
            if (user, item) not in seen:
                seen[(user, item)] = Interaction(user, item, ts)
        return cls(tuple(seen.values()))


def load_interactions(path: str | Path) -> RawInteractions:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interactions file not found: {path}")
    seen: dict[tuple[str, str], Interaction] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise MalformedLine(line_no)
            user, item = parts[0], parts[1]
            if not user or not item:
                raise MalformedLine(line_no, "empty user or item key")
            ts = None
            if len(parts) == 3 and parts[2] != "":
                try:
                    ts = int(parts[2])
                except ValueError:
                    raise MalformedLine(line_no, f"bad timestamp {parts[2]!r}") from None
            if (user, item) not in seen:
                seen[(user, item)] = Interaction(user, item, ts)
    return RawInteractions(tuple(seen.values()))


def kcore_filter(raw: RawInteractions, k: int = 5) -> RawInteractions:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    records = list(raw.records)
    while True:
        users = Counter(r.user for r in records)
        items = Counter(r.item for r in records)
        kept = [r for r in records if users[r.user] >= k and items[r.item] >= k]
        if len(kept) == len(records):
            break
        records = kept
    if not records:
        raise EmptyAfterFilter(f"no interactions survive {k}-core filtering")
    return RawInteractions(tuple(records))


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Boolean user x item matrix with row and column adjacency lists.

    ``timestamps`` maps ``(user, item)`` to the interaction time when known.
    """

    n_users: int
    n_items: int
    by_user: tuple[np.ndarray, ...]
    by_item: tuple[np.ndarray, ...]
    timestamps: dict[tuple[int, int], int] = field(default_factory=dict)
    user_keys: tuple[str, ...] = ()
    item_keys: tuple[str, ...] = ()

    @classmethod
    def from_pairs(cls, n_users, n_items, users, items, timestamps=None,
                   user_keys=(), item_keys=()) -> "InteractionMatrix":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= n_users):
            raise IndexError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= n_items):
            raise IndexError("item index out of range")
        m = sp.csr_matrix((np.ones(users.size, dtype=np.int8), (users, items)),
                          shape=(n_users, n_items))
        m.sum_duplicates()
        m.sort_indices()
        mt = m.T.tocsr()
        mt.sort_indices()
        by_user = tuple(m.indices[m.indptr[u]:m.indptr[u + 1]].astype(np.int64)
                        for u in range(n_users))
        by_item = tuple(mt.indices[mt.indptr[i]:mt.indptr[i + 1]].astype(np.int64)
                        for i in range(n_items))
        return cls(n_users, n_items, by_user, by_item, dict(timestamps or {}),
                   tuple(user_keys), tuple(item_keys))

    @property
    def n_interactions(self) -> int:
        return sum(len(x) for x in self.by_user)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All observed (user, item) pairs, ordered by user then item."""
        users = np.repeat(np.arange(self.n_users, dtype=np.int64),
                          [len(x) for x in self.by_user])
        items = (np.concatenate(self.by_user) if self.n_users
                 else np.empty(0, dtype=np.int64))
        return users, items.astype(np.int64)

    def csr(self) -> sp.csr_matrix:
        users, items = self.pairs()
        return sp.csr_matrix((np.ones(users.size), (users, items)),
                             shape=(self.n_users, self.n_items))

    def degrees(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([len(x) for x in self.by_user], dtype=np.int64),
                np.array([len(x) for x in self.by_item], dtype=np.int64))


def index(raw: RawInteractions) -> InteractionMatrix:
    """Assign contiguous indices to users and items in order of first appearance."""
    if len(raw) == 0:
        raise ValueError("cannot index an empty interaction set")
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    users, items, ts = [], [], {}
    for r in raw.records:
        u = user_ids.setdefault(r.user, len(user_ids))
        i = item_ids.setdefault(r.item, len(item_ids))
        users.append(u)
        items.append(i)
        if r.timestamp is not None:
            ts[(u, i)] = r.timestamp
    return InteractionMatrix.from_pairs(len(user_ids), len(item_ids), users, items, ts,
                                        user_keys=tuple(user_ids), item_keys=tuple(item_ids))


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: InteractionMatrix
    valid: tuple[np.ndarray, ...]
    test: tuple[np.ndarray, ...]
    seed: int
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


def split(matrix: InteractionMatrix, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Per-user random train/valid/test partition.

    Train receives ``ceil(train_ratio * n)`` of a user's items (at least one).
    The held-out rest is divided between valid and test in proportion to their
    ratios; an odd leftover item goes to one of them at random, weighted by the
    ratios. A 10-item user splits 8/1/1, a 5-item user 4/1/0 or 4/0/1.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    held_ratio = ratios[1] + ratios[2]
    valid_share = ratios[1] / held_ratio if held_ratio > 0 else 0.0
    rng = np.random.default_rng(seed)
    tr_u, tr_i, valid, test = [], [], [], []
    for u, items in enumerate(matrix.by_user):
        n = len(items)
        perm = items[rng.permutation(n)]
        # epsilon keeps 0.8 * 10 from rounding up past 8
        n_train = min(n, max(1, math.ceil(ratios[0] * n - 1e-9)))
        held = n - n_train
        exact = held * valid_share
        n_valid = math.floor(exact + 1e-9)
        n_test = math.floor(held - exact + 1e-9)
        if n_valid + n_test < held:
            if rng.random() < valid_share:
                n_valid += 1
            else:
                n_test += 1
        valid.append(np.sort(perm[:n_valid]))
        test.append(np.sort(perm[n_valid:n_valid + n_test]))
        train_items = np.sort(perm[n_valid + n_test:])
        tr_u.extend([u] * len(train_items))
        tr_i.extend(train_items.tolist())
    kept = set(zip(tr_u, tr_i))
    train_ts = {k: t for k, t in matrix.timestamps.items() if k in kept}
    train = InteractionMatrix.from_pairs(matrix.n_users, matrix.n_items, tr_u, tr_i,
                                         timestamps=train_ts, user_keys=matrix.user_keys,
                                         item_keys=matrix.item_keys)
    return DatasetSplit(train, tuple(valid), tuple(test), seed, ratios)


# persistence ----------------------------------------------------------------

def write_id_map(keys, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for idx, key in enumerate(keys):
            fh.write(f"{key}\t{idx}\n")


def read_id_map(path: str | Path) -> tuple[str, ...]:
    keys: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedLine(line_no, "expected key<TAB>index")
            keys[int(parts[1])] = parts[0]
    if sorted(keys) != list(range(len(keys))):
        raise CorpusError(f"{path}: indices are not contiguous from 0")
    return tuple(keys[i] for i in range(len(keys)))


def _write_pairs(path, pairs, user_keys, item_keys, timestamps):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in pairs:
            ts = timestamps.get((u, i))
            tail = "" if ts is None else f"\t{ts}"
            fh.write(f"{user_keys[u]}\t{item_keys[i]}{tail}\n")


def save_split(split_: DatasetSplit, out_dir: str | Path, all_timestamps=None) -> None:
    """Write train/valid/test TSVs, the two ID maps and a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = split_.train
    ts = dict(all_timestamps or {})
    ts.update(tr.timestamps)
    write_id_map(tr.user_keys, out / "user_map.tsv")
    write_id_map(tr.item_keys, out / "item_map.tsv")
    users, items = tr.pairs()
    _write_pairs(out / "train.tsv", zip(users.tolist(), items.tolist()),
                 tr.user_keys, tr.item_keys, ts)
    for name, lists in (("valid", split_.valid), ("test", split_.test)):
        pairs = [(u, int(i)) for u, its in enumerate(lists) for i in its]
        _write_pairs(out / f"{name}.tsv", pairs, tr.user_keys, tr.item_keys, ts)
    manifest = {
        "seed": split_.seed,
        "ratios": list(split_.ratios),
        "n_users": tr.n_users,
        "n_items": tr.n_items,
        "n_train": tr.n_interactions,
        "n_valid": int(sum(len(x) for x in split_.valid)),
        "n_test": int(sum(len(x) for x in split_.test)),
    }
    (out / "split.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _read_indexed(path, user_ids, item_ids):
    raw = load_interactions(path)
    users, items, ts = [], [], {}
    for r in raw.records:
        if r.user not in user_ids or r.item not in item_ids:
            raise CorpusError(f"{path}: unknown key in ({r.user}, {r.item})")
        u, i = user_ids[r.user], item_ids[r.item]
        users.append(u)
        items.append(i)
        if r.timestamp is not None:
            ts[(u, i)] = r.timestamp
    return users, items, ts


def load_split(out_dir: str | Path) -> DatasetSplit:
    out = Path(out_dir)
    manifest = json.loads((out / "split.json").read_text(encoding="utf-8"))
    user_keys = read_id_map(out / "user_map.tsv")
    item_keys = read_id_map(out / "item_map.tsv")
    user_ids = {k: i for i, k in enumerate(user_keys)}
    item_ids = {k: i for i, k in enumerate(item_keys)}
    n_users, n_items = len(user_keys), len(item_keys)
    users, items, ts = _read_indexed(out / "train.tsv", user_ids, item_ids)
    train = InteractionMatrix.from_pairs(n_users, n_items, users, items, ts,
                                         user_keys=user_keys, item_keys=item_keys)
    held = []
    for name in ("valid", "test"):
        lists: list[list[int]] = [[] for _ in range(n_users)]
        hu, hi, _ = _read_indexed(out / f"{name}.tsv", user_ids, item_ids)
        for u, i in zip(hu, hi):
            lists[u].append(i)
        held.append(tuple(np.array(sorted(x), dtype=np.int64) for x in lists))
    return DatasetSplit(train, held[0], held[1], int(manifest["seed"]),
                        tuple(manifest["ratios"]))
