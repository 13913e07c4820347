import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import kcore_by_hand

from mllmrec.corpus import (BadRatios, EmptyAfterFilter, InteractionMatrix, MalformedLine,
                            RawInteractions, index, kcore_filter, load_interactions, load_split,
                            save_split, split)


def write(tmp_path, text):
    p = tmp_path / "inter.tsv"
    p.write_text(text, encoding="utf-8")
    return p


def test_load_dedups_identical_pairs(tmp_path):
    raw = load_interactions(write(tmp_path, "u1\ti1\nu1\ti1\n"))
    assert len(raw) == 1


def test_load_parses_timestamps(tmp_path):
    raw = load_interactions(write(tmp_path, "u1\ti1\t100\nu2\ti1\t90\n"))
    assert len(raw) == 2
    assert {r.user for r in raw.records} == {"u1", "u2"}
    assert {r.item for r in raw.records} == {"i1"}
    assert [r.timestamp for r in raw.records] == [100, 90]


def test_load_keeps_first_timestamp(tmp_path):
    raw = load_interactions(write(tmp_path, "u1\ti1\t5\nu1\ti1\t9\n"))
    assert raw.records[0].timestamp == 5


def test_load_malformed_line_number(tmp_path):
    with pytest.raises(MalformedLine) as err:
        load_interactions(write(tmp_path, "u1\n"))
    assert err.value.line_no == 1
    with pytest.raises(MalformedLine) as err:
        load_interactions(write(tmp_path, "u1\ti1\nu2\ti2\tx\ty\n"))
    assert err.value.line_no == 2


def test_load_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.tsv"):
        load_interactions(tmp_path / "nope.tsv")


def test_kcore_keeps_full_block():
    pairs = [(f"u{u}", f"i{i}") for u in range(6) for i in range(6)]
    out = kcore_filter(RawInteractions.from_pairs(pairs), 5)
    assert len(out) == 36


def test_kcore_drops_single_interaction_user():
    pairs = [(f"u{u}", f"i{i}") for u in range(6) for i in range(6)] + [("lonely", "i0")]
    out = kcore_filter(RawInteractions.from_pairs(pairs), 5)
    assert "lonely" not in {r.user for r in out.records}
    assert len(out) == 36


def test_kcore_cascade():
    # u1..u5 x i1..i5 is a 5-core; u6 touches i1..i4 plus i6, which only u6 has.
    # i6 goes first, leaving u6 with 4 interactions, so u6 goes too.
    pairs = [(f"u{u}", f"i{i}") for u in range(1, 6) for i in range(1, 6)]
    pairs += [("u6", f"i{i}") for i in (1, 2, 3, 4, 6)]
    out = kcore_filter(RawInteractions.from_pairs(pairs), 5)
    assert {r.user for r in out.records} == {f"u{u}" for u in range(1, 6)}
    assert {r.item for r in out.records} == {f"i{i}" for i in range(1, 6)}
    assert {(r.user, r.item) for r in out.records} == kcore_by_hand(pairs, 5)


def test_kcore_k1_is_identity():
    raw = RawInteractions.from_pairs([("a", "x"), ("b", "y"), ("a", "y")])
    assert kcore_filter(raw, 1) == raw


def test_kcore_empty():
    with pytest.raises(EmptyAfterFilter):
        kcore_filter(RawInteractions.from_pairs([("a", "x")]), 5)


pair_lists = st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=150)


@settings(max_examples=60, deadline=None)
@given(pair_lists, st.integers(1, 4))
def test_kcore_matches_hand_fixpoint_and_is_idempotent(pairs, k):
    pairs = [(f"u{u}", f"i{i}") for u, i in pairs]
    expected = kcore_by_hand(pairs, k)
    raw = RawInteractions.from_pairs(pairs)
    if not expected:
        with pytest.raises(EmptyAfterFilter):
            kcore_filter(raw, k)
        return
    once = kcore_filter(raw, k)
    assert {(r.user, r.item) for r in once.records} == expected
    assert kcore_filter(once, k) == once
    m = index(once)
    users, items = m.degrees()
    assert users.min() >= k and items.min() >= k


def test_index_first_appearance():
    m = index(RawInteractions.from_pairs([("u1", "i1"), ("u2", "i1")]))
    assert (m.n_users, m.n_items) == (2, 1)
    assert m.by_item[0].tolist() == [0, 1]
    m = index(RawInteractions.from_pairs([("a", "x"), ("a", "y")]))
    assert m.by_user[0].tolist() == [0, 1]
    assert m.item_keys == ("x", "y")


def test_index_empty():
    with pytest.raises(ValueError):
        index(RawInteractions(()))


@settings(max_examples=50, deadline=None)
@given(pair_lists)
def test_index_transpose_agrees(pairs):
    m = index(RawInteractions.from_pairs([(f"u{u}", f"i{i}") for u, i in pairs]))
    from_users = {(u, int(i)) for u in range(m.n_users) for i in m.by_user[u]}
    from_items = {(int(u), i) for i in range(m.n_items) for u in m.by_item[i]}
    assert from_users == from_items
    assert len(from_users) == len(set(pairs))


def _one_user(n):
    return InteractionMatrix.from_pairs(1, n, [0] * n, list(range(n)))


def test_split_ten_items_is_8_1_1():
    s = split(_one_user(10), seed=3)
    assert (len(s.train.by_user[0]), len(s.valid[0]), len(s.test[0])) == (8, 1, 1)


def test_split_five_items_keeps_four_in_train():
    for seed in range(20):
        s = split(_one_user(5), seed=seed)
        assert len(s.train.by_user[0]) == 4
        assert len(s.valid[0]) <= 1 and len(s.test[0]) <= 1
        assert len(s.valid[0]) + len(s.test[0]) == 1


def test_split_deterministic_and_seed_sensitive(rng):
    from conftest import random_matrix
    m = random_matrix(rng, 30, 40, 0.4)
    a, b, c = split(m, seed=1), split(m, seed=1), split(m, seed=2)
    assert all(np.array_equal(x, y) for x, y in zip(a.valid, b.valid))
    assert all(np.array_equal(x, y) for x, y in zip(a.train.by_user, b.train.by_user))
    assert any(not np.array_equal(x, y) for x, y in zip(a.valid, c.valid))


def test_split_bad_ratios():
    with pytest.raises(BadRatios):
        split(_one_user(5), (0.8, 0.1, 0.2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=10), st.integers(0, 2**16))
def test_split_partitions_each_user(sizes, seed):
    users, items = [], []
    for u, n in enumerate(sizes):
        users += [u] * n
        items += list(range(n))
    m = InteractionMatrix.from_pairs(len(sizes), max(sizes), users, items)
    s = split(m, seed=seed)
    for u, n in enumerate(sizes):
        tr, va, te = set(s.train.by_user[u].tolist()), set(s.valid[u].tolist()), set(s.test[u].tolist())
        assert tr | va | te == set(range(n))
        assert len(tr) + len(va) + len(te) == n
        assert len(tr) >= 1


def test_split_round_trip(tmp_path, rng):
    from conftest import random_matrix
    m = random_matrix(rng, 12, 15, 0.5)
    ts = {pair: 1000 + k for k, pair in enumerate(zip(*map(np.ndarray.tolist, m.pairs())))}
    m = InteractionMatrix.from_pairs(m.n_users, m.n_items, *m.pairs(), timestamps=ts,
                                     user_keys=[f"u{u}" for u in range(12)],
                                     item_keys=[f"i{i}" for i in range(15)])
    s = split(m, seed=4)
    save_split(s, tmp_path, all_timestamps=m.timestamps)
    back = load_split(tmp_path)
    assert back.seed == 4
    assert all(np.array_equal(x, y) for x, y in zip(back.train.by_user, s.train.by_user))
    assert all(np.array_equal(x, y) for x, y in zip(back.valid, s.valid))
    assert all(np.array_equal(x, y) for x, y in zip(back.test, s.test))
    assert back.train.timestamps == s.train.timestamps
    assert (tmp_path / "user_map.tsv").read_text().splitlines()[0] == "u0\t0"
