import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdm import fixture_path
from tdm.data import (
    BehaviorEvent,
    BehaviorType,
    Corpus,
    DatasetSplit,
    IngestError,
    SplitError,
    build_user_state,
    group_by_user,
    ingest,
    load_item_categories,
    partition_recent,
    split,
    window_sizes,
)


def write(path, text):
    path.write_text(text)
    return path


def click(user, item, ts, cat=0):
    return BehaviorEvent(user, item, cat, BehaviorType.CLICK, ts)


def user_events(n_users, per_user, start_user=1):
    return [click(u, 100 * u + k, 10 * k) for u in range(start_user, start_user + n_users) for k in range(per_user)]


class TestIngest:
    def test_keeps_ratings_of_four_and_above(self, tmp_path):
        p = write(tmp_path / "r.csv", "userId,movieId,rating,timestamp\n1,10,5,100\n1,11,4,101\n1,12,3,102\n")
        corpus, events = ingest(p)
        assert len(events) == 2
        assert all(e.behavior_type is BehaviorType.CLICK for e in events)
        assert corpus.item_ids.tolist() == [10, 11]

    def test_empty_file(self, tmp_path):
        p = write(tmp_path / "r.csv", "")
        with pytest.raises(IngestError, match="empty corpus"):
            ingest(p)

    def test_all_filtered_is_empty_corpus(self, tmp_path):
        p = write(tmp_path / "r.csv", "userId,movieId,rating,timestamp\n1,10,2,100\n")
        with pytest.raises(IngestError, match="empty corpus"):
            ingest(p)

    def test_malformed_line_reports_line_number(self, tmp_path):
        p = write(tmp_path / "r.csv", "userId,movieId,rating,timestamp\n1,10,5,100\n1,x,5,100\n")
        with pytest.raises(IngestError, match=":3:"):
            ingest(p)

    def test_tabular_behavior(self, tmp_path):
        p = write(tmp_path / "b.tsv", "1\t10\t3\tpv\t5\n1\t11\t4\tbuy\t6\n2\t10\t3\tcart\t7\n")
        corpus, events = ingest(p, "tabular_behavior")
        assert [e.behavior_type for e in events] == [BehaviorType.CLICK, BehaviorType.PURCHASE, BehaviorType.CART]
        assert corpus.category_of(11) == 4

    def test_tabular_bad_type(self, tmp_path):
        p = write(tmp_path / "b.tsv", "1\t10\t3\tteleport\t5\n")
        with pytest.raises(IngestError, match=":1:"):
            ingest(p, "tabular_behavior")

    def test_no_low_rating_survives_bundled_fixture(self):
        cats = load_item_categories(fixture_path("ml_1k_movies.csv"))
        corpus, events = ingest(fixture_path("ml_1k_ratings.csv"), item_categories=cats)
        assert len(events) == 1000
        assert all(e.rating >= 4 for e in events)
        assert set(corpus.item_ids.tolist()) == {e.item_id for e in events}
        assert all(corpus.category_of(i) >= 0 for i in corpus.item_ids)

    def test_multi_genre_pick_is_seeded(self, tmp_path):
        p = write(tmp_path / "m.csv", "movieId,title,genres\n" + "".join(f"{i},t,Action|Drama|War\n" for i in range(50)))
        a, b = load_item_categories(p, seed=1), load_item_categories(p, seed=1)
        assert a == b
        assert len(set(a.values())) > 1
        assert a != load_item_categories(p, seed=2)

    def test_corpus_save_load(self, tmp_path):
        corpus, _ = ingest(fixture_path("ml_1k_ratings.csv"))
        corpus.save(tmp_path / "c.tsv")
        assert Corpus.load(tmp_path / "c.tsv") == corpus


class TestSplit:
    def test_min_interactions_filter(self, tmp_path):
        rows = ["userId,movieId,rating,timestamp"]
        for user, n in ((1, 10), (2, 10), (3, 9)):
            rows += [f"{user},{100 + k},5,{1000 + k}" for k in range(n)]
        _, events = ingest(write(tmp_path / "r.csv", "\n".join(rows) + "\n"))
        sp = split(events, 0, 0, seed=0, min_interactions=10)
        assert 3 not in sp.events_by_user
        assert sorted(sp.train_users) == [1, 2]

    def test_deterministic(self):
        events = user_events(100, 10)
        a = split(events, 10, 10, seed=1)
        b = split(events, 10, 10, seed=1)
        assert a == b

    def test_seeds_differ(self):
        events = user_events(20, 10)
        a = split(events, 5, 5, seed=1)
        b = split(events, 5, 5, seed=2)
        assert a.test_users != b.test_users

    def test_disjoint_roles(self):
        sp = split(user_events(50, 10), 10, 5, seed=3)
        t, v, r = set(sp.test_users), set(sp.validation_users), set(sp.train_users)
        assert not (t & v or t & r or v & r)
        assert len(t) == 10 and len(v) == 5 and len(r) == 35

    def test_known_and_ground_truth_halves(self):
        events = user_events(3, 7) + user_events(1, 12, start_user=9)
        sp = split(events, 3, 0, seed=0, min_interactions=7)
        for u in sp.test_users:
            full = sp.events_by_user[u]
            known, truth = sp.known(u), sp.ground_truth(u)
            assert known + truth == full
            if len(full) == 7:
                assert (len(known), len(truth)) == (4, 3)

    def test_insufficient_users_names_counts(self):
        with pytest.raises(SplitError, match=r"need more than 10.*have 8"):
            split(user_events(8, 10), 5, 5, seed=0)

    def test_events_sorted_with_item_tiebreak(self):
        events = [click(1, 5, 10), click(1, 3, 10), click(1, 4, 5)] + [click(1, 20 + k, 20 + k) for k in range(10)]
        evs = group_by_user(events)[1]
        assert [e.item_id for e in evs[:3]] == [4, 3, 5]

    def test_save_load_byte_identical(self, tmp_path):
        sp = split(user_events(30, 12), 5, 5, seed=4)
        sp.save(tmp_path / "a")
        DatasetSplit.load(tmp_path / "a").save(tmp_path / "b")
        for name in ("events.jsonl", "users.jsonl", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert DatasetSplit.load(tmp_path / "a") == sp


class TestUserState:
    def test_no_events(self):
        st_ = build_user_state([], as_of=100, n_windows=10)
        assert st_.windows == ((),) * 10

    def test_twenty_events_two_per_window(self):
        evs = [click(1, k, k) for k in range(20)]
        st_ = build_user_state(evs, as_of=100, n_windows=10, max_behaviors=64)
        assert [len(w) for w in st_.windows] == [2] * 10
        assert st_.windows[0] == (19, 18)  # most recent first
        assert st_.windows[-1] == (1, 0)

    def test_single_window(self):
        evs = [click(1, k, k) for k in range(30)]
        st_ = build_user_state(evs, as_of=100, n_windows=1)
        assert len(st_.windows) == 1 and len(st_.windows[0]) == 30

    def test_cap_and_as_of(self):
        evs = [click(1, k, k) for k in range(100)]
        st_ = build_user_state(evs, as_of=79, n_windows=4, max_behaviors=8)
        flat = [i for w in st_.windows for i in w]
        assert flat == list(range(79, 71, -1))
        strict = build_user_state(evs, as_of=79, n_windows=4, max_behaviors=8, strict=True)
        assert strict.windows[0][0] == 78

    def test_json_round_trip(self):
        st_ = build_user_state([click(3, k, k) for k in range(5)], as_of=10, n_windows=3)
        assert type(st_).from_json(st_.to_json()) == st_

    @given(st.lists(st.integers(0, 1000), max_size=150), st.integers(1, 12), st.integers(0, 80))
    @settings(max_examples=100, deadline=None)
    def test_partition_properties(self, items, n_windows, cap):
        wins = partition_recent(items, n_windows, cap)
        assert len(wins) == n_windows
        sizes = [len(w) for w in wins]
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)
        flat = [i for w in wins for i in w]
        kept = items[-cap:] if cap > 0 else []
        assert flat == list(reversed(kept))

    def test_window_sizes(self):
        assert window_sizes(23, 10) == [3, 3, 3, 2, 2, 2, 2, 2, 2, 2]
        assert sum(window_sizes(5, 10)) == 5
        assert np.all(np.array(window_sizes(0, 4)) == 0)
