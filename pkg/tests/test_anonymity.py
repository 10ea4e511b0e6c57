import pytest

from searchpriv.anonymity import histograms_from_anonymous, k_query_anonymize
from searchpriv.searchlog import (
    ItemKind,
    SearchEntry,
    SearchLog,
    build_histogram,
    generate_synthetic,
    sessions,
)


def log_of(rows):
    return SearchLog.from_entries(SearchEntry(u, tuple(q.split()), t) for u, q, t in rows)


def test_k1_keeps_everything_with_fresh_ids():
    log = generate_synthetic(50, 30, seed=0)
    anon = k_query_anonymize(log, 1, seed=0)
    assert len(anon.log) == len(log)
    assert not set(anon.log.users) & set(log.users)
    assert sorted(e.query for e in anon.entries) == sorted(e.query for e in log.entries)


def test_k_above_user_count_empties_log():
    log = generate_synthetic(20, 10, seed=1)
    assert len(k_query_anonymize(log, log.user_count + 1, seed=0).log) == 0


def test_hand_enumeration():
    log = log_of([("u1", "q", 0), ("u2", "q", 0), ("u3", "r", 0), ("u3", "q", 10)])
    anon = k_query_anonymize(log, 2, seed=0)
    assert {e.query for e in anon.entries} == {("q",)}
    assert len(anon.entries) == 3


def test_k1_histograms_match_single_session_log():
    # Counts are per session id, so they match the original when every
    # user has a single session.
    rows = [(f"u{i}", q, 60 * j) for i in range(6) for j, q in enumerate(["a b", "c", "a"][: 1 + i % 3])]
    log = log_of(rows)
    anon = k_query_anonymize(log, 1, seed=3)
    for kind in (ItemKind.KEYWORD, ItemKind.QUERY, ItemKind.QUERY_PAIR):
        assert histograms_from_anonymous(anon, kind).counts == build_histogram(log, kind).counts


@pytest.mark.parametrize("k", [2, 5, 10])
def test_min_query_count_at_least_k(k):
    log = generate_synthetic(500, 80, seed=k)
    anon = k_query_anonymize(log, k, seed=1)
    posers = {}
    for uid, history in log.users.items():
        for e in history:
            posers.setdefault(e.query, set()).add(uid)
    for e in anon.entries:
        assert len(posers[e.query]) >= k
    # Each surviving keyword comes from some surviving query.
    kws = build_histogram(anon.log, ItemKind.KEYWORD).counts
    queries = {e.query for e in anon.entries}
    assert all(any(kw in q for q in queries) for kw in kws)


def test_clicks_rejected():
    anon = k_query_anonymize(generate_synthetic(10, 5, seed=0), 1, seed=0)
    with pytest.raises(ValueError):
        histograms_from_anonymous(anon, ItemKind.CLICK)


def test_idempotent_query_set():
    log = generate_synthetic(300, 50, seed=2)
    once = k_query_anonymize(log, 5, seed=0)
    # A query posed by k users appears in at least k of their sessions.
    twice = k_query_anonymize(once.log, 5, seed=1)
    assert {e.query for e in twice.entries} == {e.query for e in once.entries}


def test_deterministic_per_seed():
    log = generate_synthetic(100, 30, seed=4)
    a = k_query_anonymize(log, 3, seed=8).log.to_tsv()
    assert a == k_query_anonymize(log, 3, seed=8).log.to_tsv()
    assert a != k_query_anonymize(log, 3, seed=9).log.to_tsv()


def test_one_id_per_session():
    log = generate_synthetic(400, 40, seed=5)
    anon = k_query_anonymize(log, 1, seed=0)
    n_sessions = sum(len(sessions(h)) for h in log.users.values())
    assert len(anon.log.users) == n_sessions
    assert n_sessions > log.user_count


def test_invalid_k():
    with pytest.raises(ValueError):
        k_query_anonymize(generate_synthetic(5, 5), 0, seed=0)
