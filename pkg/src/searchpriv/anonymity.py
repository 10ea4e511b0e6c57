"""k-query anonymity baseline.

Queries posed by fewer than ``k`` distinct users are removed, the remaining
histories are cut into sessions and each session gets a fresh random id in
place of the user id.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

from .searchlog import (
    DEFAULT_SESSION_GAP,
    STREAM_ANONYMIZE,
    Histogram,
    ItemKind,
    SearchEntry,
    SearchLog,
    build_histogram,
    keyed_rng,
    sessions,
)


@dataclass
class KQueryAnonymousLog:
    """Anonymised log; ``log.users`` is keyed by random session numbers."""

    log: SearchLog
    k: int

    @property
    def entries(self) -> list[SearchEntry]:
        return self.log.entries


def k_query_anonymize(log: SearchLog, k: int, seed: int,
                      session_gap: float = DEFAULT_SESSION_GAP) -> KQueryAnonymousLog:
    if k < 1:
        raise ValueError("k must be at least 1")
    posers = defaultdict(set)
    for uid, history in log.users.items():
        for e in history:
            posers[e.query].add(uid)
    keep = {q for q, us in posers.items() if len(us) >= k}

    kept_sessions = []
    for uid, history in log.users.items():
        for session in sessions(history, session_gap):
            survivors = [e for e in session if e.query in keep]
            if survivors:
                kept_sessions.append(survivors)

    rng = keyed_rng(seed, STREAM_ANONYMIZE, k)
    space = max(10 ** 9, 10 * len(kept_sessions))
    ids = rng.choice(space, size=len(kept_sessions), replace=False) if kept_sessions else []
    width = len(str(space - 1))
    users = {}
    for sid, session in zip(ids, kept_sessions):
        name = f"s{int(sid):0{width}d}"
        users[name] = [SearchEntry(name, e.query, e.time, e.clicks) for e in session]
    # Order sessions by their random id so output order reveals nothing.
    users = dict(sorted(users.items()))
    return KQueryAnonymousLog(SearchLog(users), k)


def histograms_from_anonymous(anon: KQueryAnonymousLog, kind: ItemKind,
                              query_as_set: bool = False) -> Histogram:
    """Histogram over the anonymised log; counts are per session id.

    Raises:
        ValueError: for click histograms, which a k-query anonymous log is not
            meant to publish.
    """
    kind = ItemKind.parse(kind)
    if kind is ItemKind.CLICK:
        raise ValueError("a k-query anonymous log does not publish click data")
    # Every anonymised id already is one session.
    return build_histogram(anon.log, kind, session_gap=None, query_as_set=query_as_set)
