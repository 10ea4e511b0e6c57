"""Search log ingestion, item extraction and user-level histograms.

A search log is a set of entries ``<user-id, query, time, clicks>``. Items are
derived from it in four flavours (keywords, whole queries, consecutive query
pairs inside a session, and (query, url) clicks). Every histogram here counts
*users*, never occurrences: a user that issues "foo" five times adds one to
the count of "foo".
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import math
import string
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_SESSION_GAP = 1800
MAX_MALFORMED_FRACTION = 0.10

# Stream tags keep the RNG streams of different pipeline stages independent.
STREAM_SELECT = 1
STREAM_NOISE = 2
STREAM_CLICKS = 3
STREAM_ANONYMIZE = 4
STREAM_SYNTHETIC = 5


class LogFormatError(ValueError):
    """Raised when an input log cannot be parsed."""


class ItemKind(str, enum.Enum):
    KEYWORD = "keyword"
    QUERY = "query"
    QUERY_PAIR = "query_pair"
    CLICK = "click"

    @classmethod
    def parse(cls, value: Union[str, "ItemKind"]) -> "ItemKind":
        if isinstance(value, ItemKind):
            return value
        key = value.strip().lower().replace("-", "_")
        aliases = {"keywords": "keyword", "queries": "query", "pairs": "query_pair",
                   "query_pairs": "query_pair", "pair": "query_pair", "clicks": "click"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown item kind {value!r}") from None


Query = tuple  # tuple[str, ...] in sequence mode, frozenset in set mode
Item = Any


def normalize_query(text: str) -> tuple[str, ...]:
    """Lowercase, split on whitespace and strip surrounding punctuation."""
    words = (token.strip(string.punctuation) for token in text.lower().split())
    return tuple(w for w in words if w)


@dataclass(frozen=True)
class SearchEntry:
    user_id: str
    query: tuple[str, ...]
    time: int
    clicks: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.query:
            raise ValueError("a search entry needs at least one keyword")
        if any(not k for k in self.query):
            raise ValueError(f"empty keyword in query {self.query!r}")


@dataclass
class SearchLog:
    """Per-user search histories, each sorted by time.

    ``users`` preserves first-appearance order of the user ids so that every
    export of the log is deterministic.
    """

    users: dict[str, list[SearchEntry]] = field(default_factory=dict)
    malformed_lines: int = 0

    def __post_init__(self):
        for uid, history in self.users.items():
            history.sort(key=lambda e: e.time)

    @classmethod
    def from_entries(cls, entries: Iterable[SearchEntry], malformed_lines: int = 0) -> "SearchLog":
        users: dict[str, list[SearchEntry]] = {}
        for entry in entries:
            users.setdefault(entry.user_id, []).append(entry)
        return cls(users, malformed_lines)

    @property
    def user_count(self) -> int:
        return len(self.users)

    @property
    def entries(self) -> list[SearchEntry]:
        return [e for history in self.users.values() for e in history]

    def __len__(self) -> int:
        return sum(len(h) for h in self.users.values())

    def to_tsv(self, out: Union[str, Path, io.TextIOBase, None] = None) -> str:
        """Serialise in the native ``user, query, time, clicks`` format."""
        lines = [
            f"{e.user_id}\t{' '.join(e.query)}\t{e.time}\t{','.join(e.clicks)}\n"
            for e in self.entries
        ]
        text = "".join(lines)
        if isinstance(out, (str, Path)):
            Path(out).write_text(text, encoding="utf-8")
        elif out is not None:
            out.write(text)
        return text


# --------------------------------------------------------------------------
# ingestion


def _parse_native(fields: list[str]) -> SearchEntry:
    if len(fields) < 3 or len(fields) > 4:
        raise LogFormatError(f"expected 3 or 4 columns, got {len(fields)}")
    user, text, ts = fields[0].strip(), fields[1], fields[2].strip()
    if not user:
        raise LogFormatError("empty user id")
    clicks = ()
    if len(fields) == 4 and fields[3].strip():
        clicks = tuple(u.strip() for u in fields[3].split(",") if u.strip())
    return SearchEntry(user, normalize_query(text), int(ts), clicks)


def _parse_aol(fields: list[str]) -> SearchEntry:
    # AnonID, Query, QueryTime, ItemRank, ClickURL
    if len(fields) not in (3, 5):
        raise LogFormatError(f"expected 3 or 5 columns, got {len(fields)}")
    user, text, stamp = fields[0].strip(), fields[1], fields[2].strip()
    when = datetime.strptime(stamp, "%Y-%m-%d %H:%M:%S").replace(tzinfo=timezone.utc)
    clicks = ()
    if len(fields) == 5 and fields[4].strip():
        clicks = (fields[4].strip(),)
    return SearchEntry(user, normalize_query(text), int(when.timestamp()), clicks)


def _merge_aol_rows(entries: list[SearchEntry]) -> list[SearchEntry]:
    # AOL writes one row per click; fold rows of the same (user, query, time).
    merged: dict[tuple, SearchEntry] = {}
    for e in entries:
        key = (e.user_id, e.query, e.time)
        if key in merged:
            prev = merged[key]
            merged[key] = SearchEntry(e.user_id, e.query, e.time, prev.clicks + e.clicks)
        else:
            merged[key] = e
    return list(merged.values())


def ingest_tsv(path: Union[str, Path], fmt: str = "auto") -> SearchLog:
    """Read a tab-separated search log.

    Args:
        path: input file (UTF-8).
        fmt: ``"native"`` (user, query, unix time, comma separated clicks),
            ``"aol"`` (the 5-column AOL release with header) or ``"auto"``.

    Returns:
        The parsed log. Lines that fail to parse are skipped and counted in
        ``malformed_lines``; lines whose query normalises to nothing are
        skipped silently.

    Raises:
        OSError: if the file is unreadable.
        LogFormatError: if more than 10% of the non-empty lines are malformed.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if fmt == "auto":
        fmt = "aol" if lines and lines[0].lower().startswith("anonid") else "native"
    if fmt not in ("native", "aol"):
        raise ValueError(f"unknown log format {fmt!r}")
    if fmt == "aol" and lines and lines[0].lower().startswith("anonid"):
        lines = lines[1:]
    parse = _parse_native if fmt == "native" else _parse_aol

    entries, bad, first_bad = [], 0, None
    for lineno, line in enumerate(lines, 1):
        fields = line.rstrip("\r").split("\t")
        try:
            entries.append(parse(fields))
        except (LogFormatError, ValueError) as exc:
            if isinstance(exc, ValueError) and "at least one keyword" in str(exc):
                continue
            bad += 1
            if first_bad is None:
                first_bad = (lineno, str(exc))
    if lines and bad / len(lines) > MAX_MALFORMED_FRACTION:
        raise LogFormatError(
            f"{path}: {bad} of {len(lines)} lines malformed "
            f"(first at line {first_bad[0]}: {first_bad[1]})")
    if bad:
        logger.warning("%s: skipped %d malformed lines", path, bad)
    if fmt == "aol":
        entries = _merge_aol_rows(entries)
    return SearchLog.from_entries(entries, malformed_lines=bad)


# --------------------------------------------------------------------------
# items


def item_key(item: Item) -> str:
    """Canonical string form of an item; also the JSON/CSV representation."""
    if isinstance(item, str):
        return item
    if isinstance(item, frozenset):
        return " ".join(sorted(item))
    if isinstance(item, tuple) and item and all(isinstance(k, str) for k in item):
        return " ".join(item)
    if isinstance(item, tuple) and len(item) == 2:
        first, second = item
        return f"{item_key(first)}\t{item_key(second)}"
    raise TypeError(f"not an item: {item!r}")


def parse_item(kind: ItemKind, text: str, query_as_set: bool = False) -> Item:
    """Inverse of :func:`item_key` for a known kind."""
    kind = ItemKind.parse(kind)
    as_query = (lambda s: frozenset(s.split())) if query_as_set else (lambda s: tuple(s.split()))
    if kind is ItemKind.KEYWORD:
        return text
    if kind is ItemKind.QUERY:
        return as_query(text)
    head, _, tail = text.partition("\t")
    if kind is ItemKind.QUERY_PAIR:
        return as_query(head), as_query(tail)
    return as_query(head), tail


def stable_hash(*parts: Any) -> tuple[int, int]:
    """Two 32-bit words from a platform-independent digest of ``parts``."""
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "big")
    return value >> 32, value & 0xFFFFFFFF


def keyed_rng(seed: int, stream: int, *key: Any) -> np.random.Generator:
    """An independent generator for ``(seed, stream, key)``.

    Streams depend only on their key, never on iteration order, so results
    are reproducible regardless of how work is scheduled.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([int(seed), stream, *stable_hash(*key)])


def sessions(history: list[SearchEntry], gap: float | None = DEFAULT_SESSION_GAP) -> list[list[SearchEntry]]:
    """Split a time-sorted history wherever the idle time exceeds ``gap``."""
    if not history:
        return []
    if gap is None:
        return [list(history)]
    out = [[history[0]]]
    for prev, cur in zip(history, history[1:]):
        if cur.time - prev.time > gap:
            out.append([])
        out[-1].append(cur)
    return out


def _query_item(query: tuple[str, ...], query_as_set: bool) -> Query:
    return frozenset(query) if query_as_set else tuple(query)


def history_items(history: list[SearchEntry], kind: ItemKind,
                  session_gap: float | None = DEFAULT_SESSION_GAP,
                  query_as_set: bool = False) -> list[Item]:
    kind = ItemKind.parse(kind)
    if kind is ItemKind.KEYWORD:
        return [k for e in history for k in e.query]
    if kind is ItemKind.QUERY:
        return [_query_item(e.query, query_as_set) for e in history]
    if kind is ItemKind.CLICK:
        return [(_query_item(e.query, query_as_set), url) for e in history for url in e.clicks]
    pairs = []
    for session in sessions(history, session_gap):
        qs = [_query_item(e.query, query_as_set) for e in session]
        pairs.extend(zip(qs, qs[1:]))
    return pairs


def extract_items(log: SearchLog, kind: ItemKind,
                  session_gap: float | None = DEFAULT_SESSION_GAP,
                  query_as_set: bool = False) -> dict[str, list[Item]]:
    """Per-user item multisets (as lists, in history order)."""
    return {uid: history_items(h, kind, session_gap, query_as_set) for uid, h in log.users.items()}


@dataclass
class Histogram:
    """Item -> number of distinct users whose history contains the item."""

    kind: ItemKind
    counts: dict[Item, float]
    domain_size_hint: int | None = None

    def __post_init__(self):
        self.kind = ItemKind.parse(self.kind)

    def __len__(self) -> int:
        return len(self.counts)

    def __contains__(self, item) -> bool:
        return item in self.counts

    def __getitem__(self, item) -> float:
        return self.counts[item]

    def get(self, item, default=0):
        return self.counts.get(item, default)

    @property
    def total(self) -> float:
        return sum(self.counts.values())

    def top(self, j: int) -> list[Item]:
        """The ``j`` most frequent items; ties broken by canonical item order."""
        ranked = sorted(self.counts, key=lambda it: (-self.counts[it], item_key(it)))
        return ranked[:j]

    def rows(self) -> list[tuple[str, float]]:
        return [(item_key(it), self.counts[it]) for it in self.top(len(self.counts))]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"item": k, "count": c}) + "\n" for k, c in self.rows())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["item", "count"])
        writer.writerows(self.rows())
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, kind: ItemKind, text: str, query_as_set: bool = False) -> "Histogram":
        counts = {}
        for line in text.splitlines():
            if line.strip():
                row = json.loads(line)
                counts[parse_item(kind, row["item"], query_as_set)] = row["count"]
        return cls(kind, counts)


def as_counts(obj: Any) -> Mapping[Item, float]:
    """Accept a Histogram, a sanitized histogram or a plain mapping."""
    if isinstance(obj, Histogram):
        return obj.counts
    entries = getattr(obj, "entries", None)
    if isinstance(entries, Mapping):
        return entries
    if isinstance(obj, Mapping):
        return obj
    raise TypeError(f"cannot read counts from {type(obj).__name__}")


def histogram_from_sets(kind: ItemKind, user_sets: Iterable[Iterable[Item]]) -> Histogram:
    counter: Counter = Counter()
    for items in user_sets:
        counter.update(set(items))
    # Canonical order keeps downstream float sums independent of hashing.
    return Histogram(kind, {k: counter[k] for k in sorted(counter, key=item_key)})


def build_histogram(log: SearchLog, kind: ItemKind,
                    session_gap: float | None = DEFAULT_SESSION_GAP,
                    query_as_set: bool = False) -> Histogram:
    """User-level histogram of ``kind`` items over the whole log."""
    per_user = extract_items(log, kind, session_gap, query_as_set)
    return histogram_from_sets(kind, per_user.values())


def select_per_user(log: SearchLog, kind: ItemKind, m: int, seed: int,
                    session_gap: float | None = DEFAULT_SESSION_GAP,
                    query_as_set: bool = False) -> tuple[dict[str, frozenset], Histogram]:
    """Keep at most ``m`` distinct items per user, chosen uniformly at random.

    The choice for a user depends only on ``(seed, user_id)`` and the user's
    own distinct items, never on other users' data.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    kind = ItemKind.parse(kind)
    selected: dict[str, frozenset] = {}
    for uid, items in extract_items(log, kind, session_gap, query_as_set).items():
        distinct = sorted(set(items), key=item_key)
        if len(distinct) > m:
            rng = keyed_rng(seed, STREAM_SELECT, kind.value, uid)
            idx = rng.choice(len(distinct), size=m, replace=False)
            distinct = [distinct[i] for i in sorted(idx)]
        selected[uid] = frozenset(distinct)
    return selected, histogram_from_sets(kind, selected.values())


# --------------------------------------------------------------------------
# synthetic logs


def parse_count_spec(spec: str) -> tuple[str, float, float]:
    """Parse ``fixed:N``, ``poisson:MEAN``, ``geometric:MEAN`` or ``uniform:A-B``."""
    name, _, arg = spec.partition(":")
    name = name.strip().lower()
    try:
        if name == "uniform":
            lo, _, hi = arg.partition("-")
            lo, hi = int(lo), int(hi)
            if not 1 <= lo <= hi:
                raise ValueError
            return name, lo, hi
        value = float(arg)
    except ValueError:
        raise ValueError(f"invalid distribution spec {spec!r}") from None
    if name == "fixed" and value >= 1 and value == int(value):
        return name, value, value
    if name in ("poisson", "geometric") and value >= 1:
        return name, value, value
    raise ValueError(f"invalid distribution spec {spec!r}")


def _draw_count(rng: np.random.Generator, spec: tuple[str, float, float]) -> int:
    name, a, b = spec
    if name == "fixed":
        return int(a)
    if name == "uniform":
        return int(rng.integers(a, b + 1))
    if name == "poisson":
        return 1 + int(rng.poisson(a - 1))
    return int(rng.geometric(1.0 / a))


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=float)
    weights = ranks ** -exponent
    return weights / weights.sum()


def generate_synthetic(users: int, vocab: int, zipf_exponent: float = 1.0,
                       queries_per_user: str = "poisson:8", seed: int = 0,
                       session_gap: int = DEFAULT_SESSION_GAP,
                       new_session_prob: float = 0.2,
                       click_prob: float = 0.6,
                       urls_per_keyword: int = 10) -> SearchLog:
    """Reproducible synthetic log with Zipf keyword popularity.

    Each query has 1-3 keywords drawn i.i.d. from a Zipf law over ``vocab``
    words ``w1 .. w{vocab}`` (duplicates within a query are dropped).
    Consecutive queries are a few minutes apart; with ``new_session_prob`` the
    gap exceeds ``session_gap`` and a new session starts. Clicked URLs are
    drawn Zipf-like from a small per-keyword URL set.
    """
    if users < 1 or vocab < 1:
        raise ValueError("users and vocab must be positive")
    if zipf_exponent < 0:
        raise ValueError("zipf_exponent must be non-negative")
    spec = parse_count_spec(queries_per_user)
    rng = np.random.default_rng([seed, STREAM_SYNTHETIC])
    kw_probs = zipf_probabilities(vocab, zipf_exponent)
    url_probs = zipf_probabilities(urls_per_keyword, 1.0)
    month = 30 * 24 * 3600
    width = len(str(users))

    log_users: dict[str, list[SearchEntry]] = {}
    for u in range(users):
        uid = f"u{u:0{width}d}"
        n = _draw_count(rng, spec)
        lengths = rng.choice([1, 2, 3], size=n, p=[0.5, 0.3, 0.2])
        words = rng.choice(vocab, size=int(lengths.sum()), p=kw_probs) + 1
        breaks = rng.random(n) < new_session_prob
        short_gaps = rng.integers(10, 600, size=n)
        long_gaps = session_gap + 1 + rng.exponential(3600, size=n).astype(int)
        clicks_n = (rng.random(n) < click_prob).astype(int) + (rng.random(n) < click_prob / 4)
        t = int(rng.integers(0, month))
        history, pos = [], 0
        for i in range(n):
            ws = words[pos:pos + lengths[i]]
            pos += lengths[i]
            query = tuple(dict.fromkeys(f"w{w}" for w in ws))
            if i:
                t += int(long_gaps[i] if breaks[i] else short_gaps[i])
            clicks = tuple(
                f"www.{query[0]}-{r + 1}.com"
                for r in sorted(set(rng.choice(urls_per_keyword, size=clicks_n[i], p=url_probs)))
            )
            history.append(SearchEntry(uid, query, t, clicks))
        log_users[uid] = history
    return SearchLog(log_users)


def rank_frequency_slope(counts: Iterable[float], top: int = 100) -> float:
    """Least-squares slope of log(frequency) against log(rank) for the top ranks."""
    freqs = sorted((c for c in counts if c > 0), reverse=True)[:top]
    if len(freqs) < 2:
        raise ValueError("need at least two non-zero frequencies")
    x = np.log(np.arange(1, len(freqs) + 1))
    y = np.log(np.asarray(freqs, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def keyword_occurrences(log: SearchLog) -> Counter:
    return Counter(k for e in log.entries for k in e.query)


def log_summary(log: SearchLog) -> dict[str, Any]:
    per_kind = {}
    for kind in ItemKind:
        hist = build_histogram(log, kind)
        per_kind[kind.value] = {"distinct": len(hist), "total": int(hist.total)}
    return {
        "users": log.user_count,
        "entries": len(log),
        "malformed_lines": log.malformed_lines,
        "items": per_kind,
        "avg_items_per_user": {
            k: (v["total"] / log.user_count if log.user_count else math.nan)
            for k, v in per_kind.items()
        },
    }
