"""Application-level evaluations: posting-list caching and query substitution."""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .searchlog import Item, as_counts, item_key
from .utility import RankedList, mean_or_none, ranking_metrics

MAX_POSTINGS = 200_000
BYTES_PER_POSTING = 8
MEMORY_BUDGET = 1 << 30


@dataclass
class PostingListModel:
    lengths: dict[str, int]
    bytes_per_posting: int = BYTES_PER_POSTING
    memory_budget: int = MEMORY_BUDGET
    max_postings: int = MAX_POSTINGS

    def __post_init__(self):
        for kw, n in self.lengths.items():
            if n < 1:
                raise ValueError(f"posting list of {kw!r} has length {n}")
        self.lengths = {kw: min(int(n), self.max_postings) for kw, n in self.lengths.items()}

    def size(self, keyword: str) -> int:
        return self.lengths[keyword] * self.bytes_per_posting


@dataclass
class CachePlan:
    cached: frozenset
    bytes_used: int
    hit_probability: float


def synthetic_postings(keywords: Iterable[str], corpus_size: int = 10_000_000,
                       exponent: float = 1.0, seed: int = 0, **kwargs) -> PostingListModel:
    """Posting-list lengths for synthetic vocabularies.

    Keywords named ``w<rank>`` (as produced by the synthetic generator) get a
    document frequency proportional to ``rank^-exponent`` scaled to
    ``corpus_size``, times a log-normal jitter; other keywords get a random
    rank.
    """
    rng = np.random.default_rng([seed, 77])
    keywords = sorted(set(keywords))
    lengths = {}
    for kw in keywords:
        rank = int(kw[1:]) if kw[:1] == "w" and kw[1:].isdigit() else int(rng.integers(1, 10 * len(keywords) + 2))
        base = corpus_size * rank ** -exponent
        lengths[kw] = max(1, int(base * rng.lognormal(0.0, 0.5)))
    return PostingListModel(lengths, **kwargs)


def _plan(workload: Mapping[str, float], postings: PostingListModel, skip_ahead: bool) -> tuple[list, int]:
    ranked = sorted(
        (kw for kw, f in workload.items() if f > 0 and kw in postings.lengths),
        key=lambda kw: (-workload[kw] / postings.lengths[kw], kw),
    )
    cached, used = [], 0
    for kw in ranked:
        size = postings.size(kw)
        if used + size > postings.memory_budget:
            if skip_ahead:
                continue
            break
        cached.append(kw)
        used += size
    return cached, used


def greedy_cache(workload, postings: PostingListModel, skip_ahead: bool = False) -> CachePlan:
    """Fill memory with posting lists in order of frequency per posting.

    Without ``skip_ahead`` filling stops at the first list that does not fit.
    Keywords without a posting list are ignored.
    """
    counts = as_counts(workload)
    if not counts:
        raise ValueError("workload is empty")
    cached, used = _plan(counts, postings, skip_ahead)
    total = sum(v for v in counts.values() if v > 0)
    hit = sum(counts[kw] for kw in cached) / total if total > 0 else 0.0
    return CachePlan(frozenset(cached), used, hit)


def evaluate_cache(truth_workload, sanitized_workload, postings: PostingListModel,
                   skip_ahead: bool = False) -> float:
    """Hit probability under the true workload of a cache planned from ``sanitized_workload``."""
    truth = as_counts(truth_workload)
    planned = as_counts(sanitized_workload)
    total = sum(v for v in truth.values() if v > 0)
    if not planned or total <= 0:
        return 0.0
    cached, _ = _plan(planned, postings, skip_ahead)
    return sum(truth.get(kw, 0) for kw in cached) / total


# --------------------------------------------------------------------------
# query substitution


def successor_index(query_pair_hist) -> dict[Item, dict[Item, float]]:
    index: dict[Item, dict[Item, float]] = {}
    for (first, second), count in as_counts(query_pair_hist).items():
        index.setdefault(first, {})[second] = count
    return index


def substitutions(query_pair_hist, query: Item, j: int,
                  index: Optional[Mapping[Item, Mapping[Item, float]]] = None) -> RankedList:
    """Top-``j`` follow-up queries of ``query`` by pair count, ties broken by name."""
    if j < 1:
        raise ValueError("j must be at least 1")
    if index is None:
        index = successor_index(query_pair_hist)
    succ = index.get(query, {})
    ranked = sorted(succ, key=lambda q: (-succ[q], item_key(q)))
    return RankedList(query, ranked[:j])


@dataclass
class SubstitutionReport:
    precision: Optional[float]
    recall: Optional[float]
    map: Optional[float]
    ndcg: Optional[float]
    coverage: Optional[float]
    productive_truth: int
    productive_sanitized: int

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def evaluate_substitutions(truth_pairs, sanitized_pairs, eval_queries: Sequence[Item],
                           j: int) -> SubstitutionReport:
    """Average ranking quality of substitutions mined from a sanitized pair histogram.

    Coverage is averaged over queries that get substitutions from the truth;
    the ranking scores only over queries that get substitutions from both.
    """
    t_index = successor_index(truth_pairs)
    s_index = successor_index(sanitized_pairs)
    covered, productive, scores = 0, 0, []
    for q in eval_queries:
        t = substitutions(None, q, j, t_index)
        if not t.substitutions:
            continue
        productive += 1
        c = substitutions(None, q, j, s_index)
        if c.substitutions:
            covered += 1
            scores.append(ranking_metrics(t, c, j))
    return SubstitutionReport(
        precision=mean_or_none(s.precision for s in scores),
        recall=mean_or_none(s.recall for s in scores),
        map=mean_or_none(s.map for s in scores),
        ndcg=mean_or_none(s.ndcg for s in scores),
        coverage=covered / productive if productive else None,
        productive_truth=productive,
        productive_sanitized=covered,
    )


def frequent_queries(query_hist, n: int) -> list[Item]:
    counts = as_counts(query_hist)
    return sorted(counts, key=lambda q: (-counts[q], item_key(q)))[:n]
