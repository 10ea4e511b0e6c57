"""Utility metrics: inaccuracy with slack, count distances, coverage and ranking quality."""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from .searchlog import Histogram, Item, as_counts
from .zealous import ZealousPlan


@dataclass(frozen=True)
class SlackSpec:
    tau_star: float
    xi: float

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("slack must be non-negative")
        if self.tau_star - self.xi < 0:
            raise ValueError("tau_star - xi must be non-negative")

    @property
    def very_frequent_above(self) -> float:
        return self.tau_star + self.xi

    @property
    def very_infrequent_below(self) -> float:
        return self.tau_star - self.xi


@dataclass
class UtilityReport:
    inaccuracy: Optional[float] = None
    retain_failures: Optional[float] = None
    filter_failures: Optional[float] = None
    avg_l1: Optional[float] = None
    kl_divergence: Optional[float] = None
    top_j_coverage: Optional[float] = None
    count_diff: Optional[float] = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class RankedList:
    query: Any
    substitutions: list = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.substitutions)) != len(self.substitutions):
            raise ValueError("ranked list contains duplicates")

    def __len__(self) -> int:
        return len(self.substitutions)


class DistanceMetric(str, enum.Enum):
    AVG_L1 = "avg_l1"
    KL = "kl"
    AVG_COUNT_DIFF = "avg_count_diff"


# --------------------------------------------------------------------------
# accuracy


def empirical_inaccuracy(truth: Histogram, published_sets: Sequence[Iterable[Item]],
                         slack: SlackSpec) -> UtilityReport:
    """Average number of misclassified items over repeated runs.

    Published items whose true count is below ``tau* - xi`` are filter
    failures; unpublished items above ``tau* + xi`` are retain failures.
    """
    if not published_sets:
        raise ValueError("need at least one run")
    counts = as_counts(truth)
    very_frequent = {d for d, c in counts.items() if c > slack.very_frequent_above}
    retain = filt = 0
    for out in published_sets:
        out = set(out)
        retain += len(very_frequent - out)
        filt += sum(1 for d in out if counts.get(d, 0) < slack.very_infrequent_below)
    n = len(published_sets)
    return UtilityReport(inaccuracy=(retain + filt) / n,
                         retain_failures=retain / n, filter_failures=filt / n)


def retention_probability(count: float, plan: ZealousPlan) -> float:
    """Probability that an item with Step-2 count ``count`` gets published."""
    if count < plan.tau:
        return 0.0
    gap = count - plan.tau_prime
    if gap >= 0:
        return 1.0 - 0.5 * math.exp(-gap / plan.lam)
    return 0.5 * math.exp(gap / plan.lam)


# --------------------------------------------------------------------------
# histogram statistics


def _relative(values: Sequence[float]) -> list[float]:
    total = math.fsum(values)
    return [v / total for v in values] if total > 0 else [0.0] * len(values)


def count_distance(truth: Histogram, sanitized, metric: DistanceMetric | str,
                   j: Optional[int] = None, l1_per_item: bool = True) -> float:
    """Distance between a true histogram and a published one.

    ``avg_l1`` and ``kl`` compare relative frequencies over the top-``j``
    items of ``truth`` (all items when ``j`` is None). Missing items count as
    zero. KL is ``sum q log(q/p)`` with ``q`` the published and ``p`` the true
    distribution, so unpublished items contribute nothing; it is NaN when no
    top-``j`` item is published. ``avg_l1`` is the per-item mean of absolute
    differences, or the plain L1 sum with ``l1_per_item=False``.

    ``avg_count_diff`` first rescales the published counts so that both
    totals agree, then averages ``|true - scaled|`` over every item with a
    non-zero true count.
    """
    metric = DistanceMetric(metric)
    t_counts = as_counts(truth)
    s_counts = as_counts(sanitized)
    if not t_counts:
        raise ValueError("truth histogram is empty")

    if metric is DistanceMetric.AVG_COUNT_DIFF:
        t_total = math.fsum(t_counts.values())
        s_total = math.fsum(s_counts.values())
        scale = t_total / s_total if s_total > 0 else 0.0
        items = [d for d, c in t_counts.items() if c > 0]
        return math.fsum(abs(t_counts[d] - scale * s_counts.get(d, 0.0)) for d in items) / len(items)

    hist = truth if isinstance(truth, Histogram) else Histogram("keyword", dict(t_counts))
    top = hist.top(j if j is not None else len(t_counts))
    p = _relative([t_counts[d] for d in top])
    q = _relative([max(s_counts.get(d, 0.0), 0.0) for d in top])
    if metric is DistanceMetric.AVG_L1:
        total = sum(abs(a - b) for a, b in zip(p, q))
        return total / len(top) if l1_per_item else total
    if sum(q) == 0:
        return math.nan
    return sum(b * math.log(b / a) for a, b in zip(p, q) if b > 0)


def top_j_coverage(truth: Histogram, published: Iterable[Item], j: int) -> float:
    """Fraction of the true top-``j`` items that were published."""
    if j < 1:
        raise ValueError("j must be at least 1")
    j = min(j, len(truth))
    if j == 0:
        return math.nan
    published = set(published)
    return sum(1 for d in truth.top(j) if d in published) / j


# --------------------------------------------------------------------------
# ranking quality


@dataclass
class RankingScores:
    precision: Optional[float]
    recall: Optional[float]
    map: Optional[float]
    ndcg: Optional[float]


def ranking_metrics(truth: RankedList | Sequence, candidate: RankedList | Sequence,
                    j: int) -> RankingScores:
    """Compare a candidate top-``j`` substitution list against the true one.

    MAP follows ``sum_i (i+1) / (rank of q_i in candidate + 1)`` literally:
    an absent ``q_i`` has rank 0, and the value is not normalised. NDCG uses
    relevance ``j - true_rank`` and a ``log2(i + 2)`` discount, normalised by
    the DCG of the true list. All scores are None when ``truth`` is empty;
    precision is None when ``candidate`` is empty.
    """
    t = list(getattr(truth, "substitutions", truth))[:j]
    c = list(getattr(candidate, "substitutions", candidate))[:j]
    if not t:
        return RankingScores(None, None, None, None)
    common = set(t) & set(c)
    precision = len(common) / len(set(c)) if c else None
    recall = len(common) / len(set(t))

    c_rank = {q: i for i, q in enumerate(c)}
    map_score = sum((i + 1) / (c_rank.get(q, 0) + 1) for i, q in enumerate(t))

    t_rank = {q: i for i, q in enumerate(t)}
    dcg = sum((j - t_rank[q]) / math.log2(i + 2) for i, q in enumerate(c) if q in t_rank)
    ideal = sum((j - i) / math.log2(i + 2) for i in range(len(t)))
    return RankingScores(precision, recall, map_score, dcg / ideal)


def mean_or_none(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def utility_report(truth: Histogram, sanitized, j: int) -> UtilityReport:
    """Bundle the distance and coverage statistics for one published histogram."""
    published = list(as_counts(sanitized))
    return UtilityReport(
        avg_l1=count_distance(truth, sanitized, DistanceMetric.AVG_L1, j),
        kl_divergence=count_distance(truth, sanitized, DistanceMetric.KL, j),
        top_j_coverage=top_j_coverage(truth, published, j),
        count_diff=count_distance(truth, sanitized, DistanceMetric.AVG_COUNT_DIFF),
    )

