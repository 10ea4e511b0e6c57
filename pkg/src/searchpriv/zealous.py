"""Two-threshold sanitizer for frequent-item histograms and its parameter planner.

The sanitizer keeps at most ``m`` distinct items per user, drops items whose
user count is below ``tau``, adds Laplace(``lam``) noise to the survivors and
publishes only those whose noisy count exceeds ``tau_prime``.

Two planners set the parameters:

* :func:`plan_probabilistic` -- (epsilon, delta)-probabilistic differential
  privacy, ``lam = 2m/epsilon`` and
  ``tau' - tau >= max(-lam ln(2 - 2 e^{-1/lam}), lam ln(U m / (2 delta tau)))``.
* :func:`plan_indistinguishable` -- (epsilon', delta')-indistinguishability
  with ``tau = 1`` and ``tau' = m (1 - ln(2 delta'/m) / epsilon')``.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import math
import warnings
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np

from .searchlog import (
    DEFAULT_SESSION_GAP,
    STREAM_CLICKS,
    STREAM_NOISE,
    Histogram,
    Item,
    ItemKind,
    SearchLog,
    as_counts,
    history_items,
    item_key,
    keyed_rng,
    parse_item,
    select_per_user,
)

# Relative slack when rounding 2m/epsilon up to an integer threshold.
_CEIL_EPS = 1e-9


class PrivacyFlavor(str, enum.Enum):
    PROBABILISTIC_DP = "probabilistic_dp"
    INDISTINGUISHABILITY = "indistinguishability"


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    flavor: PrivacyFlavor = PrivacyFlavor.PROBABILISTIC_DP

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")


# --------------------------------------------------------------------------
# Laplace noise


def laplace_from_uniform(u: Union[float, np.ndarray], lam: float):
    """Inverse CDF of Laplace(0, lam) for ``u`` uniform on (-1/2, 1/2)."""
    return -lam * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_sample(lam: float, rng: np.random.Generator, size=None):
    """Draw Laplace(0, lam) noise by inverse-CDF sampling."""
    if not lam > 0:
        raise ValueError(f"Laplace scale must be positive, got {lam}")
    u = rng.random(size) - 0.5
    if size is None:
        return float(laplace_from_uniform(u, lam))
    return laplace_from_uniform(u, lam)


def laplace_tail(t: float, lam: float) -> float:
    """P[Lap(lam) > t]."""
    if t >= 0:
        return 0.5 * math.exp(-t / lam)
    return 1.0 - 0.5 * math.exp(t / lam)


# --------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class ZealousPlan:
    """Sanitizer parameters together with the guarantees they achieve.

    ``epsilon``/``delta`` are the probabilistic-DP guarantee (``None`` when
    the user count is unknown); ``epsilon_prime``/``delta_prime`` the
    indistinguishability guarantee. They are recorded at planning time, so a
    plan edited with :func:`dataclasses.replace` still carries the claim it
    was made for.
    """

    m: int
    lam: float
    tau: float
    tau_prime: float
    users: Optional[int] = None
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    epsilon_prime: Optional[float] = None
    delta_prime: Optional[float] = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if not self.lam > 0 or not self.tau > 0:
            raise ValueError("lam and tau must be positive")
        if self.tau_prime < self.tau:
            raise ValueError(f"tau_prime ({self.tau_prime}) below tau ({self.tau})")

    @property
    def achieved_prob_dp(self) -> Optional[tuple[float, float]]:
        if self.epsilon is None:
            return None
        return self.epsilon, self.delta

    @property
    def achieved_indist(self) -> Optional[tuple[float, float]]:
        if self.epsilon_prime is None:
            return None
        return self.epsilon_prime, self.delta_prime

    def to_dict(self) -> dict[str, Any]:
        return {
            "m": self.m, "lambda": self.lam, "tau": self.tau, "tau_prime": self.tau_prime,
            "epsilon": self.epsilon, "delta": self.delta,
            "epsilon_prime": self.epsilon_prime, "delta_prime": self.delta_prime,
            "U": self.users,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ZealousPlan":
        return cls(m=int(d["m"]), lam=d["lambda"], tau=d["tau"], tau_prime=d["tau_prime"],
                   users=d.get("U"), epsilon=d.get("epsilon"), delta=d.get("delta"),
                   epsilon_prime=d.get("epsilon_prime"), delta_prime=d.get("delta_prime"))


def _clamp(delta: float, label: str) -> float:
    if delta > 1:
        warnings.warn(f"{label} = {delta:.3g} exceeds 1; reporting 1", RuntimeWarning, stacklevel=3)
        return 1.0
    return delta


def min_gap_for_ratio(lam: float) -> float:
    """Smallest ``tau' - tau`` for which the below-threshold case costs at most e^{1/lam}."""
    return -lam * math.log(2.0 - 2.0 * math.exp(-1.0 / lam))


def achieved_delta(lam: float, tau: float, tau_prime: float, m: int, users: int) -> tuple[float, float]:
    """Probabilistic-DP guarantee of given parameters.

    ``epsilon = 2m/lam`` and ``delta = (U m / (2 tau)) e^{-(tau' - tau)/lam}``,
    clamped to 1.
    """
    if tau_prime < tau:
        raise ValueError("tau_prime must not be below tau")
    if tau_prime - tau < min_gap_for_ratio(lam) - 1e-12:
        warnings.warn("threshold gap is below -lam*ln(2-2e^{-1/lam}); the epsilon bound "
                      "does not cover items just under tau", RuntimeWarning, stacklevel=2)
    delta = users * m / (2.0 * tau) * math.exp(-(tau_prime - tau) / lam)
    return 2.0 * m / lam, _clamp(delta, "delta")


def achieved_delta_prime(lam: float, tau_prime: float, m: int) -> tuple[float, float]:
    """Indistinguishability guarantee ``(2m/lam, (m/2) e^{-(tau' - m)/lam})``, clamped to 1."""
    delta_prime = m / 2.0 * math.exp(-(tau_prime - m) / lam)
    return 2.0 * m / lam, _clamp(delta_prime, "delta'")


def optimal_tau(epsilon: float, m: int) -> int:
    return max(1, math.ceil(2.0 * m / epsilon * (1 - _CEIL_EPS)))


def tau_prime_for(epsilon: float, delta: float, m: int, users: int, tau: float) -> float:
    lam = 2.0 * m / epsilon
    arg = users * m / (2.0 * delta * tau)
    if arg <= 0:
        raise ValueError("log argument must be positive")
    return tau + max(min_gap_for_ratio(lam), lam * math.log(arg))


def plan_from_parameters(m: int, lam: float, tau: float, tau_prime: float,
                         users: Optional[int] = None) -> ZealousPlan:
    """Wrap explicit parameters and compute the guarantees they achieve."""
    eps = delta = None
    if users is not None:
        eps, delta = achieved_delta(lam, tau, tau_prime, m, users)
    if tau == 1:
        eps_p, delta_p = achieved_delta_prime(lam, tau_prime, m)
    else:
        # With tau > 1 only the probabilistic guarantee is known, and it
        # implies indistinguishability with the same parameters.
        eps_p, delta_p = eps, delta
    return ZealousPlan(m, lam, tau, tau_prime, users, eps, delta, eps_p, delta_p)


def plan_probabilistic(epsilon: float, delta: float, m: int, users: int,
                       tau: Optional[float] = None) -> ZealousPlan:
    """Parameters achieving (epsilon, delta)-probabilistic differential privacy.

    When ``tau`` is omitted it is set to ``ceil(2m/epsilon)``, which minimises
    ``tau'``.
    """
    PrivacyBudget(epsilon, delta)
    if m < 1 or users < 1:
        raise ValueError("m and users must be at least 1")
    if tau is None:
        tau = optimal_tau(epsilon, m)
    if not tau > 0:
        raise ValueError("tau must be positive")
    lam = 2.0 * m / epsilon
    tau_prime = tau_prime_for(epsilon, delta, m, users, tau)
    if tau_prime < tau:
        raise ValueError("both threshold-gap bounds are negative; any tau' >= tau works "
                         "but the planner refuses such a degenerate budget")
    plan = plan_from_parameters(m, lam, tau, tau_prime, users)
    return dataclasses.replace(plan, epsilon=epsilon, delta=min(delta, plan.delta))


def plan_indistinguishable(epsilon_prime: float, delta_prime: float, m: int,
                           users: Optional[int] = None) -> ZealousPlan:
    """Parameters achieving (epsilon', delta')-indistinguishability (``tau = 1``)."""
    PrivacyBudget(epsilon_prime, delta_prime, PrivacyFlavor.INDISTINGUISHABILITY)
    if m < 1:
        raise ValueError("m must be at least 1")
    arg = 2.0 * delta_prime / m
    if arg <= 0:
        raise ValueError("log argument must be positive")
    lam = 2.0 * m / epsilon_prime
    tau_prime = m * (1.0 - math.log(arg) / epsilon_prime)
    eps = delta = None
    if users is not None:
        eps, delta = achieved_delta(lam, 1.0, tau_prime, m, users)
    eps_p, delta_p = achieved_delta_prime(lam, tau_prime, m)
    return ZealousPlan(m, lam, 1.0, tau_prime, users, eps, delta, eps_p, delta_p)


def sweep_tau(epsilon: float, delta: float, m: int, users: int,
              taus: Sequence[float]) -> list[tuple[float, float]]:
    """``(tau, tau')`` rows for a list of first thresholds."""
    return [(t, tau_prime_for(epsilon, delta, m, users, t)) for t in taus]


# --------------------------------------------------------------------------
# sanitizer


@dataclass
class SanitizedHistogram:
    kind: ItemKind
    entries: dict[Item, float]
    plan: ZealousPlan
    seed: int
    # Step-2 counts of the published items; kept for auditing, never exported.
    raw_counts: dict[Item, float] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> dict[str, Any]:
        rows = sorted(self.entries.items(), key=lambda kv: (-kv[1], item_key(kv[0])))
        return {
            "kind": ItemKind.parse(self.kind).value,
            "plan": self.plan.to_dict(),
            "seed": self.seed,
            "entries": [{"item": item_key(k), "noisy_count": v} for k, v in rows],
        }

    def to_json(self, **extra) -> str:
        payload = self.to_dict()
        payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["item", "noisy_count"])
        for row in self.to_dict()["entries"]:
            w.writerow([row["item"], repr(row["noisy_count"])])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str, query_as_set: bool = False) -> "SanitizedHistogram":
        d = json.loads(text)
        kind = ItemKind.parse(d["kind"])
        entries = {parse_item(kind, e["item"], query_as_set): e["noisy_count"] for e in d["entries"]}
        return cls(kind, entries, ZealousPlan.from_dict(d["plan"]), d.get("seed", 0))


def sanitize_histogram(histogram: Union[Histogram, Mapping[Item, float]], plan: ZealousPlan,
                       seed: int, kind: Optional[ItemKind] = None) -> SanitizedHistogram:
    """Threshold, perturb and re-threshold an already-built histogram.

    Each item draws its noise from its own ``(seed, item)`` stream, so the
    result does not depend on dictionary order.
    """
    if kind is None:
        kind = histogram.kind if isinstance(histogram, Histogram) else ItemKind.KEYWORD
    kind = ItemKind.parse(kind)
    counts = as_counts(histogram)
    entries, raw = {}, {}
    for item, count in counts.items():
        if count < plan.tau:
            continue
        noisy = count + laplace_sample(plan.lam, keyed_rng(seed, STREAM_NOISE, kind.value, item_key(item)))
        if noisy > plan.tau_prime:
            entries[item] = noisy
            raw[item] = count
    return SanitizedHistogram(kind, entries, plan, seed, raw)


def sanitize(log: SearchLog, kind: ItemKind, plan: ZealousPlan, seed: int,
             session_gap: Optional[float] = DEFAULT_SESSION_GAP,
             query_as_set: bool = False) -> SanitizedHistogram:
    """Publish the frequent ``kind`` items of ``log`` under ``plan``."""
    if plan.users is not None and plan.users != log.user_count:
        raise ValueError(f"plan was made for U={plan.users} users but the log has {log.user_count}")
    _, hist = select_per_user(log, kind, plan.m, seed, session_gap, query_as_set)
    return sanitize_histogram(hist, plan, seed, kind)


def publish_clicks(log: SearchLog, frequent_queries: SanitizedHistogram, top_n_docs: int,
                   lam: float, seed: int,
                   rankings: Union[Mapping, Callable, None] = None,
                   session_gap: Optional[float] = DEFAULT_SESSION_GAP,
                   query_as_set: bool = False) -> dict[Item, list[tuple[str, float]]]:
    """Noisy click counts for the top-N ranked documents of each published query.

    ``rankings`` maps a query to its ranked document list (as produced by the
    search engine, independently of the log). Without it the clicked URLs of
    the query are used, ordered by name and padded with placeholder slots;
    that fallback reveals which URLs were clicked and is for experiments only.
    No threshold is applied to the click counts.
    """
    if top_n_docs < 1:
        raise ValueError("top_n_docs must be at least 1")
    if not lam > 0:
        raise ValueError("lam must be positive")
    clicks: dict[Item, dict[str, set]] = {}
    for uid, history in log.users.items():
        for query, url in history_items(history, ItemKind.CLICK, session_gap, query_as_set):
            clicks.setdefault(query, {}).setdefault(url, set()).add(uid)
    if rankings is None:
        warnings.warn("no document rankings given; using clicked URLs as candidates",
                      RuntimeWarning, stacklevel=2)

    out = {}
    for query in frequent_queries.entries:
        per_url = clicks.get(query, {})
        if rankings is None:
            docs = sorted(per_url)[:top_n_docs]
            docs += [f"<rank-{i + 1}>" for i in range(len(docs), top_n_docs)]
        elif callable(rankings):
            docs = list(rankings(query))[:top_n_docs]
        else:
            docs = list(rankings.get(query, ()))[:top_n_docs]
        noisy = []
        for url in docs:
            rng = keyed_rng(seed, STREAM_CLICKS, item_key(query), url)
            noisy.append((url, len(per_url.get(url, ())) + laplace_sample(lam, rng)))
        out[query] = noisy
    return out
