"""Exact checks of the sanitizer's privacy guarantees on small instances.

On instances where every user holds at most ``m`` distinct items the
per-user selection is deterministic, and the output distribution factorises
over items: an item with count ``c >= tau`` is published independently with
probability ``P[c + Lap(lam) > tau']`` and, when published, carries a noisy
count with Laplace density centred at ``c``. Everything below is computed
from that factorisation in closed form, independently of the sampling code
in :mod:`searchpriv.zealous`.
"""

from __future__ import annotations

import itertools
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from .searchlog import (
    Histogram,
    ItemKind,
    SearchEntry,
    SearchLog,
    as_counts,
    build_histogram,
    item_key,
)
from .zealous import ZealousPlan, plan_from_parameters, plan_probabilistic

MAX_DOMAIN = 16
MAX_USERS = 6
MAX_M = 3
GRID_OFFSETS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
_TOL = 1e-9


@dataclass
class VerdictReport:
    check: str
    passed: Optional[bool]  # None: not applicable
    details: dict[str, Any] = field(default_factory=dict)
    counterexample: Optional[dict[str, Any]] = None

    @property
    def status(self) -> str:
        return {True: "PASS", False: "FAIL", None: "N/A"}[self.passed]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["status"] = self.status
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(map(str, obj))
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


# --------------------------------------------------------------------------
# instances


@dataclass
class OracleInstance:
    """A pair of neighbouring logs, a plan and the claimed budget.

    The claim checked is ``plan.epsilon``/``plan.delta`` (and
    ``plan.epsilon_prime``/``plan.delta_prime`` for indistinguishability).
    """

    domain: list[str]
    log: SearchLog
    neighbor: SearchLog
    plan: ZealousPlan
    slack_xi: float = 0.0
    accuracy_c: float = 1.0
    kind: ItemKind = ItemKind.KEYWORD

    def __post_init__(self):
        if len(self.domain) > MAX_DOMAIN:
            raise ValueError(f"domain larger than {MAX_DOMAIN}")
        if self.log.user_count > MAX_USERS or self.plan.m > MAX_M:
            raise ValueError(f"oracle instances need U <= {MAX_USERS} and m <= {MAX_M}")
        if set(self.log.users) != set(self.neighbor.users):
            raise ValueError("neighbouring logs must have the same users")
        changed = [u for u in self.log.users
                   if _user_items(self.log, u, self.kind) != _user_items(self.neighbor, u, self.kind)]
        if len(changed) > 1:
            raise ValueError("logs differ in more than one user's history")
        allowed = set(self.domain)
        for lg in (self.log, self.neighbor):
            for u in lg.users:
                items = _user_items(lg, u, self.kind)
                if len(items) > self.plan.m:
                    raise ValueError(f"user {u} holds more than m={self.plan.m} distinct items")
                if not items <= allowed:
                    raise ValueError(f"user {u} holds items outside the domain")
        if not 0 < self.accuracy_c <= 1 or self.slack_xi < 0:
            raise ValueError("need 0 < c <= 1 and xi >= 0")

    def histograms(self) -> tuple[dict, dict]:
        return (dict(build_histogram(self.log, self.kind).counts),
                dict(build_histogram(self.neighbor, self.kind).counts))

    def swapped(self) -> "OracleInstance":
        return OracleInstance(self.domain, self.neighbor, self.log, self.plan,
                              self.slack_xi, self.accuracy_c, self.kind)


def _user_items(log: SearchLog, user: str, kind: ItemKind) -> frozenset:
    single = SearchLog({user: list(log.users[user])})
    return frozenset(build_histogram(single, kind).counts)


def keyword_log(histories: Mapping[str, Iterable[str]]) -> SearchLog:
    """A log in which every keyword of a user is a one-word query."""
    users = {}
    for uid, items in histories.items():
        users[uid] = [SearchEntry(uid, (kw,), t) for t, kw in enumerate(items)]
    return SearchLog(users)


def fixture_instance() -> OracleInstance:
    """Four-keyword fixture with a plan for (1, 0.05)-probabilistic DP, m=1, U=4."""
    plan = plan_probabilistic(epsilon=1.0, delta=0.05, m=1, users=4)
    s = keyword_log({"u1": ["a"], "u2": ["a"], "u3": ["b"], "u4": ["c"]})
    s2 = keyword_log({"u1": ["a"], "u2": ["a"], "u3": ["b"], "u4": ["a"]})
    return OracleInstance(["a", "b", "c", "d"], s, s2, plan)


def monte_carlo_fixture() -> tuple[SearchLog, ZealousPlan]:
    """Thirteen one-keyword users; counts a=5, b=4, c=3, d=1; lam=1, tau=1, tau'=3.5."""
    counts = {"a": 5, "b": 4, "c": 3, "d": 1}
    histories, n = {}, 0
    for kw, c in counts.items():
        for _ in range(c):
            n += 1
            histories[f"u{n:02d}"] = [kw]
    return keyword_log(histories), plan_from_parameters(1, 1.0, 1.0, 3.5, users=n)


def random_instance(rng: np.random.Generator, max_domain: int = 8, max_users: int = MAX_USERS,
                    max_m: int = MAX_M) -> OracleInstance:
    """A random neighbouring pair with a plan from the probabilistic planner.

    Draws whose parameters admit no valid plan are redrawn.
    """
    while True:
        try:
            return _random_instance(rng, max_domain, max_users, max_m)
        except ValueError:
            continue


def _random_instance(rng, max_domain, max_users, max_m) -> OracleInstance:
    d = int(rng.integers(2, max_domain + 1))
    domain = [f"d{i}" for i in range(d)]
    m = int(rng.integers(1, max_m + 1))
    users = int(rng.integers(2, max_users + 1))
    tau = int(rng.integers(1, 4))
    epsilon = 2.0 * m / tau
    delta = float(np.exp(rng.uniform(np.log(0.01), np.log(0.5))))

    def subset():
        size = int(rng.integers(1, min(m, d) + 1))
        return sorted(rng.choice(domain, size=size, replace=False).tolist())

    hist = {f"u{i}": subset() for i in range(users)}
    changed = f"u{int(rng.integers(users))}"
    alt = dict(hist)
    alt[changed] = subset()
    plan = plan_probabilistic(epsilon, delta, m, users, tau=tau)
    return OracleInstance(domain, keyword_log(hist), keyword_log(alt), plan)


# --------------------------------------------------------------------------
# exact probabilities


def pass_probability(count: Optional[float], plan: ZealousPlan) -> float:
    """P[item survives both thresholds] for an item with Step-2 count ``count``."""
    if count is None or count < plan.tau:
        return 0.0
    if count <= plan.tau_prime:
        return 0.5 * math.exp(-(plan.tau_prime - count) / plan.lam)
    return 1.0 - 0.5 * math.exp(-(count - plan.tau_prime) / plan.lam)


def eligible(counts: Mapping, plan: ZealousPlan) -> list:
    return sorted((k for k, c in counts.items() if c >= plan.tau), key=item_key)


def release_set_probability(histogram, plan: ZealousPlan, subset: Iterable) -> float:
    """Exact probability that the set of published items equals ``subset``."""
    counts = as_counts(histogram)
    subset = set(subset)
    elig = set(eligible(counts, plan))
    if not subset <= elig:
        return 0.0
    prob = 1.0
    for k in elig:
        p = pass_probability(counts[k], plan)
        prob *= p if k in subset else 1.0 - p
    return prob


def _powerset(items: Sequence) -> Iterable[frozenset]:
    for r in range(len(items) + 1):
        for combo in itertools.combinations(items, r):
            yield frozenset(combo)


def boundary_items(counts: Mapping, plan: ZealousPlan) -> list:
    """Items whose count is the smallest integer not below ``tau``.

    These are the items whose publication may reveal that a neighbour pushed
    them over the first threshold.
    """
    return sorted((k for k, c in counts.items() if plan.tau <= c < plan.tau + 1), key=item_key)


# --------------------------------------------------------------------------
# probabilistic differential privacy


def _breach_probability(counts: Mapping, plan: ZealousPlan) -> tuple[float, float, int]:
    k_items = boundary_items(counts, plan)
    exact = 1.0 - math.prod(1.0 - pass_probability(counts[k], plan) for k in k_items)
    closed = 1.0 - (1.0 - 0.5 * math.exp(-(plan.tau_prime - plan.tau) / plan.lam)) ** len(k_items)
    return exact, closed, len(k_items)


def _log_pmf_sets(counts: Mapping, other: Mapping, plan: ZealousPlan, releases: Iterable[frozenset]):
    worst, witness = 0.0, None
    for release in releases:
        p = release_set_probability(counts, plan, release)
        q = release_set_probability(other, plan, release)
        if p == 0.0:
            continue
        lr = math.inf if q == 0.0 else abs(math.log(p) - math.log(q))
        if lr > worst:
            worst, witness = lr, release
    return worst, witness


def _density_check(counts: Mapping, other: Mapping, plan: ZealousPlan, points: int,
                   rng: np.random.Generator):
    """Max |log density ratio| over sampled outputs inside the good set."""
    lam = plan.lam
    k_items = set(boundary_items(counts, plan))
    candidates = [k for k in eligible(counts, plan) if k not in k_items]
    union = sorted(set(eligible(counts, plan)) | set(eligible(other, plan)), key=item_key)
    if points <= 0:
        return 0.0, None

    def count_vec(cs):
        return np.array([cs[k] if k in cs and cs[k] >= plan.tau else np.nan for k in union],
                        dtype=float)

    c, c2 = count_vec(counts), count_vec(other)
    is_cand = np.array([k in candidates for k in union], dtype=bool)
    member = (rng.random((points, len(union))) < 0.5) & is_cand
    grid = plan.tau_prime + lam * np.asarray(GRID_OFFSETS)
    x = grid[rng.integers(len(GRID_OFFSETS), size=(points, len(union)))]

    def log_density(cv):
        with np.errstate(invalid="ignore"):
            present = -math.log(2 * lam) - np.abs(x - cv) / lam
            keep_out = np.log1p(-np.array([pass_probability(v if not np.isnan(v) else None, plan)
                                           for v in cv], dtype=float))
        elig = ~np.isnan(cv)
        term = np.where(member, np.where(elig, present, -np.inf), np.where(elig, keep_out, 0.0))
        return term.sum(axis=1)

    with np.errstate(invalid="ignore"):
        lr = np.abs(log_density(c) - log_density(c2))
    lr = np.where(np.isnan(lr), np.inf, lr)
    i = int(np.argmax(lr))
    witness = {
        "released": sorted(item_key(union[t]) for t in np.flatnonzero(member[i])),
        "noisy_counts": {item_key(union[t]): float(x[i, t]) for t in np.flatnonzero(member[i])},
        "log_ratio": float(lr[i]),
    }
    return float(lr[i]), witness


def verify_prob_dp(instance: OracleInstance, sample_points: int = 10_000, seed: int = 0) -> VerdictReport:
    """Check both proof obligations in both directions of the neighbouring pair.

    (a) The probability of publishing any item whose count sits exactly on
        the first threshold is at most ``delta``.
    (b) For outputs avoiding such items, the probability of every release
        set and the joint density at sampled noisy counts differ by at most a
        factor ``e^epsilon`` between the two logs.
    """
    plan = instance.plan
    eps, delta = plan.epsilon, plan.delta
    if eps is None or delta is None:
        raise ValueError("plan carries no probabilistic-DP claim")
    rng = np.random.default_rng(seed)
    h, h2 = instance.histograms()
    details: dict[str, Any] = {"epsilon": eps, "delta": delta, "sample_points": sample_points}
    passed, counterexample = True, None

    for name, (cs, other) in {"S": (h, h2), "S'": (h2, h)}.items():
        exact, closed, n_boundary = _breach_probability(cs, plan)
        ok_a = exact <= delta * (1 + 1e-12)
        k_items = set(boundary_items(cs, plan))
        good = [k for k in eligible(cs, plan) if k not in k_items]
        set_lr, set_witness = _log_pmf_sets(cs, other, plan, _powerset(good))
        dens_lr, dens_witness = _density_check(cs, other, plan, sample_points, rng)
        ok_b = set_lr <= eps + _TOL and dens_lr <= eps + _TOL
        details[name] = {
            "breach_probability": exact,
            "breach_probability_closed_form": closed,
            "boundary_items": n_boundary,
            "obligation_a": ok_a,
            "max_set_log_ratio": set_lr,
            "max_density_log_ratio": dens_lr,
            "obligation_b": ok_b,
        }
        if not (ok_a and ok_b) and counterexample is None:
            counterexample = {"input": name}
            if not ok_a:
                counterexample["breach_probability"] = exact
            elif set_lr > eps + _TOL:
                counterexample["release_set"] = sorted(map(item_key, set_witness))
                counterexample["log_ratio"] = set_lr
            else:
                counterexample["output"] = dens_witness
        passed = passed and ok_a and ok_b
    return VerdictReport("probabilistic_dp", passed, details, counterexample)


# --------------------------------------------------------------------------
# indistinguishability


def release_space(instance: OracleInstance) -> list[frozenset]:
    h, h2 = instance.histograms()
    union = sorted(set(eligible(h, instance.plan)) | set(eligible(h2, instance.plan)), key=item_key)
    return list(_powerset(union))


def _event_probability(counts, plan, event) -> float:
    return sum(release_set_probability(counts, plan, r) for r in event)


def verify_indistinguishability(instance: OracleInstance,
                                event_sets: Optional[Iterable[Iterable[Iterable]]] = None,
                                epsilon: Optional[float] = None,
                                delta: Optional[float] = None) -> VerdictReport:
    """Check ``P[A(S) in O] <= e^eps P[A(S') in O] + delta`` both ways.

    Events are collections of release sets. Without ``event_sets`` every
    singleton event is checked, together with the worst possible event
    (all release sets where the left side exceeds ``e^eps`` times the right
    side), which settles the bound for all events at once.
    """
    plan = instance.plan
    eps = plan.epsilon_prime if epsilon is None else epsilon
    dlt = plan.delta_prime if delta is None else delta
    if eps is None or dlt is None:
        raise ValueError("no indistinguishability claim to check")
    h, h2 = instance.histograms()
    space = release_space(instance)
    exhaustive = event_sets is None
    if exhaustive:
        events = [[r] for r in space]
    else:
        events = [[frozenset(r) for r in ev] for ev in event_sets]

    worst_gap, witness = -math.inf, None
    for name, (cs, other) in {"S": (h, h2), "S'": (h2, h)}.items():
        for ev in events:
            gap = _event_probability(cs, plan, ev) - math.exp(eps) * _event_probability(other, plan, ev)
            if gap > worst_gap:
                worst_gap, witness = gap, (name, ev)
        if exhaustive:
            sup = sum(max(0.0, release_set_probability(cs, plan, r)
                          - math.exp(eps) * release_set_probability(other, plan, r)) for r in space)
            if sup > worst_gap:
                worst_gap, witness = sup, (name, "worst-case event")
    if not events and not exhaustive:
        worst_gap = 0.0
    passed = worst_gap <= dlt + _TOL
    details = {"epsilon": eps, "delta": dlt, "events": len(events) * 2,
               "max_gap": worst_gap, "exhaustive": exhaustive}
    counterexample = None
    if not passed and witness is not None:
        name, ev = witness
        counterexample = {"input": name, "event": ev if isinstance(ev, str)
                          else [sorted(map(item_key, r)) for r in ev], "gap": worst_gap}
    return VerdictReport("indistinguishability", passed, details, counterexample)


def check_implication(instance: OracleInstance, sample_points: int = 2_000, seed: int = 0) -> VerdictReport:
    """Probabilistic DP with (eps, delta) should imply (eps, delta)-indistinguishability."""
    plan = instance.plan
    if plan.delta is not None and plan.delta >= 1:
        return VerdictReport("implication", True, {"note": "delta = 1 makes the bound vacuous"})
    prob = verify_prob_dp(instance, sample_points, seed)
    if not prob.passed:
        return VerdictReport("implication", None, {"note": "probabilistic DP does not hold"})
    ind = verify_indistinguishability(instance, epsilon=plan.epsilon, delta=plan.delta)
    return VerdictReport("implication", ind.passed, {"indistinguishability": ind.details},
                         ind.counterexample)


# --------------------------------------------------------------------------
# an indistinguishable but blatantly non-private algorithm


def history_of(log, index: int = 0):
    """History of the ``index``-th user as a tuple of query strings."""
    if isinstance(log, SearchLog):
        uid = list(log.users)[index]
        return tuple(" ".join(e.query) for e in log.users[uid])
    return list(log)[index]


def a_hat_distribution(domain: Sequence, first) -> dict:
    """Output distribution of the algorithm that returns a random history other than ``first``."""
    others = [d for d in domain if d != first]
    return {d: 1.0 / len(others) for d in others}


def a_hat_sample(domain: Sequence, first, rng: np.random.Generator):
    others = [d for d in domain if d != first]
    return others[int(rng.integers(len(others)))]


@dataclass
class AHatReport:
    domain_size: int
    delta_prime: float
    epsilon_primes: list[float]
    max_singleton_gap: dict[float, float]
    max_event_gap: dict[float, float]
    indistinguishable: bool
    breach_output: Any
    breach_prob_s: float
    breach_prob_neighbor: float

    @property
    def breaches_prob_dp(self) -> bool:
        return self.breach_prob_s > 0 and self.breach_prob_neighbor == 0


def counterexample_A_hat(domain: Sequence, log, seed: int,
                         epsilon_primes: Sequence[float] = (0.01, 0.1, 1.0)):
    """Run the counterexample algorithm and analyse it exhaustively over ``domain``.

    Returns ``(sampled_history, report)``. The report gives, for each
    ``eps'``, the largest ``P[A(S) in O] - e^eps' P[A(S') in O]`` over all
    singleton events and over all events, taken across every pair of
    first-user histories; and a breach witness: an output that has positive
    probability under ``S`` and zero under the neighbour whose first history
    is that output.
    """
    domain = list(dict.fromkeys(domain))
    if len(domain) < 2:
        raise ValueError("the history domain needs at least two elements")
    first = history_of(log)
    rng = np.random.default_rng(seed)
    sampled = a_hat_sample(domain, first, rng)

    n = len(domain)
    singleton, event = {}, {}
    for eps in epsilon_primes:
        scale = math.exp(eps)
        s_max = e_max = -math.inf
        for d, d2 in itertools.permutations(domain, 2):
            p, q = a_hat_distribution(domain, d), a_hat_distribution(domain, d2)
            gaps = [p.get(o, 0.0) - scale * q.get(o, 0.0) for o in domain]
            s_max = max(s_max, max(gaps))
            e_max = max(e_max, sum(g for g in gaps if g > 0))
        singleton[eps], event[eps] = s_max, e_max
    delta_prime = 1.0 / (n - 1)
    ok = all(v <= delta_prime + _TOL for v in event.values())

    neighbor_first = sampled
    p_s = a_hat_distribution(domain, first).get(sampled, 0.0)
    p_n = a_hat_distribution(domain, neighbor_first).get(sampled, 0.0)
    report = AHatReport(n, delta_prime, list(epsilon_primes), singleton, event, ok,
                        sampled, p_s, p_n)
    return sampled, report


# --------------------------------------------------------------------------
# negative results for pure differential privacy


@dataclass
class ImpossibilityReport:
    domain_threshold: float
    inaccuracy_lower_bound: float
    baseline_inaccuracy_note: str
    threshold_single_epsilon: float

    def verdict(self, domain_size: float) -> str:
        if domain_size >= self.domain_threshold:
            return "impossibility applies"
        return "inconclusive"


def impossibility_bound(users: int, m: int, tau_plus_xi: float, tau_minus_xi: float,
                        epsilon: float, c: float) -> ImpossibilityReport:
    """Domain size beyond which a c-accurate epsilon-DP publisher loses to the empty output.

    The threshold is ``U m (2 e^{2 eps (tau+xi)/m} / (c (tau+xi)) + 1/(tau-xi+1))``.
    ``threshold_single_epsilon`` evaluates the same expression with
    ``e^{eps (tau+xi)/m}``, the constant used in one step of the argument.
    """
    if not 0 < c <= 1:
        raise ValueError("c must lie in (0, 1]")
    if not tau_plus_xi > 0 or tau_minus_xi < 0:
        raise ValueError("need tau+xi > 0 and tau-xi >= 0")

    def threshold(factor):
        return users * m * (2 * math.exp(factor * epsilon * tau_plus_xi / m) / (c * tau_plus_xi)
                            + 1.0 / (tau_minus_xi + 1))

    lower = 2.0 * users * m / tau_plus_xi
    note = ("the empty output misses only the very-frequent items, of which there are at most "
            f"U m/(tau+xi) = {users * m / tau_plus_xi:.6g}; above the threshold any such "
            f"algorithm has inaccuracy at least {lower:.6g}")
    return ImpossibilityReport(threshold(2.0), lower, note, threshold(1.0))


def lemma3_ratio(epsilon: float, m: int, l1_distance: float, p: float) -> float:
    """Lower bound ``p e^{-L1 eps/m}`` on retaining an item after moving to a neighbour at L1 distance."""
    if not 0 <= p <= 1 or l1_distance < 0:
        raise ValueError("need p in [0, 1] and a non-negative distance")
    return p * math.exp(-l1_distance * epsilon / m)


def l1_distance(h1, h2) -> float:
    a, b = as_counts(h1), as_counts(h2)
    return float(sum(abs(a.get(k, 0) - b.get(k, 0)) for k in set(a) | set(b)))


def histogram_of(counts: Mapping, kind: ItemKind = ItemKind.KEYWORD) -> Histogram:
    return Histogram(kind, dict(counts))
