import dataclasses
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from searchpriv.searchlog import ItemKind, SearchEntry, SearchLog, generate_synthetic
from searchpriv.zealous import (
    PrivacyBudget,
    SanitizedHistogram,
    ZealousPlan,
    achieved_delta,
    achieved_delta_prime,
    laplace_from_uniform,
    laplace_sample,
    laplace_tail,
    min_gap_for_ratio,
    optimal_tau,
    plan_from_parameters,
    plan_indistinguishable,
    plan_probabilistic,
    publish_clicks,
    sanitize,
    sanitize_histogram,
    sweep_tau,
)


def one_keyword_log(counts):
    entries, n = [], 0
    for kw, c in counts.items():
        for _ in range(c):
            n += 1
            entries.append(SearchEntry(f"u{n:03d}", (kw,), 0))
    return SearchLog.from_entries(entries)


# ---- Laplace noise


def test_inverse_cdf_matches_closed_form():
    lam = 3.0
    for u in (-0.4, -0.1, 0.0, 0.2, 0.45):
        x = float(laplace_from_uniform(u, lam))
        cdf = 0.5 * math.exp(x / lam) if x < 0 else 1 - 0.5 * math.exp(-x / lam)
        assert cdf == pytest.approx(u + 0.5, abs=1e-12)


def test_laplace_moments():
    rng = np.random.default_rng(0)
    x = laplace_sample(2.0, rng, size=200_000)
    # var = 2 lam^2 = 8, so the mean has sd about 0.0063.
    assert abs(x.mean()) < 0.03
    assert x.var() == pytest.approx(8.0, rel=0.03)
    assert np.mean(x > 3.0) == pytest.approx(laplace_tail(3.0, 2.0), abs=0.005)


def test_laplace_tail():
    assert laplace_tail(0.0, 1.0) == 0.5
    assert laplace_tail(-2.0, 1.0) == pytest.approx(1 - 0.5 * math.exp(-2))


def test_laplace_rejects_bad_scale():
    with pytest.raises(ValueError):
        laplace_sample(0.0, np.random.default_rng(0))


# ---- planning


def test_table2_row_tau_1():
    plan = plan_probabilistic(1.0, 0.001, 2, 500_000, tau=1)
    assert plan.lam == 4.0
    assert plan.tau_prime == pytest.approx(81.12, abs=0.01)


def test_default_tau_is_optimal():
    plan = plan_probabilistic(1.0, 0.001, 2, 500_000)
    assert plan.tau == 4
    assert plan.tau_prime == pytest.approx(78.58, abs=0.01)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.sampled_from([1, 2, 4]), st.floats(1e-6, 0.1),
       st.integers(1_000, 10_000_000))
def test_optimal_tau_minimises_tau_prime(m, ratio, delta, users):
    # Exact when 2m/epsilon is an integer.
    epsilon = 2.0 * m / (ratio * m)
    best = optimal_tau(epsilon, m)
    rows = sweep_tau(epsilon, delta, m, users, range(1, 10 * best + 1))
    best_tp = dict(rows)[best]
    assert all(best_tp <= tp + 1e-9 for _, tp in rows)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.2, 10), st.integers(1, 10), st.floats(1e-6, 0.1),
       st.integers(1_000, 10_000_000))
def test_integer_argmin_is_floor_or_ceil(epsilon, m, delta, users):
    lam = 2.0 * m / epsilon
    rows = sweep_tau(epsilon, delta, m, users, range(1, 10 * optimal_tau(epsilon, m) + 1))
    argmin = min(rows, key=lambda r: r[1])[0]
    assert argmin in {max(1, math.floor(lam)), optimal_tau(epsilon, m)}


def test_ceil_tolerates_rounding():
    assert optimal_tau(0.1 * 3, 3) == 20
    assert optimal_tau(1.0, 2) == 4
    assert optimal_tau(3.0, 1) == 1


@pytest.mark.parametrize("eps,delta", [(0, 0.001), (-1, 0.001), (1, 0), (1, 1.5)])
def test_invalid_budget(eps, delta):
    with pytest.raises(ValueError):
        plan_probabilistic(eps, delta, 1, 100)


def test_privacy_budget_validation():
    PrivacyBudget(1.0, 1.0)
    with pytest.raises(ValueError):
        PrivacyBudget(1.0, 0.0)


def test_round_trip_delta():
    for eps, delta, m, users in [(1, 0.001, 2, 500_000), (0.5, 1e-6, 5, 10_000), (4, 0.01, 1, 1000)]:
        plan = plan_probabilistic(eps, delta, m, users)
        got_eps, got_delta = achieved_delta(plan.lam, plan.tau, plan.tau_prime, m, users)
        assert got_eps == pytest.approx(eps, rel=1e-12)
        assert got_delta == pytest.approx(delta, rel=1e-12)


def test_tau_prime_strictly_increases_as_delta_shrinks():
    tps = [plan_probabilistic(1, d, 2, 500_000).tau_prime for d in (0.1, 0.01, 0.001, 1e-6)]
    assert all(a < b for a, b in zip(tps, tps[1:]))


def test_delta_strictly_decreases_with_tau_prime():
    ds = [achieved_delta(5, 1, tp, 5, 500_000)[1] for tp in (100, 150, 200, 250)]
    assert all(a > b for a, b in zip(ds, ds[1:]))


def test_table1_cells():
    assert achieved_delta(1, 1, 100, 5, 500_000) == (10.0, pytest.approx(1.3e-37, rel=0.1))
    assert achieved_delta(5, 1, 200, 5, 500_000) == (2.0, pytest.approx(6.5e-12, rel=0.1))
    assert achieved_delta_prime(1, 100, 5)[1] == pytest.approx(1.4e-41, rel=0.1)
    assert achieved_delta_prime(5, 100, 5)[1] == pytest.approx(1.4e-8, rel=0.1)


def test_delta_clamps_with_warning():
    with pytest.warns(RuntimeWarning):
        assert achieved_delta(5, 1, 1, 5, 500_000)[1] == 1.0
    with pytest.warns(RuntimeWarning):
        assert achieved_delta_prime(1, 1.5, 3)[1] == 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert achieved_delta_prime(1, 1, 1)[1] == 0.5


def test_small_gap_warns():
    lam = 4.0
    with pytest.warns(RuntimeWarning, match="gap"):
        achieved_delta(lam, 1, 1 + 0.5 * min_gap_for_ratio(lam), 1, 10)


def test_plan_indistinguishable():
    plan = plan_indistinguishable(1.0, 0.01, 2)
    assert plan.tau == 1
    assert plan.lam == 4.0
    assert plan.tau_prime == pytest.approx(2 * (1 - math.log(0.01)))
    assert plan.epsilon is None
    assert plan.achieved_indist[0] == 1.0


def test_plan_from_parameters_with_tau_above_one():
    plan = plan_from_parameters(2, 4.0, 4, 78.6, users=500_000)
    assert plan.achieved_indist == plan.achieved_prob_dp


def test_plan_requires_ordered_thresholds():
    with pytest.raises(ValueError):
        ZealousPlan(1, 1.0, 5, 4)


def test_plan_dict_round_trip():
    plan = plan_probabilistic(1, 0.001, 2, 500_000)
    assert ZealousPlan.from_dict(plan.to_dict()) == plan


# ---- sanitization


def test_post_filter_soundness():
    log = generate_synthetic(500, 60, seed=4)
    plan = plan_probabilistic(2.0, 0.01, 2, log.user_count)
    out = sanitize(log, ItemKind.KEYWORD, plan, seed=9)
    assert out.entries
    for item, noisy in out.entries.items():
        assert out.raw_counts[item] >= plan.tau
        assert noisy > plan.tau_prime


def test_sanitize_deterministic_and_seed_sensitive():
    log = generate_synthetic(300, 40, seed=1)
    plan = plan_probabilistic(2.0, 0.01, 1, log.user_count)
    a = sanitize(log, ItemKind.QUERY, plan, seed=3)
    b = sanitize(log, ItemKind.QUERY, plan, seed=3)
    c = sanitize(log, ItemKind.QUERY, plan, seed=4)
    assert a.to_json() == b.to_json()
    assert a.entries != c.entries


def test_noise_independent_of_item_order():
    counts = {f"k{i}": 50 + i for i in range(30)}
    plan = plan_from_parameters(1, 2.0, 1, 40)
    forward = sanitize_histogram(counts, plan, seed=5)
    backward = sanitize_histogram(dict(reversed(list(counts.items()))), plan, seed=5)
    assert forward.entries == backward.entries


def test_below_tau_never_published():
    plan = plan_from_parameters(1, 1000.0, 10, 10)
    counts = {"low": 9.999, "edge": 10}
    for seed in range(300):
        out = sanitize_histogram(counts, plan, seed)
        assert "low" not in out.entries


def test_noisy_threshold_is_strict(monkeypatch):
    import searchpriv.zealous as z

    monkeypatch.setattr(z, "laplace_sample", lambda lam, rng, size=None: 0.0)
    plan = plan_from_parameters(1, 1.0, 1, 5)
    assert "x" not in sanitize_histogram({"x": 5}, plan, 0).entries
    assert "x" in sanitize_histogram({"x": 5.001}, plan, 0).entries


def test_sanitize_rejects_user_count_mismatch():
    log = one_keyword_log({"a": 3})
    plan = plan_probabilistic(1, 0.01, 1, 100)
    with pytest.raises(ValueError):
        sanitize(log, ItemKind.KEYWORD, plan, 0)


def test_sanitized_json_round_trip():
    log = generate_synthetic(200, 30, seed=2)
    plan = plan_probabilistic(4.0, 0.05, 1, log.user_count)
    out = sanitize(log, ItemKind.QUERY_PAIR, plan, seed=1)
    again = SanitizedHistogram.from_json(out.to_json())
    assert again.entries == out.entries
    assert again.plan == plan
    assert out.to_csv().splitlines()[0] == "item,noisy_count"


def test_replaced_plan_keeps_claim():
    plan = plan_probabilistic(1, 0.05, 1, 4)
    broken = dataclasses.replace(plan, tau_prime=plan.tau + (plan.tau_prime - plan.tau) / 2)
    assert broken.delta == plan.delta


# ---- clicks


def click_log():
    rows = [("u1", ("q",), 0, ("a.com", "b.com")), ("u2", ("q",), 0, ("a.com",)),
            ("u2", ("q",), 50, ("a.com",)), ("u3", ("r",), 0, ())]
    return SearchLog.from_entries(SearchEntry(*r) for r in rows)


def test_clicks_vanishing_noise():
    log = click_log()
    published = SanitizedHistogram(ItemKind.QUERY, {("q",): 9.0, ("r",): 9.0}, None, 0)
    out = publish_clicks(log, published, 3, 1e-9, 0, rankings={("q",): ["a.com", "b.com", "c.com"],
                                                               ("r",): ["a.com"]})
    assert [(u, round(v, 6)) for u, v in out[("q",)]] == [("a.com", 2.0), ("b.com", 1.0), ("c.com", 0.0)]
    assert [(u, round(v, 6)) for u, v in out[("r",)]] == [("a.com", 0.0)]


def test_clicks_fallback_pads_and_warns():
    published = SanitizedHistogram(ItemKind.QUERY, {("r",): 9.0}, None, 0)
    with pytest.warns(RuntimeWarning):
        out = publish_clicks(click_log(), published, 2, 1.0, 0)
    assert [u for u, _ in out[("r",)]] == ["<rank-1>", "<rank-2>"]


def test_click_noise_is_unbiased():
    log = click_log()
    published = SanitizedHistogram(ItemKind.QUERY, {("q",): 9.0}, None, 0)
    lam = 2.0
    vals = np.array([publish_clicks(log, published, 1, lam, s, rankings=lambda q: ["a.com"])[("q",)][0][1]
                     for s in range(20_000)])
    sigma = math.sqrt(2) * lam / math.sqrt(len(vals))
    assert abs(vals.mean() - 2.0) <= 3 * sigma
