import dataclasses
import itertools
import json
import math
from collections import Counter

import numpy as np
import pytest

from searchpriv.privacy_analysis import (
    OracleInstance,
    a_hat_sample,
    boundary_items,
    check_implication,
    counterexample_A_hat,
    fixture_instance,
    impossibility_bound,
    keyword_log,
    l1_distance,
    lemma3_ratio,
    pass_probability,
    random_instance,
    release_set_probability,
    release_space,
    verify_indistinguishability,
    verify_prob_dp,
)
from searchpriv.zealous import plan_from_parameters, plan_probabilistic, sanitize_histogram


def subsets(items):
    return [frozenset(c) for r in range(len(items) + 1) for c in itertools.combinations(items, r)]


# ---- exact probabilities


def test_pass_probability_at_tau_prime_is_half():
    plan = plan_from_parameters(1, 2.0, 1, 5.0)
    assert pass_probability(5.0, plan) == 0.5
    assert pass_probability(0.5, plan) == 0.0


def test_all_below_tau_gives_empty_release():
    plan = plan_from_parameters(1, 2.0, 3, 5.0)
    assert release_set_probability({"a": 1, "b": 2}, plan, set()) == 1.0


def test_two_coin_flips():
    plan = plan_from_parameters(1, 2.0, 1, 5.0)
    counts = {"a": 5.0, "b": 5.0}
    for s in subsets(["a", "b"]):
        assert release_set_probability(counts, plan, s) == pytest.approx(0.25)


def test_release_probabilities_sum_to_one():
    plan = plan_from_parameters(2, 1.5, 2, 4.0)
    counts = {"a": 1, "b": 2, "c": 3, "d": 4, "e": 7}
    total = sum(release_set_probability(counts, plan, s) for s in subsets(list(counts)))
    assert total == pytest.approx(1.0, abs=1e-12)
    assert release_set_probability(counts, plan, {"a"}) == 0.0


# ---- instances


def test_instance_validation():
    plan = plan_probabilistic(1.0, 0.05, 1, 2)
    with pytest.raises(ValueError, match="more than one"):
        OracleInstance(["a", "b"], keyword_log({"u1": ["a"], "u2": ["a"]}),
                       keyword_log({"u1": ["b"], "u2": ["b"]}), plan)
    with pytest.raises(ValueError, match="more than m"):
        OracleInstance(["a", "b"], keyword_log({"u1": ["a", "b"], "u2": ["a"]}),
                       keyword_log({"u1": ["a", "b"], "u2": ["a"]}), plan)
    with pytest.raises(ValueError, match="domain"):
        OracleInstance(["a"], keyword_log({"u1": ["z"], "u2": ["a"]}),
                       keyword_log({"u1": ["z"], "u2": ["a"]}), plan)


# ---- probabilistic DP


def test_identical_logs_have_unit_ratios():
    inst = fixture_instance()
    same = dataclasses.replace(inst, neighbor=inst.log)
    rep = verify_prob_dp(same, 2000)
    assert rep.passed
    for side in ("S", "S'"):
        assert rep.details[side]["max_set_log_ratio"] == 0.0
        assert rep.details[side]["max_density_log_ratio"] == 0.0


def test_fixture_passes():
    inst = fixture_instance()
    rep = verify_prob_dp(inst, 10_000)
    assert rep.passed, rep.to_json()
    assert rep.counterexample is None
    assert verify_prob_dp(inst.swapped(), 10_000).passed


def test_obligation_a_matches_closed_form():
    inst = fixture_instance()
    rep = verify_prob_dp(inst, 100)
    for side in ("S", "S'"):
        d = rep.details[side]
        assert d["breach_probability"] == pytest.approx(d["breach_probability_closed_form"], rel=1e-12)
    plan = inst.plan
    h, _ = inst.histograms()
    k = len(boundary_items(h, plan))
    assert k == 1
    expected = 1 - (1 - 0.5 * math.exp(-(plan.tau_prime - plan.tau) / plan.lam)) ** k
    assert rep.details["S"]["breach_probability"] == pytest.approx(expected)


def test_tiny_gap_fails_obligation_a():
    inst = fixture_instance()
    broken = dataclasses.replace(inst, plan=dataclasses.replace(inst.plan, tau_prime=inst.plan.tau + 0.1))
    rep = verify_prob_dp(broken, 1000)
    assert rep.passed is False
    assert "breach_probability" in rep.counterexample
    json.loads(rep.to_json())


def test_understated_epsilon_is_caught():
    inst = fixture_instance()
    lying = dataclasses.replace(inst, plan=dataclasses.replace(inst.plan, epsilon=0.1))
    rep = verify_prob_dp(lying, 2000)
    assert rep.passed is False
    assert "release_set" in rep.counterexample or "output" in rep.counterexample


def test_random_instances_pass():
    rng = np.random.default_rng(5)
    for i in range(10):
        inst = random_instance(rng)
        assert verify_prob_dp(inst, 2000, seed=i).passed


# ---- indistinguishability


def test_trivial_events():
    inst = fixture_instance()
    everything = [release_space(inst)]
    assert verify_indistinguishability(inst, event_sets=everything).passed
    rep = verify_indistinguishability(inst, event_sets=[[]])
    assert rep.passed and rep.details["max_gap"] <= 0


def test_exhaustive_on_three_items():
    plan = plan_probabilistic(2.0, 0.1, 1, 3)
    inst = OracleInstance(["a", "b", "c"], keyword_log({"u1": ["a"], "u2": ["b"], "u3": ["c"]}),
                          keyword_log({"u1": ["b"], "u2": ["b"], "u3": ["c"]}), plan)
    space = release_space(inst)
    events = [list(ev) for r in range(len(space) + 1) for ev in itertools.combinations(space, r)]
    assert verify_indistinguishability(inst, event_sets=events,
                                       epsilon=plan.epsilon, delta=plan.delta).passed


def test_indistinguishability_fails_with_zero_delta_and_tiny_epsilon():
    inst = fixture_instance()
    rep = verify_indistinguishability(inst, epsilon=1e-6, delta=0.0)
    assert rep.passed is False
    assert rep.counterexample is not None


def test_implication():
    inst = fixture_instance()
    assert check_implication(inst).status == "PASS"
    vacuous = dataclasses.replace(inst, plan=dataclasses.replace(inst.plan, delta=1.0))
    assert check_implication(vacuous).passed
    broken = dataclasses.replace(inst, plan=dataclasses.replace(inst.plan, tau_prime=inst.plan.tau + 0.1))
    assert check_implication(broken).status == "N/A"


# ---- the counterexample algorithm


def test_a_hat_two_histories():
    sample, rep = counterexample_A_hat(["h1", "h2"], ["h1"], seed=0)
    assert sample == "h2"
    assert rep.delta_prime == 1.0


def test_a_hat_eleven_histories():
    domain = [f"h{i}" for i in range(11)]
    _, rep = counterexample_A_hat(domain, domain, seed=1)
    assert rep.delta_prime == pytest.approx(0.1)
    assert rep.indistinguishable
    assert rep.max_singleton_gap[0.01] == pytest.approx(0.1)
    assert rep.breach_prob_s == pytest.approx(0.1)
    assert rep.breach_prob_neighbor == 0.0
    assert rep.breaches_prob_dp


def test_a_hat_uniform_sampling():
    domain = list(range(11))
    rng = np.random.default_rng(0)
    seen = Counter(a_hat_sample(domain, 0, rng) for _ in range(100_000))
    assert 0 not in seen
    assert all(abs(seen[d] / 100_000 - 0.1) <= 0.01 for d in domain[1:])


def test_a_hat_needs_two_histories():
    with pytest.raises(ValueError):
        counterexample_A_hat(["h"], ["h"], seed=0)


# ---- impossibility and Lemma 3


def test_impossibility_setting():
    rep = impossibility_bound(10**6, 10, 50, 0, 1.0, 0.01)
    assert rep.domain_threshold == pytest.approx(10**7 * (2 * math.exp(10) / 0.5 + 1))
    assert rep.domain_threshold < 5.3e35
    assert rep.verdict(5.3e35) == "impossibility applies"
    assert rep.verdict(1e6) == "inconclusive"
    assert rep.inaccuracy_lower_bound == pytest.approx(4e5)
    assert rep.threshold_single_epsilon < rep.domain_threshold
    # Pairs of queries with up to 3 of 900,000 words.
    assert (900_000**3) ** 2 == pytest.approx(5.3e35, rel=0.01)


def test_impossibility_limit():
    rep = impossibility_bound(1000, 2, 10, 4, 1e-12, 1.0)
    assert rep.domain_threshold == pytest.approx(1000 * 2 * (2 / 10 + 1 / 5))


def test_lemma3_values():
    assert lemma3_ratio(1.0, 1, 0.0, 0.7) == 0.7
    assert lemma3_ratio(1.0, 1, 1.0, 1.0) == pytest.approx(0.3679, abs=1e-4)


def test_lemma3_against_sanitize():
    eps, m = 1.0, 1
    plan = plan_from_parameters(m, 2.0 * m / eps, 1, 6.0)
    h, h2 = {"d": 6, "x": 3}, {"d": 5, "x": 3}
    assert l1_distance(h, h2) == 1.0
    runs = 20_000
    kept = sum("d" in sanitize_histogram(h, plan, s).entries for s in range(runs))
    kept2 = sum("d" in sanitize_histogram(h2, plan, s).entries for s in range(runs))
    p, p2 = kept / runs, kept2 / runs
    bound = lemma3_ratio(eps, m, 1.0, p)
    sd = math.sqrt(p2 * (1 - p2) / runs) + math.sqrt(p * (1 - p) / runs)
    assert p2 >= bound - 3 * sd
    assert p == pytest.approx(pass_probability(6, plan), abs=3 * math.sqrt(0.25 / runs))
