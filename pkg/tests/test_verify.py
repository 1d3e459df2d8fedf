from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from drmdl.algorithms import ParameterError, simulate_lcb_dr
from drmdl.bounds import CapExceeded
from drmdl.instance import Instance, e1, gap_profile, random_instance
from drmdl.sampling import substream
from drmdl.verify import (
    AlgorithmSpec,
    McEstimate,
    exact_ue_distribution,
    expectation_max_check,
    mc_regret,
    tail_check_bernstein,
    tail_check_mcdiarmid,
    ucbe_event_audit,
)


def rational_ue_law(probs, reward, alloc):
    """P(output = a) by enumerating joint outcomes in exact arithmetic."""
    k, m, l = len(probs), len(probs[0]), len(reward)
    out = [Fraction(0)] * l
    blocks = [list(itertools.product(range(m), repeat=n)) for n in alloc]
    for combo in itertools.product(*blocks):
        w = Fraction(1)
        for q, seq in enumerate(combo):
            for x in seq:
                w *= probs[q][x]
        if w == 0:
            continue
        proxy = [min(sum((reward[a][x] for x in combo[q]), Fraction(0)) / alloc[q] for q in range(k)) for a in range(l)]
        best = max(proxy)
        out[proxy.index(best)] += w
    return out


E1_P = [[Fraction(3, 5), Fraction(2, 5)], [Fraction(2, 5), Fraction(3, 5)]]
E1_R = [[Fraction(1, 5), Fraction(4, 5)], [Fraction(1, 10), Fraction(9, 10)]]


def test_e1_single_sample_law():
    law = exact_ue_distribution(e1(), 1)
    assert law.choice_prob[1] == pytest.approx(0.24, abs=1e-15)
    assert law.regret == pytest.approx(0.0048, abs=1e-15)
    assert law.error_prob == pytest.approx(0.24, abs=1e-15)
    assert law.outcomes == 4


@pytest.mark.parametrize("alloc", [[1, 1], [2, 2], [3, 3], [2, 3], [4, 1]])
def test_e1_matches_rational_enumeration(alloc):
    oracle = rational_ue_law(E1_P, E1_R, alloc)
    law = exact_ue_distribution(e1(), alloc)
    np.testing.assert_allclose(law.choice_prob, [float(p) for p in oracle], atol=1e-13)


def test_random_instances_match_rational_enumeration():
    rng = np.random.default_rng(77)
    for _ in range(5):
        probs = [[Fraction(int(v), 10) for v in row] for row in rng.multinomial(10, [1 / 3] * 3, size=2)]
        reward = [[Fraction(int(v), 20) for v in row] for row in rng.integers(0, 21, size=(3, 3))]
        inst = Instance.build(["a", "b", "c"], [0, 0.5, 1],
                              [(f"Q{j}", [float(p) for p in probs[j]]) for j in range(2)],
                              [[float(r) for r in row] for row in reward])
        oracle = rational_ue_law(probs, reward, [2, 3])
        law = exact_ue_distribution(inst, [2, 3])
        np.testing.assert_allclose(law.choice_prob, [float(p) for p in oracle], atol=1e-12)


def test_identical_rows_zero_exact_regret():
    inst = e1().with_reward(np.array([[0.3, 0.6], [0.3, 0.6]]))
    assert exact_ue_distribution(inst, 3).regret == 0.0


def test_enumeration_cap():
    with pytest.raises(CapExceeded, match="2\\^30"):
        exact_ue_distribution(e1(), 15, cap=10**6)


def test_exact_sandwich_holds():
    rng = np.random.default_rng(3)
    for _ in range(10):
        inst = random_instance(rng, 2, 2, 3)
        prof = gap_profile(inst)
        if not math.isfinite(prof.delta_dr_min):
            continue
        law = exact_ue_distribution(inst, [2, 3], prof)
        assert prof.delta_dr_min * law.error_prob <= law.regret + 1e-15
        assert law.regret <= law.error_prob + 1e-15


def test_mc_matches_exact_e1_n3():
    inst = e1()
    prof = gap_profile(inst)
    exact = exact_ue_distribution(inst, 3, prof)
    est = mc_regret(inst, prof, AlgorithmSpec("ue", n=3), 100_000, 21)
    assert est.error_prob.agrees_with(exact.error_prob)
    assert est.regret.agrees_with(exact.regret)


def test_mc_nue_matches_exact_e1():
    inst = e1()
    prof = gap_profile(inst)
    exact = exact_ue_distribution(inst, [2, 2], prof)
    est = mc_regret(inst, prof, AlgorithmSpec("nue", allocation=(2, 2)), 100_000, 5)
    assert est.error_prob.agrees_with(exact.error_prob)


def test_mc_deterministic_instance_zero_se():
    inst = Instance.build(["a", "b"], [0, 1], {"Q1": [1.0, 0.0], "Q2": [0.0, 1.0]}, [[0.2, 0.8], [0.1, 0.9]])
    est = mc_regret(inst, gap_profile(inst), AlgorithmSpec("ue", n=2), 100, 1)
    assert est.regret.std_error == 0.0 and est.error_prob.std_error == 0.0


def test_mc_reproducible():
    inst = e1()
    prof = gap_profile(inst)
    a = mc_regret(inst, prof, AlgorithmSpec("ue", n=2), 5000, 99, shard_size=1000)
    b = mc_regret(inst, prof, AlgorithmSpec("ue", n=2), 5000, 99, shard_size=1000)
    assert a == b


def test_mc_errors():
    inst = e1()
    prof = gap_profile(inst)
    with pytest.raises(ParameterError):
        mc_regret(inst, prof, AlgorithmSpec("ue", n=2), 1, 0)
    with pytest.raises(ParameterError):
        mc_regret(inst, prof, AlgorithmSpec("nue", allocation=(1, 2, 3)), 10, 0)
    with pytest.raises(ParameterError):
        mc_regret(inst, prof, AlgorithmSpec("sr"), 10, 0)


def test_mc_estimate_needs_two_trials():
    with pytest.raises(ParameterError):
        McEstimate.from_samples(np.array([1.0]), 0)


def test_tail_checks_trivial_points():
    chk = tail_check_mcdiarmid(e1(), "a1", "a2", 20, [0.0, 5.0], 2000, 1)
    assert chk.bound[0] == 1.0 and chk.passed[0]
    assert chk.empirical_tail[1] == 0.0 and chk.passed[1]
    chk = tail_check_bernstein(e1(), "a1", "a2", [10, 20], [0.0], 2000, 1)
    assert chk.bound[0] == 1.0
    with pytest.raises(ParameterError):
        tail_check_mcdiarmid(e1(), "a1", "a1", 20, [0.1], 10, 1)


def test_tail_check_pass_rule():
    chk = tail_check_mcdiarmid(e1(), "a1", "a2", 20, [0.01, 0.02, 0.05], 20_000, 4)
    for p, s, b, ok in zip(chk.empirical_tail, chk.std_error, chk.bound, chk.passed):
        assert ok == (p <= b + 3 * s)


def test_bernstein_reports_comparison_at_equal_n():
    chk = tail_check_bernstein(e1(), "a1", "a2", [10, 10], [0.05, 0.1], 5000, 2)
    assert len(chk.extras["tighter"]) == 2
    assert "tighter" not in tail_check_bernstein(e1(), "a1", "a2", [10, 20], [0.05], 5000, 2).extras


def test_expectation_max_degenerate():
    inst = Instance.build(["a", "b"], [0, 1], {"Q1": [1.0, 0.0], "Q2": [0.0, 1.0]}, [[0.2, 0.8], [0.1, 0.9]])
    rep = expectation_max_check(inst, "a", [3, 3], 100, 0)
    assert rep.estimate.mean == pytest.approx(0.0, abs=1e-15) and rep.all_pass


def test_expectation_max_large_n():
    rep = expectation_max_check(e1(), "a1", [10_000, 10_000], 2000, 6)
    assert rep.hoeffding_bound == pytest.approx(4 * math.sqrt(math.log(2) / 1e4), rel=1e-12)
    assert rep.estimate.mean < rep.hoeffding_bound


def test_audit_refuses_uninstrumented():
    prof = gap_profile(e1())
    batch = simulate_lcb_dr(e1(), prof, None, "auto", substream(0, 0), 10)
    with pytest.raises(ParameterError):
        ucbe_event_audit(batch, prof)


def test_audit_huge_eps():
    prof = gap_profile(e1())
    batch = simulate_lcb_dr(e1(), prof, None, "auto", substream(0, 0), 300, scale=2000.0, instrument=True)
    rounds = ucbe_event_audit(batch, prof)
    for r in rounds:
        assert r.passed and not r.violations
    assert rounds[-1].event_held >= 0.95 * rounds[-1].trials


def test_audit_zero_budget_rounds():
    prof = gap_profile(e1())
    batch = simulate_lcb_dr(e1(), prof, None, "auto", substream(0, 0), 50, budgets=[0, 0], instrument=True)
    for r in ucbe_event_audit(batch, prof):
        assert r.pulls == 0 and r.notes


def test_exact_law_z_test_handles_unobserved_rare_outcome():
    inst = Instance.build(["a", "b"], [0, 1], {"Q1": [0.999, 0.001], "Q2": [0.5, 0.5]}, [[0.6, 0.6], [0.0, 1.0]])
    prof = gap_profile(inst)
    law = exact_ue_distribution(inst, [3, 1], prof)
    assert law.error_prob == pytest.approx(3 * 0.001**2 * 0.999 * 0.5 + 0.001**3 * 0.5, rel=1e-12)
    est = mc_regret(inst, prof, AlgorithmSpec("nue", allocation=(3, 1)), 10_000, 8)
    assert est.error_prob.mean == 0.0 and est.error_prob.std_error == 0.0
    assert law.agrees_with(est)
    assert not est.error_prob.agrees_with(law.error_prob)
