from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drmdl.algorithms import ParameterError, eps_schedule
from drmdl.bounds import (
    CapExceeded,
    empirical_max_bounds,
    expected_max_independent,
    g_quantity,
    gap_tail,
    gap_tail_threshold,
    lcb_dr_error_bound,
    nue_bound_for,
    nue_regret_bound,
    ue_distribution_free_bound,
    ue_regret_bound,
    ue_threshold,
    variance_quantities,
)
from drmdl.instance import Instance, e1, gap_profile, lipschitz_constant
from drmdl.sampling import substream

# Reference values below were evaluated with mpmath at 40 digits or in exact
# rational arithmetic and frozen.
UE_BOUND_E1_200K = 0.001473707114072855201
UE_THRESHOLD_E1 = 110903.54888959124951
UE_FREE_T800 = 0.78378469117770567418
G_E1 = 3.3854538664600190957
EMP_MAX_E1 = (1.0531075390936637365, 1.6927269332300095479)
SIGMA2_E1_10_20 = Fraction(2793967742408100390651, 116415321826934814453125)
LCB_AUTO_E1 = 95.991467117020532693
LCB_400_E1 = 21575.848490086958504


def rational_instance(probs, support):
    return [[Fraction(p) for p in row] for row in probs], [Fraction(x) for x in support]


def enumerate_variance(probs, support, alloc):
    """Sigma_T^2 and V_T by enumerating every joint sample outcome."""
    k, m = len(probs), len(support)
    mu = [sum(p * x for p, x in zip(row, support)) for row in probs]
    dev = [[(x - mu[q]) ** 2 for x in support] for q in range(k)]
    sigma = Fraction(0)
    per_q = []
    for q in range(k):
        law: dict[Fraction, Fraction] = {}
        for seq in itertools.product(range(m), repeat=alloc[q]):
            w = math.prod((probs[q][i] for i in seq), start=Fraction(1))
            if w:
                v = sum((dev[q][i] for i in seq), Fraction(0)) / alloc[q] ** 2
                law[v] = law.get(v, 0) + w
        per_q.append(law)
    for combo in itertools.product(*[list(l.items()) for l in per_q]):
        w = math.prod((c[1] for c in combo), start=Fraction(1))
        sigma += w * max(c[0] for c in combo)
    order = sorted(range(k), key=lambda q: alloc[q])
    V, prev = Fraction(0), 0
    for j in range(k):
        width = alloc[order[j]] - prev
        prev = alloc[order[j]]
        if width == 0:
            continue
        rest = order[j:]
        e = Fraction(0)
        for xs in itertools.product(range(m), repeat=len(rest)):
            w = math.prod((probs[q][x] for q, x in zip(rest, xs)), start=Fraction(1))
            if w:
                e += w * max(dev[q][x] / alloc[q] ** 2 for q, x in zip(rest, xs))
        V += width * e
    return sigma, V


# ---- UE ----------------------------------------------------------------------


def test_ue_bound_all_optimal_is_zero():
    inst = e1().with_reward(np.array([[0.2, 0.8], [0.2, 0.8]]))
    rep = ue_regret_bound(gap_profile(inst), 2, 100)
    assert rep.value == 0.0 and rep.applicable


def test_ue_threshold_e1():
    prof = gap_profile(e1())
    assert ue_threshold(prof, 2) == pytest.approx(UE_THRESHOLD_E1, rel=1e-12)
    assert not ue_regret_bound(prof, 2, 10**4).applicable


def test_ue_bound_e1_large_n():
    rep = ue_regret_bound(gap_profile(e1()), 2, 200_000)
    assert rep.applicable
    assert rep.value == pytest.approx(UE_BOUND_E1_200K, rel=1e-9)


def test_ue_free_bound_values():
    assert ue_distribution_free_bound(2, 2, 800).value == pytest.approx(UE_FREE_T800, rel=1e-12)
    c = 16 * math.sqrt(math.log(2)) + 2 * math.sqrt(2 * math.log(2))
    n = 4 * c**2  # not an integer; T = 2n rounds to the nearest even budget
    T = 2 * round(n)
    assert ue_distribution_free_bound(2, 2, T).value == pytest.approx(0.5 * math.sqrt(n / round(n)), rel=1e-12)
    assert ue_distribution_free_bound(2, 2, T).value == pytest.approx(0.5, rel=1e-4)
    a = ue_distribution_free_bound(3, 4, 600).value
    b = ue_distribution_free_bound(3, 4, 1200).value
    assert a / b == pytest.approx(math.sqrt(2), rel=1e-12)


def test_ue_free_bound_errors_and_flags():
    with pytest.raises(ParameterError):
        ue_distribution_free_bound(1, 2, 10)
    with pytest.raises(ParameterError):
        ue_distribution_free_bound(2, 1, 10)
    rep = ue_distribution_free_bound(2, 2, 801)
    assert rep.intermediates["n"] == 400 and rep.intermediates["notes"]


def test_ue_bound_nonincreasing_past_threshold():
    prof = gap_profile(e1())
    n0 = math.ceil(ue_threshold(prof, 2))
    grid = np.unique(np.geomspace(n0, 50 * n0, 50).astype(int))
    vals = [ue_regret_bound(prof, 2, int(n)).value for n in grid]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


# ---- variance quantities -------------------------------------------------------


def test_e1_variance_exact():
    vq = variance_quantities(e1(), [10, 20], "exact")
    assert vq.sigma2_T == pytest.approx(0.024, abs=1e-15)
    assert vq.Sigma2_T == pytest.approx(float(SIGMA2_E1_10_20), rel=1e-12)
    assert vq.V_T == pytest.approx(0.03, abs=1e-14)
    assert vq.sigma2_T <= vq.Sigma2_T <= vq.V_T <= vq.crude_cap
    assert vq.crude_cap == pytest.approx(0.036, abs=1e-15)


def test_e1_variance_monte_carlo_agrees():
    exact = variance_quantities(e1(), [10, 20], "exact")
    mc = variance_quantities(e1(), [10, 20], "mc", substream(5, 0), n_samples=200_000)
    assert abs(mc.Sigma2_T - exact.Sigma2_T) <= 4 * mc.Sigma2_T_se
    assert abs(mc.V_T - exact.V_T) <= 4 * mc.V_T_se


def test_variance_matches_enumeration_small():
    probs, support = rational_instance([["1/5", "1/2", "3/10"], ["1/2", "1/4", "1/4"]], ["0", "1/2", "1"])
    inst = Instance.build(["a", "b"], [float(x) for x in support],
                          [(f"Q{i}", [float(p) for p in row]) for i, row in enumerate(probs)],
                          [[0, 0.5, 1], [1, 0.5, 0]])
    for alloc in ([2, 3], [3, 1], [2, 2]):
        sigma, V = enumerate_variance(probs, support, alloc)
        vq = variance_quantities(inst, alloc, "exact")
        assert vq.Sigma2_T == pytest.approx(float(sigma), rel=1e-12)
        assert vq.V_T == pytest.approx(float(V), rel=1e-12)


def test_equal_distributions_v_structure():
    inst = Instance.build(["a", "b"], [0, 1], {"Q1": [0.3, 0.7], "Q2": [0.3, 0.7]}, [[0, 1], [1, 0]])
    probs, support = rational_instance([["3/10", "7/10"]] * 2, ["0", "1"])
    _, V = enumerate_variance(probs, support, [4, 4])
    assert variance_quantities(inst, [4, 4], "exact").V_T == pytest.approx(float(V), rel=1e-12)


def test_variance_cap_refusal():
    with pytest.raises(CapExceeded, match="10"):
        variance_quantities(Instance.build(["a", "b"], [0, 0.3, 0.7], {"Q1": [0.2, 0.3, 0.5], "Q2": [0.1, 0.1, 0.8]},
                                           [[0, 1, 1], [1, 0, 0]]), [60, 60], "exact", cap=10)
    vq = variance_quantities(e1(), [10, 20], "auto", substream(1, 0), n_samples=1000, cap=3)
    assert vq.method == "monte-carlo"


def test_expected_max_independent_small():
    laws = [(np.array([0.0, 1.0]), np.array([0.5, 0.5])), (np.array([0.5]), np.array([1.0]))]
    assert expected_max_independent(laws) == pytest.approx(0.75)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 6), min_size=2, max_size=3))
def test_variance_hierarchy_and_cap(seed, alloc):
    rng = np.random.default_rng(seed)
    k, m = len(alloc), 3
    probs = rng.dirichlet(np.ones(m), size=k)
    inst = Instance.build(["a", "b"], [0, 0.4, 1], [(f"Q{j}", probs[j]) for j in range(k)],
                          rng.uniform(size=(2, m)))
    vq = variance_quantities(inst, alloc, "exact")
    tol = 1e-12
    assert vq.sigma2_T <= vq.Sigma2_T + tol
    assert vq.Sigma2_T <= vq.V_T + tol
    assert vq.V_T <= vq.crude_cap + tol


# ---- NUE -----------------------------------------------------------------------


def test_g_quantity():
    assert g_quantity(2, 10, 0.8, math.sqrt(0.024)) == pytest.approx(G_E1, rel=1e-12)
    assert g_quantity(3, 7, 0.0, 0.3) == pytest.approx(32 * math.log(3) / 7, rel=1e-15)
    a, b = g_quantity(4, 10, 0.5, 0.2), g_quantity(4, 20, 0.5, 0.2)
    second = 8 * 0.5 * 0.2 * math.sqrt(2 * math.log(4))
    assert (b - second) == pytest.approx((a - second) / 2, rel=1e-12)


def test_nue_bound_e1_not_applicable():
    inst = e1()
    prof = gap_profile(inst)
    rep, vq = nue_bound_for(inst, prof, [10, 20], lipschitz_constant(inst).overall)
    assert not rep.applicable
    assert rep.intermediates["G_T"] == pytest.approx(G_E1, rel=1e-12)
    assert rep.value >= 0


def test_nue_bound_boundary_and_all_optimal():
    prof = gap_profile(e1())
    vq = variance_quantities(e1(), [10, 20], "exact")
    rep = nue_regret_bound(prof, vq, float(prof.delta_dr[1]), 0.8, 10)
    assert rep.value == pytest.approx(float(prof.delta_dr[1]), rel=1e-15)
    flat = gap_profile(e1().with_reward(np.array([[0.2, 0.8], [0.2, 0.8]])))
    assert nue_regret_bound(flat, vq, 0.1, 0.8, 10).value == 0.0


def test_nue_bound_direct_formula():
    prof = gap_profile(e1())
    vq = variance_quantities(e1(), [10, 20], "exact")
    G, L = 0.005, 0.8
    d = float(prof.delta_dr[1])
    denom = 16 * L**2 * (2 * vq.sigma2_T + vq.Sigma2_T + 6 * vq.V_T) + 2 * math.sqrt(6) / 10 * (d - G)
    rep = nue_regret_bound(prof, vq, G, L, 10)
    assert rep.applicable
    assert rep.value == pytest.approx(d * math.exp(-((d - G) ** 2) / denom), rel=1e-12)


# ---- LCB-DR --------------------------------------------------------------------


def test_lcb_bound_e1_auto():
    prof = gap_profile(e1())
    rep = lcb_dr_error_bound(prof, None, eps_schedule(prof))
    assert rep.value == pytest.approx(LCB_AUTO_E1, rel=1e-12)
    assert rep.intermediates["exponents"][0] == pytest.approx(2 / 25 / 36 * 0.01, rel=1e-12)
    assert rep.vacuous


def test_lcb_bound_e1_scaled():
    prof = gap_profile(e1())
    rep = lcb_dr_error_bound(prof, None, eps_schedule(prof, scale=400))
    assert rep.value == pytest.approx(LCB_400_E1, rel=1e-12)


def test_lcb_bound_rejects_low_eps():
    with pytest.raises(ParameterError):
        lcb_dr_error_bound(gap_profile(e1()), None, [0.001, 1.0])


def test_lcb_bound_realised_exponents():
    from drmdl.algorithms import run_lcb_dr

    prof = gap_profile(e1())
    res = run_lcb_dr(e1(), prof, None, "auto", substream(3, 0), scale=5)
    rep = lcb_dr_error_bound(prof, None, [5 * e for e in eps_schedule(prof).eps], res.rounds)
    assert all(rep.intermediates["exponent_identity"])
    manual = run_lcb_dr(e1(), prof, None, "auto", substream(3, 0), budgets=[0, 0])
    rep = lcb_dr_error_bound(prof, None, eps_schedule(prof), manual.rounds)
    assert not rep.applicable and any("not guaranteed" in v for v in rep.violated_preconditions)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 1e4), st.floats(1.0, 1e4))
def test_lcb_bound_nonnegative(s1, s2):
    prof = gap_profile(e1())
    base = eps_schedule(prof).eps
    try:
        rep = lcb_dr_error_bound(prof, None, [base[0] * s1, base[1] * s2 * s1])
    except ParameterError:
        return
    assert rep.value >= 0


def test_lcb_bound_eventually_decreasing_in_eps():
    # u_j grows linearly in eps_j, so the bound first rises and only falls
    # once the exponential factor dominates
    prof = gap_profile(e1())
    base = eps_schedule(prof).eps
    first = [lcb_dr_error_bound(prof, None, [base[0], base[1] * s]).value for s in (1, 2)]
    assert first[1] > first[0]
    big = [base[1] * s for s in np.geomspace(1e4, 1e6, 30)]
    vals = [lcb_dr_error_bound(prof, None, [base[0], e]).value for e in big]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


# ---- expectation of maxima and the gap tail --------------------------------------


def test_empirical_max_bounds():
    assert empirical_max_bounds(2, math.log(2))[0] == pytest.approx(4.0, rel=1e-15)
    b1, b2 = empirical_max_bounds(2, 10, 0.8, math.sqrt(0.024))
    assert (b1, b2) == pytest.approx(EMP_MAX_E1, rel=1e-12)
    assert empirical_max_bounds(5, 40)[0] * 2 == pytest.approx(empirical_max_bounds(5, 10)[0], rel=1e-15)
    assert empirical_max_bounds(3, 10)[1] is None
    with pytest.raises(ParameterError):
        empirical_max_bounds(1, 10)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 50), st.integers(1, 10**6))
def test_gap_tail_decreasing_past_threshold(k, n):
    alpha, beta = n / 2, 8 * math.sqrt(math.log(k) / n)
    x0 = gap_tail_threshold(alpha, beta)
    xs = np.linspace(x0, x0 + 5 / math.sqrt(alpha) + 1.0, 100)
    vals = gap_tail(xs, alpha, beta)
    assert np.all(np.diff(vals) <= 1e-12)
