"""Closed-form regret / error bounds and the variance functionals they use.

Every evaluator returns a :class:`BoundReport`. Premises are checked and
reported through ``applicable`` rather than assumed; values above 1 are
returned as computed and marked ``vacuous``. Logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .algorithms import REL_TOL, EpsSchedule, ParameterError, check_allocation, eps_schedule, sample_fixed
from .instance import GAP_TOL, GapProfile, Instance
from .sampling import Stream

EXACT_ATOM_CAP = 10**6


class CapExceeded(ValueError):
    """An exact computation would exceed its configured state-space cap."""


@dataclass
class BoundReport:
    name: str
    value: float
    applicable: bool
    violated_preconditions: list[str] = field(default_factory=list)
    intermediates: dict[str, Any] = field(default_factory=dict)

    @property
    def vacuous(self) -> bool:
        return self.value > 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "value": self.value,
            "applicable": self.applicable,
            "vacuous": self.vacuous,
            "violated_preconditions": list(self.violated_preconditions),
            "intermediates": _plain(self.intermediates),
        }


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _suboptimal(profile: GapProfile) -> list[int]:
    return [i for i in range(profile.l) if profile.delta_dr[i] > GAP_TOL]


# --------------------------------------------------------------------------
# Uniform exploration
# --------------------------------------------------------------------------


def ue_threshold(profile: GapProfile, k: int) -> float:
    """Smallest n for which the UE regret bound is claimed."""
    return (8.0 / profile.delta_dr_min) ** 2 * math.log(k)


def ue_regret_bound(profile: GapProfile, k: int, n: int) -> BoundReport:
    sub = _suboptimal(profile)
    if not sub:
        return BoundReport("ue", 0.0, True, intermediates={"threshold_n": None, "terms": {}})
    threshold = ue_threshold(profile, k)
    radius = 8.0 * math.sqrt(math.log(k) / n)
    terms = {
        profile.actions[i]: float(profile.delta_dr[i] * math.exp(-n / 2.0 * (profile.delta_dr[i] - radius) ** 2))
        for i in sub
    }
    violated = []
    if n < threshold:
        violated.append(f"n >= (8/delta_dr_min)^2 log k = {threshold:.6g} fails for n = {n}")
    return BoundReport(
        "ue",
        math.fsum(terms.values()),
        not violated,
        violated,
        {"threshold_n": threshold, "radius": radius, "terms": terms},
    )


def ue_distribution_free_bound(k: int, l: int, T: int, profile: GapProfile | None = None) -> BoundReport:
    """Gap-free UE regret bound with the explicit constants of its proof."""
    if k < 2 or l < 2:
        raise ParameterError("need k >= 2 and l >= 2")
    if T < k:
        raise ParameterError("need at least one sample per distribution (T >= k)")
    violated = []
    n = T // k
    notes = []
    if T % k:
        notes.append(f"T = {T} is not a multiple of k = {k}; using n = floor(T/k) = {n}")
    const = 16.0 * math.sqrt(math.log(k)) + 2.0 * math.sqrt(2.0 * math.log(l))
    value = const / math.sqrt(n)
    if profile is not None and profile.l > 0 and math.isfinite(profile.delta_dr_min):
        thr = ue_threshold(profile, k)
        if n < thr:
            violated.append(f"n >= (8/delta_dr_min)^2 log k = {thr:.6g} fails for n = {n}")
    return BoundReport(
        "ue-free",
        value,
        not violated,
        violated,
        {
            "n": n,
            "constant": const,
            "rate_sqrt_k_log_kl_over_T": math.sqrt(k * math.log(k * l) / T),
            "notes": notes,
        },
    )


# --------------------------------------------------------------------------
# Variance functionals
# --------------------------------------------------------------------------


@dataclass
class VarianceQuantities:
    sigma2_T: float
    Sigma2_T: float
    V_T: float
    method: str
    Sigma2_T_se: float = 0.0
    V_T_se: float = 0.0
    n_samples: int = 0
    sigma2_Q: tuple[float, ...] = ()
    allocation: tuple[int, ...] = ()

    @property
    def sigma_T(self) -> float:
        return math.sqrt(self.sigma2_T)

    @property
    def crude_cap(self) -> float:
        return math.fsum(s / n for s, n in zip(self.sigma2_Q, self.allocation))

    def to_dict(self) -> dict[str, Any]:
        return {
            "sigma2_T": self.sigma2_T,
            "Sigma2_T": self.Sigma2_T,
            "Sigma2_T_se": self.Sigma2_T_se,
            "V_T": self.V_T,
            "V_T_se": self.V_T_se,
            "method": self.method,
            "n_samples": self.n_samples,
            "sigma2_Q": list(self.sigma2_Q),
            "crude_cap": self.crude_cap,
        }


def support_moments(instance: Instance) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the data value under every distribution."""
    x = np.asarray(instance.support, dtype=float)
    mu = instance.probs @ x
    var = np.einsum("km,km->k", instance.probs, (x[None, :] - mu[:, None]) ** 2)
    return mu, var


def _merge_atoms(values: np.ndarray, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(values, kind="stable")
    values, probs = values[order], probs[order]
    scale = max(1.0, float(np.abs(values).max())) if values.size else 1.0
    new_group = np.empty(values.size, dtype=bool)
    new_group[0] = True
    new_group[1:] = np.diff(values) > 1e-13 * scale
    groups = np.cumsum(new_group) - 1
    merged_p = np.bincount(groups, weights=probs)
    return values[new_group], merged_p


def _sum_law(y: np.ndarray, p: np.ndarray, n: int, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Law of the sum of ``n`` iid draws taking value ``y[i]`` w.p. ``p[i]``."""
    keep = p > 0
    y, p = y[keep], p[keep]
    vals, probs = np.zeros(1), np.ones(1)
    for _ in range(n):
        vals = (vals[:, None] + y[None, :]).ravel()
        probs = (probs[:, None] * p[None, :]).ravel()
        vals, probs = _merge_atoms(vals, probs)
        if vals.size > cap:
            raise CapExceeded(f"exact variance law needs more than {cap} atoms")
    return vals, probs


def expected_max_independent(laws: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """E[max] of independent nonnegative discrete variables via survival sums."""
    grid = np.unique(np.concatenate([v for v, _ in laws]))
    cdf_prod = np.ones(grid.size)
    for vals, probs in laws:
        order = np.argsort(vals)
        cum = np.cumsum(probs[order])
        pos = np.searchsorted(vals[order], grid, side="right")
        cdf_prod *= np.where(pos > 0, cum[np.maximum(pos - 1, 0)], 0.0)
    survival = np.clip(1.0 - cdf_prod, 0.0, 1.0)
    widths = np.diff(grid)
    return float(grid[0] + np.dot(widths, survival[:-1]))


def _sorted_allocation(alloc: np.ndarray) -> np.ndarray:
    return np.argsort(alloc, kind="stable")


def variance_quantities(
    instance: Instance,
    allocation: Sequence[int],
    method: str = "auto",
    stream: Stream | None = None,
    n_samples: int = 10**6,
    cap: int = EXACT_ATOM_CAP,
) -> VarianceQuantities:
    """sigma_T^2, Sigma_T^2 and V_T for the data values under ``allocation``.

    ``method`` is ``"exact"`` (convolution laws plus CDF products),
    ``"mc"`` (plug-in Monte Carlo with standard errors) or ``"auto"``
    (exact unless the cap is hit).
    """
    alloc = check_allocation(instance, allocation)
    x = np.asarray(instance.support, dtype=float)
    mu, var = support_moments(instance)
    sigma2_T = float(np.max(var / alloc))
    common = dict(sigma2_Q=tuple(float(v) for v in var), allocation=tuple(int(n) for n in alloc))

    if method not in ("exact", "mc", "auto"):
        raise ParameterError(f"unknown method {method!r}")
    if method in ("exact", "auto"):
        try:
            Sigma2, V = _exact_sigma_v(instance, alloc, mu, x, cap)
            return VarianceQuantities(sigma2_T, Sigma2, V, "exact", **common)
        except CapExceeded:
            if method == "exact":
                raise
    if stream is None:
        raise ParameterError("Monte Carlo variance estimation needs a stream")
    Sigma2, Sigma2_se, V, V_se = _mc_sigma_v(instance, alloc, mu, x, stream, n_samples)
    return VarianceQuantities(
        sigma2_T, Sigma2, V, "monte-carlo", Sigma2_se, V_se, n_samples, **common
    )


def _exact_sigma_v(instance, alloc, mu, x, cap):
    k = instance.k
    laws = []
    for q in range(k):
        y = (x - mu[q]) ** 2 / alloc[q] ** 2
        laws.append(_sum_law(y, instance.probs[q], int(alloc[q]), cap))
    Sigma2 = expected_max_independent(laws)

    order = _sorted_allocation(alloc)
    n_sorted = alloc[order]
    prev = 0
    V = 0.0
    for j in range(k):
        w = int(n_sorted[j]) - prev
        prev = int(n_sorted[j])
        if w == 0:
            continue
        single = []
        for q in order[j:]:
            y = (x - mu[q]) ** 2 / alloc[q] ** 2
            keep = instance.probs[q] > 0
            single.append(_merge_atoms(y[keep], instance.probs[q][keep]))
        V += w * expected_max_independent(single)
    return Sigma2, V


def _mc_sigma_v(instance, alloc, mu, x, stream, n_samples, shard=100_000):
    k = instance.k
    sig_parts = []
    done = 0
    while done < n_samples:
        b = min(shard, n_samples - done)
        counts = sample_fixed(instance, alloc, stream, b)
        dev2 = (x[None, None, :] - mu[None, :, None]) ** 2
        s = (counts * dev2).sum(axis=2) / (alloc[None, :] ** 2)
        sig_parts.append(s.max(axis=1))
        done += b
    sig = np.concatenate(sig_parts)
    Sigma2, Sigma2_se = float(sig.mean()), float(sig.std(ddof=1) / math.sqrt(sig.size))

    order = _sorted_allocation(alloc)
    n_sorted = alloc[order]
    prev = 0
    V, V_var = 0.0, 0.0
    for j in range(k):
        w = int(n_sorted[j]) - prev
        prev = int(n_sorted[j])
        if w == 0:
            continue
        ones = np.ones(k, dtype=np.int64)
        draws = sample_fixed(instance, ones, stream, n_samples)  # one draw from each distribution
        idx = draws.argmax(axis=2)  # (N, k) support index of the single draw
        vals = (x[idx] - mu[None, :]) ** 2 / alloc[None, :] ** 2
        term = vals[:, order[j:]].max(axis=1)
        V += w * float(term.mean())
        V_var += w**2 * float(term.var(ddof=1)) / n_samples
    return Sigma2, Sigma2_se, V, math.sqrt(V_var)


# --------------------------------------------------------------------------
# Non-uniform exploration
# --------------------------------------------------------------------------


def g_quantity(k: int, min_nQ: int, L: float, sigma_T: float) -> float:
    return 8.0 * (4.0 * math.log(k) / min_nQ + L * sigma_T * math.sqrt(2.0 * math.log(k)))


def nue_regret_bound(
    profile: GapProfile, vq: VarianceQuantities, G_T: float, L: float, min_nQ: int
) -> BoundReport:
    sub = _suboptimal(profile)
    if not sub:
        return BoundReport("nue", 0.0, True, intermediates={"G_T": G_T, "exponents": {}})
    variance_term = 16.0 * L**2 * (2.0 * vq.sigma2_T + vq.Sigma2_T + 6.0 * vq.V_T)
    violated = []
    if profile.delta_dr_min < G_T:
        violated.append(f"delta_dr_min = {profile.delta_dr_min:.6g} < G_T = {G_T:.6g}; outside theorem premises")
    exponents, terms = {}, {}
    for i in sub:
        gap = max(0.0, float(profile.delta_dr[i]) - G_T)
        denom = variance_term + 2.0 * math.sqrt(6.0) / min_nQ * gap
        expo = 0.0 if gap == 0.0 else gap**2 / denom
        exponents[profile.actions[i]] = expo
        terms[profile.actions[i]] = float(profile.delta_dr[i]) * math.exp(-expo)
    return BoundReport(
        "nue",
        math.fsum(terms.values()),
        not violated,
        violated,
        {
            "G_T": G_T,
            "variance_term": variance_term,
            "sigma2_T": vq.sigma2_T,
            "Sigma2_T": vq.Sigma2_T,
            "V_T": vq.V_T,
            "exponents": exponents,
            "terms": terms,
        },
    )


def nue_bound_for(
    instance: Instance,
    profile: GapProfile,
    allocation: Sequence[int],
    L: float,
    method: str = "auto",
    stream: Stream | None = None,
) -> tuple[BoundReport, VarianceQuantities]:
    vq = variance_quantities(instance, allocation, method, stream)
    nmin = int(min(allocation))
    G = g_quantity(instance.k, nmin, L, vq.sigma_T)
    return nue_regret_bound(profile, vq, G, L, nmin), vq


# --------------------------------------------------------------------------
# LCB-DR
# --------------------------------------------------------------------------


def lcb_dr_error_bound(
    profile: GapProfile,
    permutation: Sequence[str | int] | None,
    schedule: EpsSchedule | Sequence[float],
    rounds: Sequence[dict[str, Any]] | None = None,
) -> BoundReport:
    """Union bound on P(chosen != a*) for a run of LCB-DR.

    ``schedule`` is an :class:`EpsSchedule` or the raw eps list; the lower
    bounds are re-checked either way. When per-round records are given, each
    realised exponent is recomputed from (T_j, T~_j, k_j, H_j) and compared
    with the closed form; rounds whose budget fell short of the oracle budget
    (manual mode) void the guarantee.
    """
    eps = schedule.eps if isinstance(schedule, EpsSchedule) else tuple(schedule)
    sched = eps_schedule(profile, permutation, list(eps))
    k = profile.k
    cap = np.minimum(profile.c**2, 1.0)
    closed, realised, identity, terms = [], [], [], []
    violated: list[str] = []
    for j, a in enumerate(sched.permutation, start=1):
        e = sched.eps[j - 1]
        expo = 2.0 / 25.0 * float(cap[a]) * e
        closed.append(expo)
        if rounds is not None:
            r = rounds[j - 1]
            burden = r["H"] + float(profile.delta_a_min[a]) ** -2.0
            real = float(cap[a]) * (r["T_real"] + r["T_tilde"] - r["k"]) / (18.0 * burden)
            realised.append(real)
            identity.append(abs(real - expo) <= 1e-9 * max(1.0, abs(expo)))
            if r["T"] < r["T_real"] - REL_TOL * max(1.0, abs(r["T_real"])):
                violated.append(
                    f"round {j}: budget T={r['T']} below the oracle budget {r['T_real']:.6g}; not guaranteed"
                )
        terms.append(sched.u[j] * math.exp(-expo))
    value = 2.0 * k * math.fsum(terms)
    inter: dict[str, Any] = {
        "eps": list(sched.eps),
        "lower": list(sched.lower),
        "u": list(sched.u),
        "exponents": closed,
        "terms": [2.0 * k * t for t in terms],
    }
    if rounds is not None:
        inter["realised_exponents"] = realised
        inter["exponent_identity"] = identity
    return BoundReport("lcb-dr", value, not violated, violated, inter)


# --------------------------------------------------------------------------
# Expected maxima of empirical processes
# --------------------------------------------------------------------------


def empirical_max_bounds(
    k: int, min_nQ: int, L: float | None = None, sigma_T: float | None = None
) -> tuple[float, float | None]:
    if k < 2:
        raise ParameterError("need k >= 2")
    first = 4.0 * math.sqrt(math.log(k) / min_nQ)
    if L is None or sigma_T is None:
        return first, None
    second = 16.0 * math.log(k) / min_nQ + 4.0 * L * sigma_T * math.sqrt(2.0 * math.log(k))
    return first, second


def gap_tail(x: np.ndarray | float, alpha: float, beta: float) -> np.ndarray | float:
    """x * exp(-alpha (x - beta)^2), the per-action UE regret term as a function of the gap."""
    return x * np.exp(-alpha * (np.asarray(x) - beta) ** 2)


def gap_tail_threshold(alpha: float, beta: float) -> float:
    """Point past which :func:`gap_tail` is decreasing."""
    return 0.5 * (beta + math.sqrt(beta**2 + 2.0 / alpha))
