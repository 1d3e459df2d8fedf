"""Ground-truth oracles and statistical checks of the concentration results.

Monte Carlo work is split into shards of fixed size; shard ``i`` draws from
``substream(master_seed, i)``. Results depend only on the seed and the
shard size, never on the order shards are executed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .algorithms import (
    REL_TOL,
    THRESH,
    LcbBatch,
    ParameterError,
    argmax_first,
    check_allocation,
    sample_fixed,
    simulate_lcb_dr,
    simulate_nue,
)
from .bounds import CapExceeded, empirical_max_bounds, support_moments, variance_quantities
from .instance import GAP_TOL, GapProfile, Instance, lipschitz_constant
from .sampling import Stream, substream

SHARD_SIZE = 20_000
ENUMERATION_CAP = 10**7
SLACK_SE = 3.0


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    trials: int
    master_seed: int

    @classmethod
    def from_samples(cls, values: np.ndarray, master_seed: int) -> "McEstimate":
        values = np.asarray(values, dtype=float)
        if values.size < 2:
            raise ParameterError("a Monte Carlo estimate needs at least 2 trials")
        se = float(values.std(ddof=1) / math.sqrt(values.size))
        return cls(float(values.mean()), se, int(values.size), int(master_seed))

    def agrees_with(self, value: float, n_se: float = SLACK_SE) -> bool:
        return abs(self.mean - value) <= n_se * self.std_error + 1e-12

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean, "std_error": self.std_error, "trials": self.trials,
                "master_seed": self.master_seed}


def sharded(trials: int, master_seed: int, shard_size: int = SHARD_SIZE):
    """Yield ``(stream, size)`` for each shard of a Monte Carlo run."""
    if trials < 1:
        raise ParameterError("trials must be positive")
    for i, start in enumerate(range(0, trials, shard_size)):
        yield substream(master_seed, i), min(shard_size, trials - start)


# --------------------------------------------------------------------------
# Algorithm specs and regret estimation
# --------------------------------------------------------------------------


@dataclass
class AlgorithmSpec:
    """What to run: ``ue`` (n), ``nue`` (allocation) or ``lcb-dr``."""

    name: str
    n: int | None = None
    allocation: tuple[int, ...] | None = None
    permutation: tuple[str, ...] | None = None
    eps: tuple[float, ...] | None = None
    scale: float = 1.0
    budgets: tuple[int, ...] | None = None

    def allocation_for(self, instance: Instance) -> list[int]:
        if self.name == "ue":
            if self.n is None:
                raise ParameterError("ue needs n")
            return [int(self.n)] * instance.k
        if self.name == "nue":
            if self.allocation is None:
                raise ParameterError("nue needs an allocation")
            return list(check_allocation(instance, self.allocation))
        raise ParameterError(f"{self.name} has no fixed allocation")

    def simulate(
        self, instance: Instance, profile: GapProfile, stream: Stream, trials: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Chosen action indices and total sample counts for a batch."""
        if self.name in ("ue", "nue"):
            alloc = self.allocation_for(instance)
            if self.name == "ue" and (self.n is None or self.n < 1):
                raise ParameterError("ue needs n >= 1")
            chosen, _, _ = simulate_nue(instance, alloc, stream, trials)
            return chosen, np.full(trials, sum(alloc))
        if self.name == "lcb-dr":
            batch = simulate_lcb_dr(
                instance, profile, self.permutation, self.eps or "auto", stream, trials,
                scale=self.scale, budgets=self.budgets,
            )
            return batch.chosen, batch.total
        raise ParameterError(f"unknown algorithm {self.name!r}")


@dataclass
class McRegret:
    regret: McEstimate
    error_prob: McEstimate
    choice_freq: tuple[float, ...]
    mean_samples: float
    sandwich_ok: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "regret": self.regret.to_dict(),
            "error_prob": self.error_prob.to_dict(),
            "choice_freq": list(self.choice_freq),
            "mean_samples": self.mean_samples,
            "sandwich_ok": self.sandwich_ok,
        }


def mc_regret(
    instance: Instance,
    profile: GapProfile,
    spec: AlgorithmSpec,
    trials: int,
    master_seed: int,
    shard_size: int = SHARD_SIZE,
) -> McRegret:
    if trials < 2:
        raise ParameterError("mc_regret needs at least 2 trials")
    chosen_parts, totals = [], []
    for stream, size in sharded(trials, master_seed, shard_size):
        c, t = spec.simulate(instance, profile, stream, size)
        chosen_parts.append(c)
        totals.append(t)
    chosen = np.concatenate(chosen_parts)
    gaps = profile.delta_dr[chosen]
    errors = (gaps > GAP_TOL).astype(float)
    regret = McEstimate.from_samples(gaps, master_seed)
    err = McEstimate.from_samples(errors, master_seed)
    dmin = profile.delta_dr_min if math.isfinite(profile.delta_dr_min) else 0.0
    slack = SLACK_SE * math.hypot(regret.std_error, err.std_error)
    sandwich = dmin * err.mean <= regret.mean + slack and regret.mean <= err.mean + slack
    if not sandwich:
        raise AssertionError(
            f"regret sandwich violated: {dmin}*{err.mean} <= {regret.mean} <= {err.mean}"
        )
    freq = np.bincount(chosen, minlength=instance.l) / chosen.size
    return McRegret(regret, err, tuple(float(f) for f in freq), float(np.concatenate(totals).mean()), sandwich)


# --------------------------------------------------------------------------
# Exact enumeration oracle
# --------------------------------------------------------------------------


@dataclass
class ExactLaw:
    choice_prob: tuple[float, ...]
    regret: float
    error_prob: float
    outcomes: int
    regret_var: float = 0.0  # per-trial variance of the gap of the output
    error_var: float = 0.0

    def agrees_with(self, est: McRegret, n_se: float = SLACK_SE) -> bool:
        """Two-sided z-test of a Monte Carlo estimate against this law.

        The standard errors come from the exact per-trial variances, so a
        rare outcome that never shows up in the sample is still judged on
        its true spread rather than on a zero sample variance.
        """
        n = est.regret.trials
        se_r = math.sqrt(self.regret_var / n)
        se_e = math.sqrt(self.error_var / n)
        return (abs(est.regret.mean - self.regret) <= n_se * se_r + 1e-12
                and abs(est.error_prob.mean - self.error_prob) <= n_se * se_e + 1e-12)

    def to_dict(self) -> dict[str, Any]:
        return {"choice_prob": list(self.choice_prob), "regret": self.regret,
                "error_prob": self.error_prob, "outcomes": self.outcomes,
                "regret_var": self.regret_var, "error_var": self.error_var}


def exact_ue_distribution(
    instance: Instance,
    allocation: int | Sequence[int],
    profile: GapProfile | None = None,
    cap: int = ENUMERATION_CAP,
    chunk: int = 1 << 16,
) -> ExactLaw:
    """Exact law of the UE/NUE output by enumerating every sample sequence.

    Each of the ``m ** sum(n_Q)`` joint outcomes is weighted by its product
    probability; the proxy is the min over distributions of per-sample reward
    averages, and the output is its first argmax (same tie rule as the
    samplers).
    """
    from .instance import gap_profile

    if isinstance(allocation, (int, np.integer)):
        allocation = [int(allocation)] * instance.k
    alloc = check_allocation(instance, allocation)
    profile = profile or gap_profile(instance)
    m = instance.m
    N = int(alloc.sum())
    size = m**N
    if size > cap:
        raise CapExceeded(f"enumeration needs {m}^{N} = {size} outcomes, above the cap of {cap}")
    owner = np.repeat(np.arange(instance.k), alloc)  # distribution of each position
    logp = np.full((instance.k, m), -np.inf)
    pos = instance.probs > 0
    logp[pos] = np.log(instance.probs[pos])
    weights = m ** np.arange(N - 1, -1, -1, dtype=np.int64)
    choice = np.zeros(instance.l)
    for start in range(0, size, chunk):
        codes = np.arange(start, min(size, start + chunk), dtype=np.int64)
        digits = (codes[:, None] // weights[None, :]) % m  # (C, N)
        lp = logp[owner[None, :], digits].sum(axis=1)
        p = np.exp(lp)
        live = p > 0
        if not live.any():
            continue
        digits, p = digits[live], p[live]
        proxy = np.full((digits.shape[0], instance.l), np.inf)
        for q in range(instance.k):
            cols = digits[:, owner == q]
            avg = instance.reward[:, cols].sum(axis=2).T / alloc[q]  # (C, l)
            proxy = np.minimum(proxy, avg)
        chosen = argmax_first(proxy, axis=1)
        choice += np.bincount(chosen, weights=p, minlength=instance.l)
    regret = float(np.dot(choice, profile.delta_dr))
    err = float(choice[profile.delta_dr > GAP_TOL].sum())
    regret_var = max(0.0, float(np.dot(choice, profile.delta_dr**2)) - regret**2)
    return ExactLaw(tuple(float(c) for c in choice), regret, err, size, regret_var, err * (1.0 - err))


# --------------------------------------------------------------------------
# Tail checks
# --------------------------------------------------------------------------


@dataclass
class TailCheck:
    t_grid: tuple[float, ...]
    empirical_tail: tuple[float, ...]
    std_error: tuple[float, ...]
    bound: tuple[float, ...]
    passed: tuple[bool, ...]
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return all(self.passed)

    def to_dict(self) -> dict[str, Any]:
        return {
            "t_grid": list(self.t_grid),
            "empirical_tail": list(self.empirical_tail),
            "std_error": list(self.std_error),
            "bound": list(self.bound),
            "passed": list(self.passed),
            "all_pass": self.all_pass,
            **self.extras,
        }


def _proxy_difference(instance, a, a2, alloc, trials, seed) -> np.ndarray:
    parts = []
    for stream, size in sharded(trials, seed):
        _, proxy, _ = simulate_nue(instance, alloc, stream, size)
        parts.append(proxy[:, a] - proxy[:, a2])
    return np.concatenate(parts)


def _tail_check(z: np.ndarray, t_grid: Sequence[float], bound: Callable[[float], float],
                slack: float) -> TailCheck:
    zc = z - z.mean()
    emp, se, bnd, ok = [], [], [], []
    for t in t_grid:
        p = float(np.mean(zc >= t))
        s = math.sqrt(p * (1.0 - p) / z.size)
        b = float(bound(t))
        emp.append(p)
        se.append(s)
        bnd.append(b)
        ok.append(p <= b + slack * s)
    return TailCheck(tuple(float(t) for t in t_grid), tuple(emp), tuple(se), tuple(bnd), tuple(ok))


def tail_check_mcdiarmid(
    instance: Instance, a: str | int, a2: str | int, n: int, t_grid: Sequence[float],
    trials: int, seed: int, slack: float = SLACK_SE,
) -> TailCheck:
    """Upper tail of the UE proxy difference against exp(-n t^2 / 2)."""
    i, i2 = instance.action_index(a), instance.action_index(a2)
    if i == i2:
        raise ParameterError("need two distinct actions")
    if n < 1:
        raise ParameterError("n must be >= 1")
    z = _proxy_difference(instance, i, i2, [n] * instance.k, trials, seed)
    check = _tail_check(z, t_grid, lambda t: math.exp(-n * t * t / 2.0), slack)
    check.extras["n"] = n
    return check


def bernstein_tail_bound(t: float, L: float, sigma2_T: float, Sigma2_T: float, V_T: float, min_nQ: int) -> float:
    denom = 16.0 * L**2 * (2.0 * sigma2_T + Sigma2_T + 6.0 * V_T) + 2.0 * math.sqrt(6.0) * t / min_nQ
    return 1.0 if t == 0 else math.exp(-t * t / denom)


def tail_check_bernstein(
    instance: Instance, a: str | int, a2: str | int, allocation: Sequence[int],
    t_grid: Sequence[float], trials: int, seed: int, method: str = "auto",
    slack: float = SLACK_SE,
) -> TailCheck:
    """Upper tail of the NUE proxy difference against the variance-aware bound.

    Both reward rows are L-Lipschitz with L the larger of their constants.
    """
    i, i2 = instance.action_index(a), instance.action_index(a2)
    if i == i2:
        raise ParameterError("need two distinct actions")
    alloc = check_allocation(instance, allocation)
    lip = lipschitz_constant(instance)
    L = max(lip.per_action[i], lip.per_action[i2])
    vq = variance_quantities(instance, alloc, method, substream(seed, 1 << 32))
    nmin = int(alloc.min())
    z = _proxy_difference(instance, i, i2, alloc, trials, seed)
    bound = lambda t: bernstein_tail_bound(t, L, vq.sigma2_T, vq.Sigma2_T, vq.V_T, nmin)  # noqa: E731
    check = _tail_check(z, t_grid, bound, slack)
    check.extras.update({"L": L, "variance": vq.to_dict()})
    if np.all(alloc == alloc[0]):
        n = int(alloc[0])
        mcd = [math.exp(-n * t * t / 2.0) for t in t_grid]
        check.extras["mcdiarmid_bound"] = mcd
        check.extras["tighter"] = [
            "bernstein" if b < c else "mcdiarmid" if c < b else "equal"
            for b, c in zip(check.bound, mcd)
        ]
    return check


@dataclass
class ExpectationMaxReport:
    estimate: McEstimate
    hoeffding_bound: float
    lipschitz_bound: float
    passed_hoeffding: bool
    passed_lipschitz: bool
    L: float
    sigma_T: float

    @property
    def all_pass(self) -> bool:
        return self.passed_hoeffding and self.passed_lipschitz

    def to_dict(self) -> dict[str, Any]:
        return {
            "estimate": self.estimate.to_dict(),
            "hoeffding_bound": self.hoeffding_bound,
            "lipschitz_bound": self.lipschitz_bound,
            "passed_hoeffding": self.passed_hoeffding,
            "passed_lipschitz": self.passed_lipschitz,
            "L": self.L,
            "sigma_T": self.sigma_T,
        }


def expectation_max_check(
    instance: Instance, a: str | int, allocation: Sequence[int], trials: int, seed: int,
    slack: float = SLACK_SE,
) -> ExpectationMaxReport:
    """Estimate E[max_Q |mu(a;Q) - mu_hat(a;Q)|] and compare with both bounds."""
    i = instance.action_index(a)
    alloc = check_allocation(instance, allocation)
    mu = instance.mean_table()[i]
    parts = []
    for stream, size in sharded(trials, seed):
        counts = sample_fixed(instance, alloc, stream, size)
        mean_hat = (counts @ instance.reward[i]) / alloc[None, :]
        parts.append(np.abs(mean_hat - mu[None, :]).max(axis=1))
    est = McEstimate.from_samples(np.concatenate(parts), seed)
    L = lipschitz_constant(instance).per_action[i]
    _, var = support_moments(instance)
    sigma_T = math.sqrt(float(np.max(var / alloc)))
    b1, b2 = empirical_max_bounds(instance.k, int(alloc.min()), L, sigma_T)
    lower = est.mean - slack * est.std_error
    return ExpectationMaxReport(est, b1, b2, lower <= b1, lower <= b2, L, sigma_T)


# --------------------------------------------------------------------------
# UCB-E event audit
# --------------------------------------------------------------------------


@dataclass
class RoundAudit:
    round: int
    action: str
    eps: float
    trials: int
    event_held: int
    premises_ok: int
    conclusions_ok: int
    violations: list[str]
    bound_event_failure: McEstimate
    union_bound: float
    ucbe_event_failure: float
    ucbe_union_bound: float
    pulls: int
    passed: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["bound_event_failure"] = self.bound_event_failure.to_dict()
        return d


def ucbe_event_audit(batch: LcbBatch, profile: GapProfile, slack: float = SLACK_SE) -> list[RoundAudit]:
    """Check the UCB-E optimality conclusions on trials where its event held.

    For each round, trials whose within-round deviation event held and whose
    premises on eps and T were met must have: the empirical argmin equal to
    the worst-case distribution, enough pulls of it, enough pulls of every
    other distribution, and pulls only inside the round's proxy set. The
    frequency with which the C-scaled event failed is compared against its
    union bound.
    """
    if not batch.instrumented:
        raise ParameterError("audit needs a batch simulated with instrument=True")
    k = profile.k
    out = []
    for r in batch.rounds:
        a = r.action
        qs = profile.q_star(a)
        dmin = float(profile.delta_a_min[a])
        d = profile.delta_aq[a]
        e = r.eps
        held = r.event_d
        eps_ok = e >= 25.0 / 36.0 * dmin**2 * (r.n_start[:, qs] - 1) - REL_TOL * max(1.0, e)
        t_ok = r.t_j >= r.t_real - REL_TOL * np.maximum(1.0, np.abs(r.t_real))
        premises = eps_ok & t_ok
        target = held & premises

        n_end = r.n_end
        qhat_ok = r.q_hat == qs
        star_bound = THRESH * e * dmin**-2 + 1.0
        star_ok = n_end[:, qs] > star_bound - REL_TOL * star_bound
        others = [q for q in range(k) if q != qs]
        lower = np.array([4.0 / 25.0 * e * d[q] ** -2 for q in others])
        pull_ok = np.all(n_end[:, others] >= lower[None, :] * (1 - REL_TOL), axis=1)
        width_ok = 0.2 * np.sqrt(e / n_end[:, qs]) <= dmin / 2.0 * (1 + REL_TOL)
        pulled = r.n_end > r.n_start
        contain_ok = ~np.any(pulled & ~r.in_u, axis=1)
        all_ok = qhat_ok & star_ok & pull_ok & width_ok & contain_ok

        violations = []
        for label, ok in (
            ("q_hat != worst-case distribution", qhat_ok),
            ("too few pulls of the worst-case distribution", star_ok),
            ("too few pulls of a suboptimal distribution", pull_ok),
            ("confidence width above half the minimal gap", width_ok),
            ("pulled a distribution outside the proxy set", contain_ok),
        ):
            bad = int(np.sum(target & ~ok))
            if bad:
                violations.append(f"{label}: {bad} trials")

        cap2 = min(float(profile.c[a]) ** 2, 1.0)
        fail = McEstimate.from_samples((~r.event_a).astype(float), 0) if batch.trials >= 2 else McEstimate(
            float(not r.event_a[0]), 0.0, 1, 0
        )
        union = 2.0 * k * r.u * math.exp(-2.0 * cap2 * e / 25.0)
        ucbe_union = 2.0 * k * r.u * math.exp(-2.0 * e / 25.0)
        passed = not violations and fail.mean <= union + slack * fail.std_error
        pulls = int(r.t_j.sum())
        notes = [] if pulls else ["no pulls in this round; audit is vacuous"]
        out.append(
            RoundAudit(
                round=r.index,
                action=profile.actions[a],
                eps=e,
                trials=batch.trials,
                event_held=int(held.sum()),
                premises_ok=int(premises.sum()),
                conclusions_ok=int(np.sum(target & all_ok)),
                violations=violations,
                bound_event_failure=fail,
                union_bound=union,
                ucbe_event_failure=float(np.mean(~held)),
                ucbe_union_bound=ucbe_union,
                pulls=pulls,
                passed=passed,
                notes=notes,
            )
        )
    return out
