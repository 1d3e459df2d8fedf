"""Uniform / non-uniform exploration and the LCB-DR procedure.

All samplers keep per-distribution histograms over support indices. The
histogram is a sufficient statistic: the empirical mean of every action on
every distribution is recovered from it, which is what lets LCB-DR reuse
samples across rounds.

Every routine is written over a batch of independent trials (leading axis
``B``) so Monte Carlo runs vectorise; the single-run entry points are the
``B = 1`` case of the same code.

Ties are broken towards the lowest index everywhere; values within
``GAP_TOL`` of the extremum count as tied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np

from .instance import GAP_TOL, AssumptionError, GapProfile, Instance
from .sampling import Stream, cdf_of, inverse_cdf

# Relative slack for comparisons against quantities that are integers in
# exact arithmetic (thresholds and budgets built from float gaps).
REL_TOL = 1e-9
THRESH = 36.0 / 25.0


class ParameterError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def argmax_first(values: np.ndarray, axis: int = -1, tol: float = GAP_TOL) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    best = values.max(axis=axis, keepdims=True)
    return np.argmax(values >= best - tol, axis=axis)


def argmin_first(values: np.ndarray, axis: int = -1, tol: float = GAP_TOL) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    best = values.min(axis=axis, keepdims=True)
    return np.argmax(values <= best + tol, axis=axis)


def _ceil_int(x: np.ndarray) -> np.ndarray:
    """Ceiling that ignores roundoff above an exact integer."""
    x = np.asarray(x, dtype=float)
    return np.ceil(x - REL_TOL * np.maximum(1.0, np.abs(x))).astype(np.int64)


def _hist_means(counts: np.ndarray, reward: np.ndarray) -> np.ndarray:
    """(B, k, m) histograms -> (B, l, k) empirical means."""
    n = counts.sum(axis=2)
    sums = np.einsum("bkm,lm->blk", counts, reward)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / n[:, None, :]


@dataclass
class RunState:
    """Histogram state of one run.

    ``sums`` holds reward totals per (action, distribution) maintained
    online; it must always agree with what the histogram implies.
    """

    counts: np.ndarray  # (k, m) int
    sums: np.ndarray  # (l, k) float
    t: int = 0

    @classmethod
    def empty(cls, instance: Instance) -> "RunState":
        return cls(
            counts=np.zeros((instance.k, instance.m), dtype=np.int64),
            sums=np.zeros((instance.l, instance.k)),
        )

    @property
    def pulls(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def means(self, instance: Instance) -> np.ndarray:
        return _hist_means(self.counts[None], instance.reward)[0]

    def online_means(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.sums / self.pulls[None, :]

    def add(self, instance: Instance, q: int, x: int) -> None:
        self.counts[q, x] += 1
        self.sums[:, q] += instance.reward[:, x]
        self.t += 1

    def copy(self) -> "RunState":
        return RunState(self.counts.copy(), self.sums.copy(), self.t)


@dataclass
class RunResult:
    algorithm: str
    actions: tuple[str, ...]
    distributions: tuple[str, ...]
    chosen_index: int
    proxy: tuple[float, ...]
    counts: tuple[int, ...]
    histograms: tuple[tuple[int, ...], ...]
    total_samples: int
    regret: float | None = None
    rounds: list[dict[str, Any]] | None = None

    @property
    def chosen(self) -> str:
        return self.actions[self.chosen_index]

    def with_regret(self, profile: GapProfile) -> "RunResult":
        return replace(self, regret=float(profile.delta_dr[self.chosen_index]))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "algorithm": self.algorithm,
            "chosen": self.chosen,
            "proxy": {a: v for a, v in zip(self.actions, self.proxy)},
            "counts": {q: n for q, n in zip(self.distributions, self.counts)},
            "histograms": {q: list(h) for q, h in zip(self.distributions, self.histograms)},
            "total_samples": self.total_samples,
            "regret": self.regret,
        }
        if self.rounds is not None:
            out["rounds"] = self.rounds
        return out


def _result_from_counts(
    algorithm: str, instance: Instance, counts: np.ndarray, proxy: np.ndarray, chosen: int
) -> RunResult:
    pulls = counts.sum(axis=1)
    return RunResult(
        algorithm=algorithm,
        actions=instance.actions,
        distributions=instance.distributions,
        chosen_index=int(chosen),
        proxy=tuple(float(v) for v in proxy),
        counts=tuple(int(n) for n in pulls),
        histograms=tuple(tuple(int(c) for c in row) for row in counts),
        total_samples=int(pulls.sum()),
    )


# --------------------------------------------------------------------------
# Non-adaptive exploration
# --------------------------------------------------------------------------


def check_allocation(instance: Instance, allocation: Sequence[int]) -> np.ndarray:
    alloc = np.asarray(list(allocation))
    if alloc.shape != (instance.k,):
        raise ParameterError(f"allocation needs {instance.k} entries, got {alloc.size}")
    if not np.all(alloc == np.floor(alloc)):
        raise ParameterError("allocation entries must be integers")
    alloc = alloc.astype(np.int64)
    if np.any(alloc < 1):
        raise ParameterError("every distribution needs at least one sample (n_Q >= 1)")
    return alloc


def sample_fixed(instance: Instance, allocation: np.ndarray, stream: Stream, trials: int) -> np.ndarray:
    """Histograms (trials, k, m) from drawing ``allocation[q]`` samples of each q."""
    k, m = instance.k, instance.m
    cdf = cdf_of(instance.probs)
    counts = np.zeros((trials, k, m), dtype=np.int64)
    offsets = (np.arange(trials) * m)[:, None]
    for q in range(k):
        idx = inverse_cdf(cdf[q], stream.uniform((trials, int(allocation[q]))))
        counts[:, q, :] = np.bincount((idx + offsets).ravel(), minlength=trials * m).reshape(trials, m)
    return counts


def proxy_from_counts(instance: Instance, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min-over-distributions proxy (B, l) and its first argmax (B,)."""
    proxy = _hist_means(counts, instance.reward).min(axis=2)
    return proxy, argmax_first(proxy, axis=1)


def simulate_nue(
    instance: Instance, allocation: Sequence[int], stream: Stream, trials: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    alloc = check_allocation(instance, allocation)
    counts = sample_fixed(instance, alloc, stream, trials)
    proxy, chosen = proxy_from_counts(instance, counts)
    return chosen, proxy, counts


def simulate_ue(instance: Instance, n: int, stream: Stream, trials: int):
    if int(n) != n or n < 1:
        raise ParameterError(f"UE needs n >= 1 samples per distribution, got {n}")
    return simulate_nue(instance, [int(n)] * instance.k, stream, trials)


def run_nue(instance: Instance, allocation: Sequence[int], stream: Stream) -> RunResult:
    chosen, proxy, counts = simulate_nue(instance, allocation, stream, 1)
    return _result_from_counts("nue", instance, counts[0], proxy[0], chosen[0])


def run_ue(instance: Instance, n: int, stream: Stream) -> RunResult:
    if int(n) != n or n < 1:
        raise ParameterError(f"UE needs n >= 1 samples per distribution, got {n}")
    return replace(run_nue(instance, [int(n)] * instance.k, stream), algorithm="ue")


# --------------------------------------------------------------------------
# Modified UCB-E (minimisation)
# --------------------------------------------------------------------------


def lcb_index(state: RunState, instance: Instance, a: int, q: int, eps: float) -> float:
    n = int(state.pulls[q])
    if n < 1:
        raise StateError(f"distribution {instance.distributions[q]} has no samples")
    mu_hat = float(state.counts[q] @ instance.reward[a]) / n
    return mu_hat - math.sqrt(eps / n)


@dataclass
class _Tracker:
    """Running maxima of sqrt(t)*|mu - mu_hat_t| over observed sample counts."""

    mu: np.ndarray  # (l, k) true means
    glob: np.ndarray  # (B, l, k) over every t >= 1
    rnd: np.ndarray | None = None  # (B, k) current action, t >= round start

    @classmethod
    def start(cls, instance: Instance, counts: np.ndarray) -> "_Tracker":
        mu = instance.mean_table()
        n = counts.sum(axis=2)
        dev = np.sqrt(n)[:, None, :] * np.abs(mu[None] - _hist_means(counts, instance.reward))
        return cls(mu=mu, glob=dev)

    def begin_round(self, counts: np.ndarray, a: int, reward: np.ndarray) -> None:
        n = counts.sum(axis=2)
        mean_a = (counts @ reward[a]) / n
        self.rnd = np.sqrt(n) * np.abs(self.mu[a][None, :] - mean_a)


def _ucbe_kernel(
    instance: Instance,
    counts: np.ndarray,
    a: int,
    eps: float,
    budgets: np.ndarray,
    stream: Stream,
    sums: np.ndarray | None = None,
    tracker: _Tracker | None = None,
) -> None:
    """Run the LCB-argmin sampling rule in place for ``budgets[b]`` steps per trial.

    Trials are processed in lockstep; a trial stops drawing once its own
    budget is spent. Every active trial consumes one uniform per step.
    """
    budgets = np.asarray(budgets, dtype=np.int64)
    if budgets.size == 0 or budgets.max() <= 0:
        return
    reward = instance.reward
    r_a = reward[a]
    cdf = cdf_of(instance.probs)
    order = np.argsort(-budgets, kind="stable")
    sorted_budgets = budgets[order]
    n = counts.sum(axis=2)[order].astype(float)
    s = (counts[order] @ r_a).astype(float)
    steps_left = -sorted_budgets  # ascending for searchsorted
    if tracker is not None and sums is None:
        raise ValueError("deviation tracking needs online sums")
    for step in range(int(sorted_budgets[0])):
        na = int(np.searchsorted(steps_left, -step, side="left"))
        nv, sv = n[:na], s[:na]
        lcb = sv / nv - np.sqrt(eps / nv)
        q = argmin_first(lcb, axis=1)
        x = inverse_cdf_rows(cdf[q], stream.uniform(na))
        rows = np.arange(na)
        trial = order[:na]
        nv[rows, q] += 1.0
        sv[rows, q] += r_a[x]
        counts[trial, q, x] += 1
        if sums is not None:
            sums[trial, :, q] += reward[:, x].T
        if tracker is not None:
            t = nv[rows, q]
            dev_all = np.sqrt(t)[:, None] * np.abs(tracker.mu[:, q].T - sums[trial, :, q] / t[:, None])
            tracker.glob[trial, :, q] = np.maximum(tracker.glob[trial, :, q], dev_all)
            tracker.rnd[trial, q] = np.maximum(tracker.rnd[trial, q], dev_all[:, a])


def inverse_cdf_rows(cdfs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse CDF: ``cdfs`` is (B, m), ``u`` is (B,)."""
    return (u[:, None] >= cdfs).sum(axis=1)


def run_ucbe_min(
    state: RunState, instance: Instance, a: int | str, eps: float, budget: int, stream: Stream
) -> tuple[RunState, int]:
    """Pull ``argmin_Q LCB`` for ``budget`` steps, then report the empirical argmin."""
    a = instance.action_index(a)
    if np.any(state.pulls < 1):
        raise StateError("every distribution needs at least one sample before UCB-E")
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if budget < 0:
        raise ParameterError("budget must be nonnegative")
    new = state.copy()
    counts = new.counts[None].copy()
    sums = new.sums[None].copy()
    _ucbe_kernel(instance, counts, a, eps, np.array([budget]), stream, sums=sums)
    new.counts, new.sums = counts[0], sums[0]
    new.t += int(budget)
    q_hat = int(argmin_first(new.counts @ instance.reward[a] / new.pulls))
    return new, q_hat


# --------------------------------------------------------------------------
# LCB-DR
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EpsSchedule:
    permutation: tuple[int, ...]
    eps: tuple[float, ...]
    lower: tuple[float, ...]  # lower bound each eps had to clear
    u: tuple[float, ...]  # u_0 .. u_l

    def to_dict(self) -> dict[str, Any]:
        return {"permutation": list(self.permutation), "eps": list(self.eps),
                "lower": list(self.lower), "u": list(self.u)}


def resolve_permutation(profile: GapProfile, permutation: Sequence[str | int] | None) -> tuple[int, ...]:
    if permutation is None:
        return tuple(range(profile.l))
    idx = []
    for a in permutation:
        if isinstance(a, (int, np.integer)):
            idx.append(int(a))
        elif a in profile.actions:
            idx.append(profile.actions.index(a))
        else:
            raise ParameterError(f"unknown action {a!r} in permutation")
    if sorted(idx) != list(range(profile.l)):
        raise ParameterError(f"permutation must list every action exactly once, got {list(permutation)}")
    return tuple(idx)


def _need_gaps(profile: GapProfile) -> None:
    profile.require_unique()
    if np.any(~np.isfinite(profile.delta_a_min)):
        raise AssumptionError("minimal distribution gap undefined (all distributions tied)")
    if not np.isfinite(profile.delta_dr_min):
        raise AssumptionError("minimal robust gap undefined (all actions optimal)")


def eps_schedule(
    profile: GapProfile,
    permutation: Sequence[str | int] | None = None,
    eps: Sequence[float | None] | None = None,
    scale: float = 1.0,
) -> EpsSchedule:
    """Index parameters and the u_j sequence.

    With ``eps=None`` every entry sits at its lower bound, multiplied by
    ``scale``. Explicit entries are checked against the lower bound implied
    by the entries before them; ``None`` entries take that lower bound.
    """
    _need_gaps(profile)
    perm = resolve_permutation(profile, permutation)
    k = profile.k
    dmin = profile.delta_a_min
    burden = profile.h + dmin ** -2.0  # H_a + Delta_{a,min}^{-2}

    def chain(values: Sequence[float | None]) -> tuple[list[float], list[float], list[float]]:
        u, out, low = [float(k)], [], []
        for j, a in enumerate(perm, start=1):
            lb = 25.0 / 36.0 * dmin[a] ** 2 * (u[-1] - 1.0)
            e = values[j - 1]
            e = lb if e is None else float(e)
            if e < lb - REL_TOL * max(1.0, lb):
                raise ParameterError(
                    f"round {j} ({profile.actions[a]}): eps={e!r} is below its lower bound {float(lb)!r}"
                )
            out.append(e)
            low.append(float(lb))
            u.append(float(k * (j + 1) + THRESH * sum(out[r] * burden[perm[r]] for r in range(j))))
        return out, low, u

    if scale <= 0:
        raise ParameterError("scale must be positive")
    if eps is None:
        base, _, _ = chain([None] * len(perm))
        values: list[float | None] = [scale * e for e in base]
    else:
        if len(eps) != len(perm):
            raise ParameterError(f"need {len(perm)} eps values, got {len(eps)}")
        values = [None if e is None else scale * float(e) for e in eps]
    out, low, u = chain(values)
    return EpsSchedule(perm, tuple(out), tuple(low), tuple(u))


@dataclass
class RoundBudget:
    in_u: np.ndarray  # (..., k) bool
    k_j: np.ndarray
    t_tilde: np.ndarray
    h_j: np.ndarray
    t_real: np.ndarray  # before ceiling and clamping
    t_j: np.ndarray


def _budget_arrays(profile: GapProfile, pulls: np.ndarray, a: int, eps: float) -> RoundBudget:
    pulls = np.asarray(pulls)
    qs = profile.q_star(a)
    d = profile.delta_aq[a]
    positive = d > GAP_TOL
    inv = np.where(positive, np.where(positive, d, 1.0) ** -2.0, 0.0)
    thr = THRESH * eps * inv
    in_u = pulls < thr - REL_TOL * np.maximum(1.0, thr)
    in_u[..., qs] = True
    others = in_u.copy()
    others[..., qs] = False
    k_j = in_u.sum(axis=-1)
    t_tilde = (pulls * in_u).sum(axis=-1)
    h_j = (others * inv).sum(axis=-1)
    t_real = THRESH * eps * (h_j + profile.delta_a_min[a] ** -2.0) - t_tilde + k_j
    t_j = np.maximum(0, _ceil_int(t_real))
    return RoundBudget(in_u, k_j, t_tilde, h_j, t_real, t_j)


def round_budget(
    profile: GapProfile, pulls: Sequence[int], a: int | str, eps: float
) -> dict[str, Any]:
    """Proxy set U_j, k_j, T~_j, H_j and the allocated T_j for one round."""
    _need_gaps(profile)
    a = a if isinstance(a, (int, np.integer)) else profile.actions.index(a)
    rb = _budget_arrays(profile, np.asarray(pulls, dtype=np.int64), int(a), float(eps))
    return {
        "U": tuple(int(q) for q in np.flatnonzero(rb.in_u)),
        "k": int(rb.k_j),
        "T_tilde": int(rb.t_tilde),
        "H": float(rb.h_j),
        "T_real": float(rb.t_real),
        "T": int(rb.t_j),
    }


@dataclass
class RoundArrays:
    """Per-round artifacts for every trial in a batch."""

    index: int  # 1-based round number
    action: int
    eps: float
    u: float
    in_u: np.ndarray
    k_j: np.ndarray
    t_tilde: np.ndarray
    h_j: np.ndarray
    t_real: np.ndarray
    t_j: np.ndarray
    oracle_t: np.ndarray  # T_j the construction asks for (equals t_j outside manual mode)
    n_start: np.ndarray  # (B, k)
    n_end: np.ndarray
    q_hat: np.ndarray
    proxy: np.ndarray
    event_d: np.ndarray | None = None  # deviation event of the UCB-E analysis
    event_a: np.ndarray | None = None  # C-scaled event used for the error bound

    def record(self, b: int, profile: GapProfile) -> dict[str, Any]:
        D = profile.distributions
        rec = {
            "round": self.index,
            "action": profile.actions[self.action],
            "eps": self.eps,
            "u": self.u,
            "U": [D[q] for q in np.flatnonzero(self.in_u[b])],
            "k": int(self.k_j[b]),
            "T_tilde": int(self.t_tilde[b]),
            "H": float(self.h_j[b]),
            "T_real": float(self.t_real[b]),
            "T": int(self.t_j[b]),
            "q_hat": D[int(self.q_hat[b])],
            "proxy": float(self.proxy[b]),
            "n_start": [int(v) for v in self.n_start[b]],
            "n_end": [int(v) for v in self.n_end[b]],
        }
        if self.event_d is not None:
            rec["event_ucbe"] = bool(self.event_d[b])
            rec["event_bound"] = bool(self.event_a[b])
        return rec


@dataclass
class LcbBatch:
    schedule: EpsSchedule
    chosen: np.ndarray  # (B,)
    proxy: np.ndarray  # (B, l)
    counts: np.ndarray  # (B, k, m)
    rounds: list[RoundArrays]
    manual: bool = False
    instrumented: bool = False

    @property
    def total(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    @property
    def trials(self) -> int:
        return int(self.chosen.shape[0])


def simulate_lcb_dr(
    instance: Instance,
    profile: GapProfile,
    permutation: Sequence[str | int] | None,
    eps: Sequence[float | None] | str | None,
    stream: Stream,
    trials: int,
    *,
    scale: float = 1.0,
    budgets: Sequence[int] | None = None,
    instrument: bool = False,
) -> LcbBatch:
    """Run LCB-DR on ``trials`` independent copies in lockstep.

    ``eps="auto"`` (or ``None``) places every index parameter at its lower
    bound times ``scale``. ``budgets`` switches to manual mode: the given
    T_j are used verbatim and the oracle budgets are only recorded.
    """
    sched = eps_schedule(profile, permutation, None if eps in (None, "auto") else eps, scale)
    perm = sched.permutation
    if budgets is not None:
        budgets = [int(b) for b in budgets]
        if len(budgets) != len(perm) or any(b < 0 for b in budgets):
            raise ParameterError(f"manual mode needs {len(perm)} nonnegative budgets")
    k, m = instance.k, instance.m
    cdf = cdf_of(instance.probs)

    counts = np.zeros((trials, k, m), dtype=np.int64)
    u0 = stream.uniform((trials, k))
    for q in range(k):
        counts[np.arange(trials), q, inverse_cdf(cdf[q], u0[:, q])] += 1

    tracker = _Tracker.start(instance, counts) if instrument else None
    sums = np.einsum("bkm,lm->blk", counts, instance.reward) if instrument else None
    c_cap = np.minimum(profile.c, 1.0)

    rounds: list[RoundArrays] = []
    proxy = np.empty((trials, instance.l))
    for j, a in enumerate(perm, start=1):
        e = sched.eps[j - 1]
        n_start = counts.sum(axis=2)
        rb = _budget_arrays(profile, n_start, a, e)
        t_run = rb.t_j if budgets is None else np.full(trials, budgets[j - 1], dtype=np.int64)
        if tracker is not None:
            tracker.begin_round(counts, a, instance.reward)
        _ucbe_kernel(instance, counts, a, e, t_run, stream, sums=sums, tracker=tracker)
        n_end = counts.sum(axis=2)
        means_a = (counts @ instance.reward[a]) / n_end
        q_hat = argmin_first(means_a, axis=1)
        proxy[:, a] = means_a[np.arange(trials), q_hat]
        ra = RoundArrays(
            index=j, action=a, eps=e, u=sched.u[j],
            in_u=rb.in_u, k_j=rb.k_j, t_tilde=rb.t_tilde, h_j=rb.h_j,
            t_real=rb.t_real, t_j=t_run, oracle_t=rb.t_j,
            n_start=n_start, n_end=n_end, q_hat=q_hat, proxy=proxy[:, a].copy(),
        )
        if tracker is not None:
            ra.event_d = np.all(tracker.rnd < 0.2 * math.sqrt(e), axis=1)
            ra.event_a = np.all(tracker.glob[:, a, :] < c_cap[a] / 5.0 * math.sqrt(e), axis=1)
        rounds.append(ra)
    chosen = argmax_first(proxy, axis=1)
    return LcbBatch(sched, chosen, proxy, counts, rounds, manual=budgets is not None, instrumented=instrument)


def run_lcb_dr(
    instance: Instance,
    profile: GapProfile,
    permutation: Sequence[str | int] | None,
    eps: Sequence[float | None] | str | None,
    stream: Stream,
    *,
    scale: float = 1.0,
    budgets: Sequence[int] | None = None,
    instrument: bool = False,
) -> RunResult:
    batch = simulate_lcb_dr(
        instance, profile, permutation, eps, stream, 1,
        scale=scale, budgets=budgets, instrument=instrument,
    )
    res = _result_from_counts("lcb-dr", instance, batch.counts[0], batch.proxy[0], batch.chosen[0])
    res.rounds = [r.record(0, profile) for r in batch.rounds]
    return res.with_regret(profile)
