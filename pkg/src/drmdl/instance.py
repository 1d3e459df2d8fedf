"""Finite problem instances and their exact gap profiles.

An :class:`Instance` fixes a finite decision set, a finite real support, a
finite collection of probability vectors over that support and a reward
table. Everything the algorithms are measured against (robust values, gaps,
complexity measures) is computed exactly from these tables.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

# Absolute threshold below which a gap counts as a tie.
GAP_TOL = 1e-12
PROB_TOL = 1e-12


class InvalidInstanceError(ValueError):
    """Raised when an operation needs a valid instance and gets an invalid one."""


class AssumptionError(ValueError):
    """Raised when unique optima are required but do not hold."""


@dataclass(frozen=True, eq=False)
class Instance:
    actions: tuple[str, ...]
    support: tuple[float, ...]
    distributions: tuple[str, ...]
    probs: np.ndarray  # (k, m)
    reward: np.ndarray  # (l, m)

    @classmethod
    def build(
        cls,
        actions: Sequence[str],
        support: Sequence[float],
        distributions: dict[str, Sequence[float]] | Sequence[tuple[str, Sequence[float]]],
        reward: Sequence[Sequence[float]],
    ) -> "Instance":
        items = list(distributions.items()) if isinstance(distributions, dict) else list(distributions)
        probs = np.array([list(p) for _, p in items], dtype=float)
        rew = np.array([list(row) for row in reward], dtype=float)
        probs.setflags(write=False)
        rew.setflags(write=False)
        return cls(
            actions=tuple(str(a) for a in actions),
            support=tuple(float(x) for x in support),
            distributions=tuple(str(name) for name, _ in items),
            probs=probs,
            reward=rew,
        )

    @property
    def l(self) -> int:
        return len(self.actions)

    @property
    def k(self) -> int:
        return len(self.distributions)

    @property
    def m(self) -> int:
        return len(self.support)

    def action_index(self, a: str | int) -> int:
        if isinstance(a, (int, np.integer)):
            if not 0 <= a < self.l:
                raise KeyError(f"action index {a} out of range")
            return int(a)
        try:
            return self.actions.index(a)
        except ValueError:
            raise KeyError(f"unknown action {a!r}") from None

    def dist_index(self, q: str | int) -> int:
        if isinstance(q, (int, np.integer)):
            if not 0 <= q < self.k:
                raise KeyError(f"distribution index {q} out of range")
            return int(q)
        try:
            return self.distributions.index(q)
        except ValueError:
            raise KeyError(f"unknown distribution {q!r}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "actions": list(self.actions),
            "support": list(self.support),
            "distributions": [
                {"name": name, "probs": [float(p) for p in row]}
                for name, row in zip(self.distributions, self.probs)
            ],
            "reward": [[float(v) for v in row] for row in self.reward],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Instance":
        try:
            dists = [(d["name"], d["probs"]) for d in data["distributions"]]
            return cls.build(data["actions"], data["support"], dists, data["reward"])
        except (KeyError, TypeError) as exc:
            raise InvalidInstanceError(f"malformed instance document: {exc}") from exc
        except ValueError as exc:
            # ragged rows
            raise InvalidInstanceError(f"malformed instance document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Instance":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Instance":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def mean_table(self) -> np.ndarray:
        """Exact expected rewards, shape (l, k)."""
        return self.reward @ self.probs.T

    def with_reward(self, reward: np.ndarray) -> "Instance":
        return Instance.build(self.actions, self.support, list(zip(self.distributions, self.probs)), reward)

    def with_distribution_order(self, order: Sequence[int]) -> "Instance":
        order = list(order)
        dists = [(self.distributions[i], self.probs[i]) for i in order]
        return Instance.build(self.actions, self.support, dists, self.reward)


def e1() -> Instance:
    """Two actions, two Bernoulli-type distributions on {0, 1}.

    Unique optimum a1, unique worst case Q1 for both actions, and
    distinct ratios C_a1 = 1/6, C_a2 = 1/8.
    """
    return Instance.build(
        actions=["a1", "a2"],
        support=[0.0, 1.0],
        distributions={"Q1": [0.6, 0.4], "Q2": [0.4, 0.6]},
        reward=[[0.2, 0.8], [0.1, 0.9]],
    )


def e2() -> Instance:
    """Three actions, three distributions on {0, 0.5, 1} with well separated gaps."""
    return Instance.build(
        actions=["a1", "a2", "a3"],
        support=[0.0, 0.5, 1.0],
        distributions={
            "Q1": [0.5, 0.3, 0.2],
            "Q2": [0.2, 0.3, 0.5],
            "Q3": [0.3, 0.4, 0.3],
        },
        reward=[
            [0.3, 0.5, 0.8],
            [0.1, 0.5, 0.9],
            [0.4, 0.45, 0.5],
        ],
    )


FIXTURES = {"E1": e1, "E2": e2}


def random_instance(rng: np.random.Generator, m: int, k: int, l: int) -> Instance:
    support = np.sort(rng.choice(np.arange(0, 11), size=m, replace=False)) / 10.0
    probs = rng.dirichlet(np.ones(m), size=k)
    probs = probs / probs.sum(axis=1, keepdims=True)
    reward = rng.uniform(0.0, 1.0, size=(l, m))
    return Instance.build(
        [f"a{i + 1}" for i in range(l)],
        support,
        [(f"Q{j + 1}", probs[j]) for j in range(k)],
        reward,
    )


def mean(instance: Instance, a: str | int, q: str | int) -> float:
    i = instance.action_index(a)
    j = instance.dist_index(q)
    return float(np.dot(instance.probs[j], instance.reward[i]))


@dataclass
class ValidationReport:
    valid: bool
    violations: list[str] = field(default_factory=list)
    assumption3: bool = False
    assumption3_issues: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "valid": self.valid,
            "violations": list(self.violations),
            "assumption3": self.assumption3,
            "assumption3_issues": list(self.assumption3_issues),
        }


def validate(instance: Instance) -> ValidationReport:
    """Check every structural invariant; never raises."""
    v: list[str] = []
    l, k, m = instance.l, instance.k, instance.m
    if l < 2:
        v.append(f"actions: need at least 2 actions (finite decision/uncertainty sets), got {l}")
    if k < 2:
        v.append(f"distributions: need at least 2 distributions (finite decision/uncertainty sets), got {k}")
    if m < 1:
        v.append("support: empty")
    if len(set(instance.actions)) != l:
        v.append("actions: duplicate action names")
    if len(set(instance.distributions)) != k:
        v.append("distributions: duplicate distribution names")
    sup = np.asarray(instance.support, dtype=float)
    if m > 1 and not np.all(np.diff(sup) > 0):
        v.append("support: points must be strictly increasing")
    if not np.all(np.isfinite(sup)):
        v.append("support: non-finite point")

    probs, rew = instance.probs, instance.reward
    if probs.ndim != 2 or probs.shape != (k, m):
        v.append(f"distributions: probability vectors must have length {m}")
    else:
        for name, row in zip(instance.distributions, probs):
            if np.any(row < 0) or not np.all(np.isfinite(row)):
                v.append(f"distributions[{name}].probs: negative or non-finite entry")
            total = math.fsum(row)
            if abs(total - 1.0) > PROB_TOL:
                v.append(f"distributions[{name}].probs: sums to {total!r}, not 1")
    if rew.ndim != 2 or rew.shape != (l, m):
        v.append(f"reward: table must have shape ({l}, {m})")
    else:
        if not np.all(np.isfinite(rew)) or np.any(rew < 0) or np.any(rew > 1):
            bad = [
                f"reward[{instance.actions[i]}][{j}]={rew[i, j]!r}"
                for i, j in zip(*np.nonzero(~((rew >= 0) & (rew <= 1))))
            ]
            v.append("reward: bounded rewards violated, entries outside [0, 1]: " + ", ".join(bad))

    report = ValidationReport(valid=not v, violations=v)
    if report.valid:
        prof = _profile_unchecked(instance)
        issues = []
        if not prof.unique_a_star:
            issues.append("optimal action is not unique")
        for i, ok in enumerate(prof.unique_worst_q):
            if not ok:
                issues.append(f"worst-case distribution of {instance.actions[i]} is not unique")
        report.assumption3 = not issues
        report.assumption3_issues = issues
    return report


def require_valid(instance: Instance) -> None:
    report = validate(instance)
    if not report.valid:
        raise InvalidInstanceError("; ".join(report.violations))


@dataclass(frozen=True, eq=False)
class GapProfile:
    """Oracle quantities of an instance.

    Arrays are indexed by action (rows) and distribution (columns) in the
    instance's order. Undefined minimal gaps (everything tied) are ``nan``.
    """

    actions: tuple[str, ...]
    distributions: tuple[str, ...]
    mean: np.ndarray  # (l, k)
    mu_dr: np.ndarray  # (l,)
    mu_dr_star: float
    a_star: tuple[int, ...]
    delta_dr: np.ndarray  # (l,)
    delta_dr_min: float
    worst_q: tuple[tuple[int, ...], ...]
    delta_aq: np.ndarray  # (l, k)
    delta_a_min: np.ndarray  # (l,)
    h: np.ndarray  # (l,)
    c: np.ndarray  # (l,)
    unique_a_star: bool
    unique_worst_q: np.ndarray  # (l,) bool

    @property
    def l(self) -> int:
        return len(self.actions)

    @property
    def k(self) -> int:
        return len(self.distributions)

    def q_star(self, a: int) -> int:
        """Worst-case distribution of action ``a`` (lowest index on ties)."""
        return self.worst_q[a][0]

    def require_unique(self) -> None:
        if not self.unique_a_star:
            raise AssumptionError("unique optima: optimal action is not unique")
        for i, ok in enumerate(self.unique_worst_q):
            if not ok:
                raise AssumptionError(
                    f"unique optima: worst-case distribution of {self.actions[i]} is not unique"
                )

    def to_dict(self) -> dict[str, Any]:
        def num(x: float) -> float | None:
            return None if not np.isfinite(x) else float(x)

        A, D = self.actions, self.distributions
        return {
            "mean": {A[i]: {D[j]: float(self.mean[i, j]) for j in range(self.k)} for i in range(self.l)},
            "mu_dr": {A[i]: float(self.mu_dr[i]) for i in range(self.l)},
            "mu_dr_star": float(self.mu_dr_star),
            "a_star": [A[i] for i in self.a_star],
            "delta_dr": {A[i]: float(self.delta_dr[i]) for i in range(self.l)},
            "delta_dr_min": num(self.delta_dr_min),
            "worst_q": {A[i]: [D[j] for j in self.worst_q[i]] for i in range(self.l)},
            "delta_aq": {
                A[i]: {D[j]: float(self.delta_aq[i, j]) for j in range(self.k)} for i in range(self.l)
            },
            "delta_a_min": {A[i]: num(self.delta_a_min[i]) for i in range(self.l)},
            "h": {A[i]: float(self.h[i]) for i in range(self.l)},
            "c": {A[i]: num(self.c[i]) for i in range(self.l)},
            "unique_a_star": bool(self.unique_a_star),
            "unique_worst_q": {A[i]: bool(self.unique_worst_q[i]) for i in range(self.l)},
        }


def _positive_min(values: np.ndarray) -> float:
    pos = values[values > GAP_TOL]
    return float(pos.min()) if pos.size else math.nan


def _profile_unchecked(instance: Instance) -> GapProfile:
    mu = instance.mean_table()
    l, k = mu.shape
    mu_dr = mu.min(axis=1)
    mu_dr_star = float(mu_dr.max())
    delta_dr = mu_dr_star - mu_dr
    a_star = tuple(int(i) for i in np.flatnonzero(delta_dr <= GAP_TOL))
    delta_aq = mu - mu_dr[:, None]
    worst_q = tuple(tuple(int(j) for j in np.flatnonzero(row <= GAP_TOL)) for row in delta_aq)
    delta_a_min = np.array([_positive_min(row) for row in delta_aq])
    h = np.array([float(np.sum(row[row > GAP_TOL] ** -2.0)) for row in delta_aq])
    delta_dr_min = _positive_min(delta_dr)
    c = np.where(
        np.isin(np.arange(l), a_star),
        delta_dr_min / delta_a_min,
        delta_dr / delta_a_min,
    )
    for arr in (mu, mu_dr, delta_dr, delta_aq, delta_a_min, h, c):
        arr.setflags(write=False)
    return GapProfile(
        actions=instance.actions,
        distributions=instance.distributions,
        mean=mu,
        mu_dr=mu_dr,
        mu_dr_star=mu_dr_star,
        a_star=a_star,
        delta_dr=delta_dr,
        delta_dr_min=delta_dr_min,
        worst_q=worst_q,
        delta_aq=delta_aq,
        delta_a_min=delta_a_min,
        h=h,
        c=c,
        unique_a_star=len(a_star) == 1,
        unique_worst_q=np.array([len(w) == 1 for w in worst_q]),
    )


def gap_profile(instance: Instance) -> GapProfile:
    require_valid(instance)
    return _profile_unchecked(instance)


@dataclass(frozen=True)
class Lipschitz:
    per_action: tuple[float, ...]
    overall: float
    degenerate: bool  # single support point; constants are 0 by convention


def lipschitz_constant(instance: Instance) -> Lipschitz:
    """Largest pairwise slope of each reward row over the support."""
    x = np.asarray(instance.support, dtype=float)
    if x.size < 2:
        zeros = tuple(0.0 for _ in range(instance.l))
        return Lipschitz(zeros, 0.0, True)
    i, j = np.triu_indices(x.size, k=1)
    dx = x[j] - x[i]
    slopes = np.abs(instance.reward[:, j] - instance.reward[:, i]) / dx
    per = tuple(float(s) for s in slopes.max(axis=1))
    return Lipschitz(per, max(per), False)
