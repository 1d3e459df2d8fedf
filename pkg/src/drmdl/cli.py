"""Command-line front end.

Subcommands ``analyze``, ``run``, ``mc``, ``bounds`` and ``verify`` read an
instance (a JSON file or a built-in fixture name such as ``E1``) and write a
JSON report, or CSV where noted. Exit codes: 0 success, 1 a verification
check failed, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .algorithms import eps_schedule, run_lcb_dr, run_nue, run_ue, simulate_lcb_dr
from .bounds import (
    _plain,
    empirical_max_bounds,
    lcb_dr_error_bound,
    nue_bound_for,
    ue_distribution_free_bound,
    ue_regret_bound,
    variance_quantities,
)
from .instance import FIXTURES, Instance, gap_profile, lipschitz_constant, validate
from .sampling import substream
from .verify import (
    AlgorithmSpec,
    exact_ue_distribution,
    expectation_max_check,
    mc_regret,
    tail_check_bernstein,
    tail_check_mcdiarmid,
    ucbe_event_audit,
)

SCHEMA_VERSION = 1
MC_HEADER = [
    "algorithm", "n", "T", "regret_mean", "regret_se", "errprob_mean",
    "errprob_se", "bound_value", "bound_applicable", "seed",
]
SLACK_MIN_TRIALS = 1000
ALL_BOUNDS = ("ue", "ue-free", "nue", "lcb-dr", "emp-max")


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    command: str = "analyze"
    instance: str = "E1"
    algorithm: str = "ue"
    n: int | None = None
    allocation: list[int] | None = None
    permutation: list[str] | None = None
    eps: list[float] | None = None
    scale: float = 1.0
    budgets: list[int] | None = None
    n_grid: list[int] | None = None
    allocations: list[list[int]] | None = None
    scales: list[float] | None = None
    bounds: list[str] | None = None
    T: int | None = None
    trials: int = 10_000
    t_grid: list[float] | None = None
    method: str = "auto"
    seed: int = 0
    out: str | None = None
    format: str = "json"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def load_instance(ref: str) -> Instance:
    if ref in FIXTURES:
        return FIXTURES[ref]()
    path = Path(ref)
    if not path.exists():
        raise UsageError(f"no instance file or fixture named {ref!r}")
    try:
        return Instance.from_json(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {ref}: {exc}") from exc


def _validated(cfg: ExperimentConfig) -> Instance:
    inst = load_instance(cfg.instance)
    report = validate(inst)
    if not report.valid:
        raise UsageError("invalid instance: " + "; ".join(report.violations))
    return inst


def _envelope(command: str, cfg: ExperimentConfig, body: dict[str, Any]) -> dict[str, Any]:
    return {"schema_version": SCHEMA_VERSION, "command": command, "seed": cfg.seed,
            "version": __version__, **body}


def _flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(obj, dict):
        rows = []
        for k, v in obj.items():
            rows += _flatten(v, f"{prefix}.{k}" if prefix else str(k))
        return rows
    if isinstance(obj, list):
        rows = []
        for i, v in enumerate(obj):
            rows += _flatten(v, f"{prefix}[{i}]")
        return rows
    return [(prefix, obj)]


def render(report: dict[str, Any], fmt: str) -> str:
    report = _plain(report)
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in _flatten(report):
        w.writerow([k, v])
    return buf.getvalue()


def _emit(text: str, cfg: ExperimentConfig) -> None:
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _check_trials(cfg: ExperimentConfig) -> None:
    if cfg.trials < 2:
        raise UsageError("--trials must be at least 2")
    if cfg.trials < SLACK_MIN_TRIALS:
        _warn(f"{cfg.trials} trials: the 3-standard-error slack rule is unreliable below {SLACK_MIN_TRIALS} trials")


def _spec(cfg: ExperimentConfig, inst: Instance) -> AlgorithmSpec:
    alg = cfg.algorithm
    if alg == "ue":
        if cfg.n is None:
            raise UsageError("ue needs --n")
        return AlgorithmSpec("ue", n=cfg.n)
    if alg == "nue":
        if cfg.allocation is None:
            raise UsageError("nue needs --allocation")
        return AlgorithmSpec("nue", allocation=tuple(cfg.allocation))
    if alg == "lcb-dr":
        return AlgorithmSpec(
            "lcb-dr",
            permutation=tuple(cfg.permutation) if cfg.permutation else None,
            eps=tuple(cfg.eps) if cfg.eps else None,
            scale=cfg.scale,
            budgets=tuple(cfg.budgets) if cfg.budgets else None,
        )
    raise UsageError(f"unknown algorithm {alg!r}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_analyze(cfg: ExperimentConfig) -> tuple[dict[str, Any], int]:
    inst = load_instance(cfg.instance)
    report = validate(inst)
    if not report.valid:
        raise UsageError("invalid instance: " + "; ".join(report.violations))
    profile = gap_profile(inst)
    lip = lipschitz_constant(inst)
    body = {
        "instance": inst.to_dict(),
        "validation": report.to_dict(),
        **profile.to_dict(),
        "lipschitz": {"per_action": dict(zip(inst.actions, lip.per_action)),
                      "overall": lip.overall, "degenerate": lip.degenerate},
    }
    return _envelope("analyze", cfg, body), 0


def cmd_run(cfg: ExperimentConfig) -> tuple[dict[str, Any], int]:
    inst = _validated(cfg)
    profile = gap_profile(inst)
    stream = substream(cfg.seed, 0)
    spec = _spec(cfg, inst)
    if spec.name == "ue":
        res = run_ue(inst, spec.n, stream).with_regret(profile)
    elif spec.name == "nue":
        res = run_nue(inst, spec.allocation, stream).with_regret(profile)
    else:
        res = run_lcb_dr(
            inst, profile, spec.permutation, spec.eps or "auto", stream,
            scale=spec.scale, budgets=spec.budgets,
        )
    return _envelope("run", cfg, {"result": res.to_dict()}), 0


def _mc_points(cfg: ExperimentConfig, inst: Instance) -> list[AlgorithmSpec]:
    alg = cfg.algorithm
    if alg == "ue":
        grid = cfg.n_grid or ([cfg.n] if cfg.n else None)
        if not grid:
            raise UsageError("ue sweep needs --n-grid or --n")
        return [AlgorithmSpec("ue", n=int(n)) for n in grid]
    if alg == "nue":
        allocs = cfg.allocations or ([cfg.allocation] if cfg.allocation else None)
        if not allocs:
            raise UsageError("nue sweep needs --allocations or --allocation")
        return [AlgorithmSpec("nue", allocation=tuple(a)) for a in allocs]
    if alg == "lcb-dr":
        base = _spec(cfg, inst)
        return [
            AlgorithmSpec("lcb-dr", permutation=base.permutation, eps=base.eps, scale=float(s),
                          budgets=base.budgets)
            for s in (cfg.scales or [cfg.scale])
        ]
    raise UsageError(f"unknown algorithm {alg!r}")


def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else ""


def cmd_mc(cfg: ExperimentConfig) -> tuple[str, int]:
    """One CSV row per sweep point.

    ``n`` is the per-distribution count for UE, the smallest count for NUE
    and empty for LCB-DR; ``T`` is the (mean) total number of samples.
    ``bound_value`` is the regret bound for UE/NUE and the error-probability
    bound for LCB-DR.
    """
    inst = _validated(cfg)
    _check_trials(cfg)
    profile = gap_profile(inst)
    lip = lipschitz_constant(inst)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MC_HEADER)
    for i, spec in enumerate(_mc_points(cfg, inst)):
        est = mc_regret(inst, profile, spec, cfg.trials, cfg.seed)
        if spec.name == "ue":
            n_col: Any = spec.n
            bound = ue_regret_bound(profile, inst.k, spec.n)
        elif spec.name == "nue":
            n_col = min(spec.allocation)
            bound, _ = nue_bound_for(inst, profile, spec.allocation, lip.overall, cfg.method,
                                     substream(cfg.seed, (1 << 40) + i))
        else:
            n_col = ""
            sched = eps_schedule(profile, spec.permutation, spec.eps, spec.scale)
            bound = lcb_dr_error_bound(profile, spec.permutation, sched)
        w.writerow([
            spec.name, n_col, _fmt(est.mean_samples) if spec.name == "lcb-dr" else int(est.mean_samples),
            _fmt(est.regret.mean), _fmt(est.regret.std_error),
            _fmt(est.error_prob.mean), _fmt(est.error_prob.std_error),
            _fmt(bound.value), str(bound.applicable).lower(), cfg.seed,
        ])
    return buf.getvalue(), 0


def cmd_bounds(cfg: ExperimentConfig) -> tuple[dict[str, Any], int]:
    inst = _validated(cfg)
    profile = gap_profile(inst)
    lip = lipschitz_constant(inst)
    which = cfg.bounds or list(ALL_BOUNDS)
    unknown = set(which) - set(ALL_BOUNDS)
    if unknown:
        raise UsageError(f"unknown bounds {sorted(unknown)}; choose from {list(ALL_BOUNDS)}")
    out: dict[str, Any] = {}
    for name in which:
        if name == "ue":
            if cfg.n is None:
                raise UsageError("the ue bound needs --n")
            out[name] = ue_regret_bound(profile, inst.k, cfg.n).to_dict()
        elif name == "ue-free":
            T = cfg.T if cfg.T is not None else (cfg.n * inst.k if cfg.n else None)
            if T is None:
                raise UsageError("the ue-free bound needs --T or --n")
            out[name] = ue_distribution_free_bound(inst.k, inst.l, T, profile).to_dict()
        elif name == "nue":
            alloc = cfg.allocation or ([cfg.n] * inst.k if cfg.n else None)
            if alloc is None:
                raise UsageError("the nue bound needs --allocation or --n")
            rep, vq = nue_bound_for(inst, profile, alloc, lip.overall, cfg.method, substream(cfg.seed, 0))
            out[name] = {**rep.to_dict(), "variance": vq.to_dict()}
        elif name == "lcb-dr":
            spec = _spec(_with(cfg, algorithm="lcb-dr"), inst)
            sched = eps_schedule(profile, spec.permutation, spec.eps, spec.scale)
            rep = lcb_dr_error_bound(profile, spec.permutation, sched)
            out[name] = {**rep.to_dict(), "schedule": sched.to_dict()}
        elif name == "emp-max":
            alloc = cfg.allocation or ([cfg.n] * inst.k if cfg.n else None)
            if alloc is None:
                raise UsageError("the emp-max bound needs --allocation or --n")
            vq = variance_quantities(inst, alloc, cfg.method, substream(cfg.seed, 0))
            per = {}
            for i, a in enumerate(inst.actions):
                b1, b2 = empirical_max_bounds(inst.k, int(min(alloc)), lip.per_action[i], vq.sigma_T)
                per[a] = {"hoeffding": b1, "lipschitz": b2, "L": lip.per_action[i]}
            out[name] = {"sigma_T": vq.sigma_T, "per_action": per}
    return _envelope("bounds", cfg, {"bounds": out}), 0


def _with(cfg: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    return ExperimentConfig(**{**asdict(cfg), **changes})


def cmd_verify(cfg: ExperimentConfig) -> tuple[dict[str, Any], int]:
    """Oracle comparison, tail checks and the UCB-E audit on one instance."""
    inst = _validated(cfg)
    _check_trials(cfg)
    profile = gap_profile(inst)
    trials, seed = cfg.trials, cfg.seed
    checks: dict[str, Any] = {}
    ok = True

    ns = [cfg.n] if cfg.n else [1, 2, 3]
    oracle = []
    for j, n in enumerate(ns):
        exact = exact_ue_distribution(inst, n, profile)
        est = mc_regret(inst, profile, AlgorithmSpec("ue", n=n), trials, seed + j)
        agree = exact.agrees_with(est)
        ok &= agree
        oracle.append({"n": n, "exact": exact.to_dict(), "mc": est.to_dict(), "pass": agree})
    checks["oracle"] = oracle

    grid = cfg.t_grid or [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
    alloc = cfg.allocation or [10] * inst.k
    tails = []
    for i in range(inst.l):
        for i2 in range(inst.l):
            if i == i2:
                continue
            mc = tail_check_mcdiarmid(inst, i, i2, int(min(alloc)), grid, trials, seed)
            be = tail_check_bernstein(inst, i, i2, alloc, grid, trials, seed, cfg.method)
            ok &= mc.all_pass and be.all_pass
            tails.append({"a": inst.actions[i], "a2": inst.actions[i2],
                          "mcdiarmid": mc.to_dict(), "bernstein": be.to_dict()})
    checks["tails"] = tails

    emax = []
    for i in range(inst.l):
        rep = expectation_max_check(inst, i, alloc, trials, seed)
        ok &= rep.all_pass
        emax.append({"a": inst.actions[i], **rep.to_dict()})
    checks["expectation_max"] = emax

    if profile.unique_a_star and all(profile.unique_worst_q) and math.isfinite(profile.delta_dr_min):
        audits = []
        for scale in (cfg.scales or [1.0, 400.0]):
            n_runs = min(trials, 1000)
            batch = simulate_lcb_dr(inst, profile, None, "auto", substream(seed, 0), n_runs,
                                    scale=scale, instrument=True)
            rounds = ucbe_event_audit(batch, profile)
            ok &= all(r.passed for r in rounds)
            audits.append({"scale": scale, "runs": n_runs, "rounds": [r.to_dict() for r in rounds]})
        checks["ucbe_audit"] = audits
    else:
        checks["ucbe_audit"] = "skipped: instance lacks unique optima or positive gaps"

    return _envelope("verify", cfg, {"instance": cfg.instance, "checks": checks, "all_pass": ok}), 0 if ok else 1


COMMANDS = {"analyze": cmd_analyze, "run": cmd_run, "mc": cmd_mc, "bounds": cmd_bounds, "verify": cmd_verify}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _int_lists(text: str) -> list[list[int]]:
    return [_ints(part) for part in text.split(";") if part.strip()]


def _seed(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be a decimal integer, got {text!r}") from exc
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("instance", nargs="?", help="instance JSON file or fixture name (E1, E2)")
    common.add_argument("--config", help="ExperimentConfig JSON; explicit flags override it")
    common.add_argument("--seed", type=_seed)
    common.add_argument("--trials", type=int)
    common.add_argument("--out")
    common.add_argument("--format", choices=["json", "csv"])
    common.add_argument("--method", choices=["exact", "mc", "auto"])
    common.add_argument("--algorithm", choices=["ue", "nue", "lcb-dr"])
    common.add_argument("--n", type=int)
    common.add_argument("--allocation", type=_ints)
    common.add_argument("--permutation", type=_strs)
    common.add_argument("--eps", type=_floats)
    common.add_argument("--scale", type=float)
    common.add_argument("--budgets", type=_ints)
    common.add_argument("--n-grid", dest="n_grid", type=_ints)
    common.add_argument("--allocations", type=_int_lists, help="semicolon-separated allocations")
    common.add_argument("--scales", type=_floats)
    common.add_argument("--bounds", type=_strs)
    common.add_argument("--T", dest="T", type=int)
    common.add_argument("--t-grid", dest="t_grid", type=_floats)

    parser = argparse.ArgumentParser(prog="drmdl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "analyze": "gap profile and Lipschitz constants",
        "run": "one seeded run of ue, nue or lcb-dr",
        "mc": "Monte Carlo sweep written as CSV",
        "bounds": "evaluate theoretical bounds",
        "verify": "oracle, concentration and audit checks (exit 1 on failure)",
    }
    for name, h in helps.items():
        sub.add_parser(name, parents=[common], help=h)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        try:
            cfg = ExperimentConfig.from_json(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(ExperimentConfig)
        if f.name != "command" and getattr(args, f.name, None) is not None
    }
    if args.command == "mc" and "format" not in overrides:
        overrides["format"] = "csv"
    return _with(cfg, command=args.command, **overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        cfg = config_from_args(args)
        if cfg.command == "mc":
            if cfg.format != "csv":
                raise UsageError("mc writes CSV only")
            text, code = cmd_mc(cfg)
        else:
            report, code = COMMANDS[cfg.command](cfg)
            text = render(report, cfg.format)
    except (UsageError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    _emit(text, cfg)
    return code


if __name__ == "__main__":
    sys.exit(main())
