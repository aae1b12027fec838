"""Command-line front end: uniform and adaptive studies, degree study, invariant checks.

Exit status: 0 on success, 2 for configuration errors, 3 for solver failures
and 4 when an invariant check fails.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .adapt import AdaptConfig, adapt_run
from .analysis import (PSTUDY_COLUMNS, REFINEMENTS, run_pstudy, run_uniform, write_records,
                       write_rows)
from .forms import PenaltyConfig
from .linalg import SolverError
from .mesh import write_mesh
from .problems import PROBLEMS, get_problem

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INVARIANT = 4


COMMAND_DEFAULTS = {"*": {"problem": "square-sine", "degree": "2"},
                    "pstudy": {"problem": "lshape-singular", "degree": "2-20"}}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def parse_degrees(text: str) -> list[int]:
    """``"5"``, ``"2-20"`` or ``"2,4,6"`` to a list of degrees (each at least 2)."""
    out: list[int] = []
    try:
        for part in str(text).split(","):
            if "-" in part:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot read degrees from {text!r}") from None
    if not out or min(out) < 2:
        raise ConfigError(f"degrees must be at least 2, got {text!r}")
    return out


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys use flag names."""
    vals = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        vals[k.lstrip("-").replace("-", "_")] = v
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biharmdg", description="IPDG for the clamped biharmonic problem.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; command-line flags take precedence")
    common.add_argument("--problem", help=f"one of {sorted(PROBLEMS)} (default: square-sine, "
                        "lshape-singular for pstudy)")
    common.add_argument("--degree", help="polynomial degree, default 2 (pstudy: range such as "
                        "2-20, the default)")
    common.add_argument("--c-sigma", type=float, default=None, help="value penalty (3p^6)")
    common.add_argument("--c-tau", type=float, default=None, help="gradient penalty (9p^2)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--quad-boost", type=_positive_int, default=0,
                        help="extra quadrature exactness")

    u = sub.add_parser("uniform", parents=[common], help="uniform refinement study")
    u.add_argument("--levels", type=_positive_int, default=4)
    u.add_argument("--max-dofs", type=int, default=None)
    u.add_argument("--refinement", choices=sorted(REFINEMENTS), default="bisection")

    a = sub.add_parser("adaptive", parents=[common], help="adaptive refinement study")
    a.add_argument("--levels", type=_positive_int, default=20, help="maximum iterations")
    a.add_argument("--max-dofs", type=int, default=50_000)
    a.add_argument("--estimator", choices=("eta", "gimel"), default="eta")
    a.add_argument("--theta", type=float, default=0.5)
    a.add_argument("--dump-meshes", action="store_true", help="write the mesh of every iteration")

    sub.add_parser("pstudy", parents=[common], help="degree study on the initial mesh")

    v = sub.add_parser("verify", parents=[common], help="invariant checks")
    v.add_argument("--quick", action="store_true", help="shorter comparison-constant runs")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        vals = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {act.dest for act in sub._actions}
        unknown = sorted(set(vals) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        for act in sub._actions:
            if act.dest in vals and isinstance(act, argparse._StoreTrueAction):
                vals[act.dest] = vals[act.dest].lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**vals)
        args = parser.parse_args(argv)
    for key, value in COMMAND_DEFAULTS.get(args.command, COMMAND_DEFAULTS["*"]).items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    return args


def penalties_for(args, p: int) -> PenaltyConfig:
    d = PenaltyConfig.default(p)
    cs = d.c_sigma if args.c_sigma is None else args.c_sigma
    ct = d.c_tau if args.c_tau is None else args.c_tau
    try:
        return PenaltyConfig(cs, ct, p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _single_degree(args) -> int:
    degrees = parse_degrees(args.degree)
    if len(degrees) != 1:
        raise ConfigError(f"{args.command} takes a single degree, got {args.degree!r}")
    return degrees[0]


def _problem(args):
    try:
        return get_problem(args.problem)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _progress(rec) -> None:
    print(f"level {rec.level}: ndof={rec.ndof} err_hess={rec.err_hess:.4e} "
          f"err_dg={rec.err_dg:.4e} eta={rec.eta:.4e} gimel={rec.gimel:.4e}", flush=True)


def cmd_uniform(args, out: Path) -> int:
    p = _single_degree(args)
    if args.max_dofs is not None and args.max_dofs < 1:
        raise ConfigError("--max-dofs must be positive")
    records, warning = run_uniform(_problem(args), p, args.levels, penalties_for(args, p),
                                   args.max_dofs, args.quad_boost, refinement=args.refinement,
                                   callback=_progress)
    path = out / f"uniform_{args.problem}_p{p}.csv"
    write_records(records, path, warning)
    if warning:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_adaptive(args, out: Path) -> int:
    p = _single_degree(args)
    try:
        config = AdaptConfig(p=p, estimator=args.estimator, theta=args.theta,
                             max_levels=max(args.levels, 1), max_dofs=args.max_dofs,
                             penalties=penalties_for(args, p), quad_boost=args.quad_boost)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    stem = f"adaptive_{args.problem}_p{p}_{args.estimator}"
    problem = _problem(args)

    def dump(it, mesh):
        write_mesh(mesh, out / f"{stem}_mesh{it:03d}.txt")

    records = []
    if args.levels > 0:
        records = adapt_run(problem, config=config, callback=_progress,
                            mesh_callback=dump if args.dump_meshes else None)
    path = out / f"{stem}.csv"
    write_records(records, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_pstudy(args, out: Path) -> int:
    degrees = parse_degrees(args.degree)
    problem = _problem(args)

    def show(row):
        print(f"p={row['p']}: eff_hess={row['eff_hess']:.4g} eff_dg={row['eff_dg']:.4g} "
              f"{row['status']}", flush=True)

    rows = run_pstudy(problem, degrees, quad_boost=args.quad_boost,
                      penalties=lambda p: penalties_for(args, p), callback=show)
    path = out / f"pstudy_{args.problem}.csv"
    write_rows(rows, PSTUDY_COLUMNS, path)
    print(f"wrote {path}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_SOLVER


def cmd_verify(args, out: Path) -> int:
    from .verify import run_all

    p = _single_degree(args)
    override = args.c_sigma is not None or args.c_tau is not None
    report = run_all(penalties_for(args, p) if override else None, quick=args.quick)
    for line in report.lines():
        print(line)
    path = out / "verify.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("check", "value", "tol", "passed", "detail"))
        for r in report.results:
            w.writerow((r.name, f"{r.value:.6e}", f"{r.tol:.1e}", int(r.passed), r.detail))
    print(f"wrote {path}")
    return EXIT_OK if report.passed else EXIT_INVARIANT


COMMANDS = {"uniform": cmd_uniform, "adaptive": cmd_adaptive, "pstudy": cmd_pstudy,
            "verify": cmd_verify}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
