"""Command line front end for the scenario runner.

Exit codes: 0 all checks passed, 1 at least one check failed, 2 unknown
scenario / bad arguments / bad config, 3 the series or the path sampler
diverged.  When several scenarios are run, the worst code wins, in the
order 2 > 3 > 1 > 0.
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import dyson, scenarios
from .dyson import SeriesDivergence
from .gridfn import default_grid

_SEVERITY = {0: 0, 1: 1, 3: 2, 2: 3}


def _worse(a: int, b: int) -> int:
    return a if _SEVERITY[a] >= _SEVERITY[b] else b


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="semipert",
        description="run perturbed-semigroup scenarios and property checks")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one or more scenarios")
    run.add_argument("names", nargs="+",
                     help="scenario names, or 'all' for every known one")
    run.add_argument("--config", help="JSON file with extra scenarios "
                                      "and/or tolerance overrides")
    run.add_argument("--out", help="directory for report.json / "
                                   "functions.csv (one subdir per scenario)")
    run.add_argument("--seed", type=int, help="override the sampler seed")
    run.add_argument("--grid-points", type=int, dest="grid_points",
                     help="override the number of grid nodes")
    run.add_argument("--tol", type=float,
                     help="override the oracle comparison tolerance")
    run.add_argument("--jobs", type=int, default=1,
                     help="run up to this many scenarios concurrently")
    run.add_argument("--dump-matrix", action="store_true", dest="dump_matrix",
                     help="also write the one-step matrix (needs --out)")

    lst = sub.add_parser("list", help="list known scenarios")
    lst.add_argument("--config", help="JSON file with extra scenarios")

    dm = sub.add_parser("dump-matrix",
                        help="write a scenario's one-step matrix as CSV")
    dm.add_argument("name")
    dm.add_argument("--config", help="JSON file with extra scenarios")
    dm.add_argument("--out", default=".", help="output directory")
    dm.add_argument("--grid-points", type=int, dest="grid_points",
                    help="override the number of grid nodes")
    return p


def _load_registry(config_path):
    config = scenarios.load_config(config_path) if config_path else None
    return scenarios.build_registry(config), config


def cmd_run(args) -> int:
    try:
        registry, config = _load_registry(args.config)
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    names = list(dict.fromkeys(args.names))
    if names == ["all"]:
        names = list(registry)
    unknown = [n for n in names if n not in registry]
    if unknown:
        print(f"error: unknown scenario(s): {', '.join(unknown)}; "
              f"try 'semipert list'", file=sys.stderr)
        return 2
    if args.dump_matrix and not args.out:
        print("error: --dump-matrix needs --out", file=sys.stderr)
        return 2
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    global_tols = (config or {}).get("tolerances", {})

    def one(name: str):
        out_dir = Path(args.out) / name if args.out else None
        try:
            rep = scenarios.run_scenario(
                registry[name], grid_points=args.grid_points,
                seed=args.seed, tol=args.tol, out_dir=out_dir,
                dump_matrix=args.dump_matrix, global_tolerances=global_tols)
            return rep, None
        except (SeriesDivergence, ArithmeticError) as exc:
            return None, (3, exc)
        except (KeyError, ValueError) as exc:
            return None, (2, exc)

    if args.jobs > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(zip(names, pool.map(one, names)))
    else:
        results = {name: one(name) for name in names}

    code = 0
    for name in names:
        rep, err = results[name]
        if err is not None:
            err_code, exc = err
            label = "diverged" if err_code == 3 else "error"
            print(f"{name}: {label}: {exc}")
            code = _worse(code, err_code)
            continue
        print(f"{name}: {rep['verdict']}")
        for chk in rep["checks"]:
            print(f"  [{chk['verdict']}] {chk['name']}")
        if rep["verdict"] != "pass":
            code = _worse(code, 1)
    return code


def cmd_list(args) -> int:
    try:
        registry, _ = _load_registry(args.config)
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    builtin = set(scenarios.builtin_scenarios())
    for name, sc in registry.items():
        tag = "" if name in builtin else " (from config)"
        print(f"{name:22s} {sc.description}{tag}")
    return 0


def cmd_dump_matrix(args) -> int:
    try:
        registry, _ = _load_registry(args.config)
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    sc = registry.get(args.name)
    if sc is None:
        print(f"error: unknown scenario {args.name!r}", file=sys.stderr)
        return 2
    if sc.kind != "matrix":
        print(f"error: scenario {args.name!r} has no single one-step matrix",
              file=sys.stderr)
        return 2
    points = args.grid_points or int(sc.grid.get("points", 256))
    grid = default_grid(points)
    try:
        M = dyson.one_step_matrix(scenarios.make_perturbation(sc.perturbation),
                                  scenarios.make_base(sc.base, grid),
                                  scenarios.STEP, rho=sc.rho)
    except SeriesDivergence as exc:
        print(f"{args.name}: diverged: {exc}", file=sys.stderr)
        return 3
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.name}_matrix.csv"
    M.dump_csv(path)
    print(path)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "list":
        return cmd_list(args)
    return cmd_dump_matrix(args)


if __name__ == "__main__":
    sys.exit(main())
