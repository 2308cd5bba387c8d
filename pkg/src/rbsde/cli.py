"""
Command line entry point.

    rbsde validate|run|sweep|compare|report <scenario.json> [--out DIR]
          [--seed U64] [--paths P] [--steps N] [--threads K]

Exit status: 0 when every asserted check passes, 1 when one fails,
2 for scenario or hypothesis errors, 3 for other runtime errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import experiments
from .exceptions import HypothesisError, RBSDEError, ScenarioError
from .scenario import bundled, parse_scenario

log = logging.getLogger("rbsde")


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="rbsde", description="Reflected BSDEs in moving convex regions.")
    p.add_argument("verb", choices=["validate", "run", "sweep", "compare", "report"])
    p.add_argument("scenario", help="scenario JSON file or the name of a bundled scenario")
    p.add_argument("--out", type=Path, help="output directory (default: out/<scenario name>)")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--paths", type=_positive)
    p.add_argument("--steps", type=_positive)
    p.add_argument("--threads", type=_positive, help="cap on BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(name):
    path = Path(name)
    if path.exists():
        return path
    try:
        return bundled(name)
    except KeyError:
        raise ScenarioError(f"{name}: no such file or bundled scenario") from None


def _report(out):
    path = out / "result.json"
    if not path.exists():
        raise ScenarioError(f"{path}: no result to report (run the scenario first)")
    data = json.loads(path.read_text(encoding="utf-8"))
    print(f"scenario {data['scenario']['name']}  mode {data['mode']}  passed {data['passed']}")
    for diag in data["diagnostics"]:
        for c in diag["checks"]:
            flag = "ok" if c["passed"] else "FAIL"
            if not c["asserted"]:
                flag = "--"
            print(f"  {diag['scheme']:>10} {str(diag['parameter']):>6}  {c['name']:<24} "
                  f"{c['statistic']!s:>24}  <= {c['threshold']!s:<12} {flag}")
    for row in data["convergence"]:
        print("  " + "  ".join(f"{k}={v}" for k, v in row.items()))
    return 0 if data["passed"] else 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {"seed": args.seed, "paths": args.paths, "steps": args.steps}
    try:
        path = _resolve(args.scenario)
        if args.verb == "report":
            out = args.out or Path("out") / path.stem
            return _report(out)
        with threadpool_limits(limits=args.threads):
            scenario = parse_scenario(path, overrides)
            out = args.out or Path("out") / scenario.name
            if args.verb == "validate":
                print(json.dumps(experiments._clean(scenario.validation), indent=2,
                                 default=experiments._json_default))
                return 0
            result = experiments.run(scenario, mode=args.verb)
        for w in result.warnings:
            log.warning(w)
        experiments.write_outputs(result, out)
        failed = [(s, p, c.name) for s, p, rep in result.diagnostics for c in rep.checks
                  if c.asserted and not c.passed]
        for s, p, name in failed:
            print(f"FAILED {s}:{p} {name}", file=sys.stderr)
        print(f"{scenario.name}: {'passed' if not failed else 'FAILED'} -> {out}")
        return 1 if failed else 0
    except (ScenarioError, HypothesisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RBSDEError, ValueError, MemoryError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
